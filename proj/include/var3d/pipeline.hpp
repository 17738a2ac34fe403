#pragma once

#include <memory>
#include <optional>

#include "var3d/checkpoint.hpp"
#include "var3d/config.hpp"
#include "var3d/scene.hpp"

namespace var3d {

// Assembled stage-one system (encoder + codebook + decoder) over one store.
struct VqvaeBundle {
  ParamStore ps;
  std::unique_ptr<MultiViewEncoder> encoder;
  std::unique_ptr<Codebook> codebook;
  std::unique_ptr<TriplaneDecoder> decoder;
  ScaleSchedule schedule;
  RenderConfig rcfg;

  static std::unique_ptr<VqvaeBundle> build(const RunConfig& cfg);
  void load(const Checkpoint& ck);
  void freeze_all();
};

struct ArBundle {
  ParamStore ps;
  std::unique_ptr<ARModel> model;

  static std::unique_ptr<ArBundle> build(const RunConfig& cfg);
};

struct StageMetrics {
  int64_t steps_run = 0;
  Scalar first_loss = 0;
  Scalar final_loss = 0;
  Scalar val_psnr = 0;
  Scalar utilization = 0;
  std::string checkpoint_path;
  uint64_t param_hash = 0;
};

void gen_data(const RunConfig& cfg);

StageMetrics train_vqvae(const RunConfig& cfg);
StageMetrics train_ar(const RunConfig& cfg);

struct SampleOutput {
  std::vector<std::string> image_paths;
  std::string field_path, token_path, metadata_path;
};
SampleOutput sample_asset(const RunConfig& cfg);

struct EvalReport {
  Scalar recon_psnr = 0, recon_ssim = 0, recon_proxy = 0;
  Scalar recon_psnr_unquantized = 0;  // latent decoded without the quantizer
  Scalar gen_psnr = 0, gen_ssim = 0, gen_proxy = 0;
  Scalar utilization = 0;
  std::string table;  // per-asset text table
};
EvalReport eval_pipeline(const RunConfig& cfg);

void render_field_grid(const RunConfig& cfg);

// Tokenizes every sample; reuses/creates a cache keyed by the codebook hash.
std::vector<TokenPyramid> tokenize_dataset(const std::vector<MultiViewSample>& samples,
                                           VqvaeBundle& vq, const std::string& cache_path);

uint64_t run_param_hash(const ParamStore& ps);

}  // namespace var3d
