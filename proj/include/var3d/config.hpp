#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "var3d/ar.hpp"
#include "var3d/encoder.hpp"
#include "var3d/losses.hpp"

namespace var3d {

struct DataConfig {
  int assets = 8;
  int views = 4;
  int image_size = 64;
  Scalar camera_radius = 2.0;
  int max_primitives = 3;
  int gt_steps = 64;  // sphere-trace iteration budget
};

struct VqvaeSection {
  std::vector<int> widths{32, 64, 64, 128, 128, 256};
  std::vector<int> strides{2, 2, 2, 1, 1, 1};
  std::vector<int> attn_levels{5, 6};
  int attn_heads = 4;
  bool view_embedding = true;
  int latent_res = 8;
  int dq = 8;
  int codebook_size = 512;
  std::vector<int> schedule{1, 2, 3, 4, 6, 8};
  int c_dec = 64;
  int c_field = 16;
  int up_factor = 4;
  int point_hidden = 32;
  bool share_plane_weights = true;
  int render_steps = 24;
  Scalar render_near = 0.2;
  Scalar render_far = 3.8;
  bool render_jitter = false;
};

struct ArSection {
  int blocks = 16;
  int heads = 16;
  int width = 256;
  int cross_attn_every = 4;
  Scalar cond_dropout = 0.1;
  Scalar tau = 1.0;
  int text_width = 512;
  int text_buckets = 4096;
  int top_k = 0;
  Scalar top_p = 1.0;
  Scalar temperature = 1.0;
  Scalar cfg_scale = 1.0;
};

struct TrainSection {
  int vqvae_batch_size = 32;
  int ar_batch_size = 16;
  int vqvae_steps = 2000;
  int ar_steps = 1000;
  Scalar lr = 1e-4;
  std::string vqvae_lr_schedule = "constant";     // constant | linear-decay
  std::string ar_lr_schedule = "linear-decay";
  Scalar weight_decay = 0.01;
  int checkpoint_every = 500;
  int log_every = 25;
  int views_per_step = 2;  // 0 = all views
  int n_critic = 1;
  int64_t revive_threshold = 128;
  int revive_every = 16;
  int val_assets = 4;
  Scalar target_psnr = 0;         // early stop when both targets hit (0 = off)
  Scalar target_utilization = 0;
  std::string resume_from;
};

struct RunConfig {
  std::string stage = "gen-data";
  std::string dataset;
  std::string out_dir;
  uint64_t seed = 0;
  int threads = 1;
  std::string vqvae_checkpoint;
  std::string ar_checkpoint;
  std::string field_path;
  std::string prompt;
  uint64_t sample_seed = 0;

  DataConfig data;
  VqvaeSection vqvae;
  LossWeights loss;
  ArSection ar;
  TrainSection train;

  void validate() const;

  EncoderConfig encoder_config() const;
  DecoderConfig decoder_config() const;
  RenderConfig render_config() const;
  ScaleSchedule scale_schedule() const;
  ARConfig ar_config() const;
};

nlohmann::json to_json(const RunConfig& cfg);
// Strict: unknown keys or wrong value types are rejected naming the key.
RunConfig config_from_json(const nlohmann::json& j);

// Precedence: overrides ("a.b.c=value") > file > defaults.
RunConfig parse_config(const std::string& config_path,
                       const std::vector<std::string>& overrides);

}  // namespace var3d
