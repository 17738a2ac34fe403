#pragma once

#include <string>
#include <vector>

#include "var3d/nn.hpp"

namespace var3d {

// Shared learnable codebook with per-epoch usage counts and staleness
// bookkeeping for dead-code revival.
struct Codebook {
  Tensor embeddings;             // (V, d_q) parameter
  std::vector<int64_t> usage;    // uses since the last reset
  std::vector<int64_t> stale;    // training steps since last use
  std::vector<bool> used_this_step;

  Codebook() = default;
  Codebook(ParamStore& ps, const std::string& name, int vocab, int dim, RngStream& rng);

  int vocab() const { return embeddings.dim(0); }
  int dim() const { return embeddings.dim(1); }
  void reset_usage();
  void end_step();  // fold used_this_step into stale counters
  uint64_t content_hash() const;
};

struct ScaleSchedule {
  std::vector<int> r;  // strictly increasing, r.back() == latent resolution

  int scales() const { return static_cast<int>(r.size()); }
  int final_res() const { return r.back(); }
  long total_tokens() const;  // 3 * sum r_i^2
  void validate(int latent_res) const;
};

// Per scale: 3 x r x r indices, plane-major then raster order.
struct TokenPyramid {
  ScaleSchedule schedule;
  std::vector<std::vector<int>> indices;

  int at(int scale, int plane, int y, int x) const {
    int r = schedule.r[static_cast<size_t>(scale)];
    return indices[static_cast<size_t>(scale)][(static_cast<size_t>(plane) * r + y) * r + x];
  }
  void validate(int vocab) const;
};

// Euclidean nearest row, ties to the lowest index; bumps usage counts.
std::vector<int> nearest_code(const MatrixX& vectors, Codebook& cb);

struct QuantizeResult {
  TokenPyramid tokens;
  Tensor fhat;  // (3, d_q, h, w); straight-through: forwards f_hat, backs onto f
  // per scale (encoder-side feature, selected codes), both (3*r*r, d_q),
  // graph-connected for the two halves of the VQ loss
  std::vector<std::pair<Tensor, Tensor>> scale_pairs;
  ArrayX final_residual;  // value of f - f_hat, for invariant checks
};

// Residual multi-scale quantization of a latent triplane (3, d_q, h, w).
QuantizeResult quantize_multiscale(const Tensor& f, const ScaleSchedule& schedule, Codebook& cb);

// Sum over scales of upsampled code embeddings; differentiable w.r.t. the
// codebook unless it is frozen.
Tensor dequantize(const TokenPyramid& pyramid, const Codebook& cb);
// Prefix reconstruction using only scales [0, upto).
Tensor dequantize_prefix(const TokenPyramid& pyramid, const Codebook& cb, int upto);

Tensor vq_loss(const std::vector<std::pair<Tensor, Tensor>>& scale_pairs, Scalar beta);

std::vector<int> serialize_tokens(const TokenPyramid& pyramid);
TokenPyramid deserialize_tokens(const std::vector<int>& sequence, const ScaleSchedule& schedule);

struct CodebookHealth {
  Scalar utilization = 0;  // fraction of rows used at least once
  Scalar perplexity = 0;   // exp(entropy of the usage distribution)
};
CodebookHealth codebook_health(const Codebook& cb);

// Reseeds rows unused for >= threshold steps to random recent encoder vectors
// plus small noise.
int revive_dead_codes(Codebook& cb, const MatrixX& recent_vectors, int64_t threshold,
                      uint64_t seed);

// On-disk dump: little-endian u32 sequence [k, r_1..r_k, serialized indices].
void write_token_dump(const std::string& path, const TokenPyramid& pyramid);
TokenPyramid read_token_dump(const std::string& path);

}  // namespace var3d
