#pragma once

#include <memory>

#include "var3d/decoder.hpp"
#include "var3d/quantizer.hpp"

namespace var3d {

struct TextCondition {
  Tensor pooled;    // (text_width)
  Tensor sequence;  // (S, text_width), at least one row
  std::string prompt;
  bool is_null = false;
};

struct SamplingParams {
  int top_k = 0;           // 0 disables
  Scalar top_p = 1.0;      // 1 disables
  Scalar temperature = 1.0;
  Scalar cfg_scale = 1.0;  // 1 = pure conditional
};

struct ARConfig {
  int blocks = 16;
  int heads = 16;
  int width = 256;
  ScaleSchedule schedule;
  int vocab = 512;
  int dq = 8;
  Scalar gamma = 0.1;
  Scalar tau = 1.0;
  int cross_attn_every = 4;
  Scalar cond_dropout = 0.1;
  int text_width = 512;
  int text_buckets = 4096;
  SamplingParams sampling;

  void validate() const;
  long seq_len() const { return schedule.total_tokens(); }
};

// Pluggable text-encoder contract; returns false when the prompt yields no
// tokens (the model substitutes its learned null embedding).
struct TextEncoderBackend {
  virtual ~TextEncoderBackend() = default;
  virtual bool embed(const std::string& prompt, VectorX& pooled, MatrixX& sequence) const = 0;
};

// Default backend: deterministic hashed bag of whitespace tokens; pooled
// vector is the L2-normalized bucket-vector sum.
class HashedBagTextEncoder : public TextEncoderBackend {
 public:
  HashedBagTextEncoder(int buckets, int width) : buckets_(buckets), width_(width) {}
  bool embed(const std::string& prompt, VectorX& pooled, MatrixX& sequence) const override;
  VectorX bucket_vector(int bucket) const;

 private:
  int buckets_, width_;
};

// Decoder-only next-scale transformer with AdaLN conditioning, q/k-normalized
// attention, periodic cross-attention over the prompt tokens, and
// block-causal masking over the scale pyramid.
class ARModel {
 public:
  ARModel(ParamStore& ps, const std::string& prefix, ARConfig cfg, RngStream& rng,
          std::shared_ptr<TextEncoderBackend> backend = nullptr);

  TextCondition text_embed(const std::string& prompt) const;
  TextCondition null_condition() const;

  // Teacher-forced pass over every scale; returns per-scale logits
  // (3*r_i^2, V) in serialization order (raster position, then plane).
  std::vector<Tensor> forward_all(const TokenPyramid& targets, const Codebook& cb,
                                  const TextCondition& cond) const;

  // Logits for scale `prefix_scales + 1` given a pyramid prefix.
  Tensor forward_next(const TokenPyramid& prefix, int prefix_scales, const Codebook& cb,
                      const TextCondition& cond) const;

  Tensor ce_loss(const std::vector<Tensor>& logits, const TokenPyramid& targets) const;

  TokenPyramid generate(const TextCondition& cond, const SamplingParams& sp, const Codebook& cb,
                        uint64_t seed) const;

  const ARConfig& config() const { return cfg_; }
  // test hook: disables AdaLN modulation and cross-attention injection
  void set_conditioning_enabled(bool on) { conditioning_enabled_ = on; }

 private:
  struct Block {
    SelfAttention attn;
    Linear mlp_in, mlp_out;
    Linear modulation;  // text_width -> 6*width, zero-init
    CrossAttention cross;
    bool has_cross = false;
  };

  // scale_inputs[i] holds the (3*r_{i+2}^2, d_q) input vectors for block i+2
  // (block 1 is fed by the start token); runs blocks 1..m.
  std::vector<Tensor> forward_blocks(const std::vector<Tensor>& scale_inputs,
                                     const TextCondition& cond, int m) const;
  Tensor block_input_embedding(int scale_idx, const Tensor& vectors,
                               const TextCondition& cond) const;

  ARConfig cfg_;
  std::shared_ptr<TextEncoderBackend> backend_;
  bool conditioning_enabled_ = true;

  Linear word_in_;     // d_q -> width
  Linear start_proj_;  // text_width -> width
  Tensor null_embedding_;
  Tensor scale_emb_;   // (k, width)
  Tensor plane_emb_;   // (3, width)
  std::vector<Tensor> raster_emb_;  // per scale (r_i^2, width)
  std::vector<Block> blocks_;
  Linear head_;        // width -> V
  std::vector<ArrayX> masks_;  // cached additive block-causal masks per prefix length
};

// Hard one-hot forward with the soft-relaxation backward; rows of `logits`
// are independent categorical distributions.
Tensor gumbel_st_sample(const Tensor& logits, Scalar tau, RngStream& rng);

// Differentiable pipeline: one-hot maps -> codebook lookup -> multi-scale
// accumulation -> frozen decoder -> volume render -> l1/l2 against the ground
// truth view. Gradients reach the AR model through the one-hot maps only.
Tensor render_supervision_loss(const std::vector<Tensor>& fz_scales, const Codebook& cb,
                               const TriplaneDecoder& decoder, const ViewRGBD& gt,
                               const RenderConfig& rcfg, Scalar lambda_1, Scalar lambda_2);

Tensor total_ar_loss(const Tensor& ce, const Tensor& rend, Scalar gamma);

}  // namespace var3d
