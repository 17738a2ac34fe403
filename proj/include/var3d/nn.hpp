#pragma once

#include <map>
#include <string>

#include "var3d/tensor.hpp"

namespace var3d {

// Central registry of named trainable tensors. Names are hierarchical
// ("encoder.stage0.w"); iteration order is the sorted name order, which keeps
// optimizer updates and checkpoints deterministic.
class ParamStore {
 public:
  Tensor create(const std::string& name, Shape shape, ArrayX values);
  Tensor create_randn(const std::string& name, Shape shape, RngStream& rng, Scalar stddev);
  Tensor create_zeros(const std::string& name, Shape shape);

  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Tensor& at(const std::string& name);
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }

  void zero_grads();
  void freeze_prefix(const std::string& prefix);
  bool prefix_frozen(const std::string& prefix) const;  // true if all match and none trainable
  uint64_t content_hash() const;
  uint64_t content_hash_prefix(const std::string& prefix) const;
  long total_elements() const;

 private:
  std::map<std::string, Tensor> params_;
};

struct Linear {
  Tensor w;  // (in, out)
  Tensor b;  // optional

  Linear() = default;
  // init_scale 0 gives an exactly-zero weight (residual output projections).
  Linear(ParamStore& ps, const std::string& name, int in, int out, RngStream& rng,
         bool bias = true, Scalar init_scale = 1.0);

  Tensor forward(const Tensor& x) const;  // (..., in) -> (..., out)
};

struct Conv2d {
  Tensor w;  // (out, in, k, k)
  Tensor b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int in, int out, int k, int stride, int pad,
         RngStream& rng, bool bias = true, Scalar init_scale = 1.0);

  Tensor forward(const Tensor& x) const;
};

struct ConvTranspose2d {
  Tensor w;  // (in, out, k, k)
  Tensor b;
  int stride = 1, pad = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore& ps, const std::string& name, int in, int out, int k, int stride,
                  int pad, RngStream& rng, bool bias = true);

  Tensor forward(const Tensor& x) const;
};

// Multi-head self-attention over a (T, width) sequence. Optional unit-length
// q/k normalization with a learnable per-head logit scale.
struct SelfAttention {
  Linear qkv, out;
  int heads = 1;
  bool qk_norm = false;
  Tensor logit_scale;  // (heads), log-domain, present when qk_norm

  SelfAttention() = default;
  SelfAttention(ParamStore& ps, const std::string& name, int width, int heads, RngStream& rng,
                bool qk_norm = false, Scalar out_init_scale = 0.0);

  // mask: optional additive (T, T) bias; pass undefined Tensor for none.
  Tensor forward(const Tensor& x, const Tensor& mask) const;
};

// Cross-attention: queries from (T, width), keys/values from (S, ctx_width).
struct CrossAttention {
  Linear q, kv, out;
  int heads = 1;
  bool qk_norm = false;
  Tensor logit_scale;

  CrossAttention() = default;
  CrossAttention(ParamStore& ps, const std::string& name, int width, int ctx_width, int heads,
                 RngStream& rng, bool qk_norm = false);

  Tensor forward(const Tensor& x, const Tensor& ctx) const;
};

// AdamW with decoupled weight decay; skips frozen parameters.
class AdamW {
 public:
  AdamW(Scalar lr, Scalar beta1 = 0.9, Scalar beta2 = 0.999, Scalar eps = 1e-8,
        Scalar weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(ParamStore& ps);
  void step(ParamStore& ps, Scalar lr_override);

  int64_t step_count() const { return t_; }
  Scalar base_lr() const { return lr_; }

  struct Slot {
    ArrayX m, v;
  };
  std::map<std::string, Slot>& slots() { return state_; }
  void set_step_count(int64_t t) { t_ = t; }

 private:
  Scalar lr_, beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::map<std::string, Slot> state_;
};

// L2-normalizes the last dim (adds eps inside the square root).
Tensor l2_normalize_lastdim(const Tensor& x, Scalar eps = 1e-12);

}  // namespace var3d
