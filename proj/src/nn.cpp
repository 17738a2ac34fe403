#include "var3d/nn.hpp"

#include <cmath>

namespace var3d {

Tensor ParamStore::create(const std::string& name, Shape shape, ArrayX values) {
  check_arg(!params_.count(name), "ParamStore: duplicate parameter " + name);
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  params_.emplace(name, t);
  return t;
}

Tensor ParamStore::create_randn(const std::string& name, Shape shape, RngStream& rng,
                                Scalar stddev) {
  ArrayX a(numel(shape));
  for (long i = 0; i < a.size(); ++i) a[i] = rng.normal() * stddev;
  return create(name, std::move(shape), std::move(a));
}

Tensor ParamStore::create_zeros(const std::string& name, Shape shape) {
  return create(name, shape, ArrayX::Zero(numel(shape)));
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  check_arg(it != params_.end(), "ParamStore: unknown parameter " + name);
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void ParamStore::freeze_prefix(const std::string& prefix) {
  for (auto& [name, t] : params_)
    if (name.rfind(prefix, 0) == 0) t.set_requires_grad(false);
}

bool ParamStore::prefix_frozen(const std::string& prefix) const {
  bool any = false;
  for (const auto& [name, t] : params_)
    if (name.rfind(prefix, 0) == 0) {
      any = true;
      if (t.requires_grad()) return false;
    }
  return any;
}

uint64_t ParamStore::content_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : params_) {
    h = fnv1a64(name, h);
    h = fnv1a64(t.value().data(), sizeof(Scalar) * static_cast<size_t>(t.numel()), h);
  }
  return h;
}

uint64_t ParamStore::content_hash_prefix(const std::string& prefix) const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : params_)
    if (name.rfind(prefix, 0) == 0) {
      h = fnv1a64(name, h);
      h = fnv1a64(t.value().data(), sizeof(Scalar) * static_cast<size_t>(t.numel()), h);
    }
  return h;
}

long ParamStore::total_elements() const {
  long n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, RngStream& rng,
               bool bias, Scalar init_scale) {
  if (init_scale == 0.0)
    w = ps.create_zeros(name + ".w", {in, out});
  else
    w = ps.create_randn(name + ".w", {in, out}, rng, init_scale / std::sqrt(static_cast<Scalar>(in)));
  if (bias) b = ps.create_zeros(name + ".b", {out});
}

Tensor Linear::forward(const Tensor& x) const {
  int in = w.dim(0), out = w.dim(1);
  Shape os = x.shape();
  check_arg(os.back() == in, "Linear: input width mismatch");
  Tensor x2 = reshape(x, {-1, in});
  Tensor y = matmul(x2, w);
  if (b.defined()) y = y + b;
  os.back() = out;
  return reshape(y, std::move(os));
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int in, int out, int k, int stride_,
               int pad_, RngStream& rng, bool bias, Scalar init_scale)
    : stride(stride_), pad(pad_) {
  Scalar fan_in = static_cast<Scalar>(in * k * k);
  if (init_scale == 0.0)
    w = ps.create_zeros(name + ".w", {out, in, k, k});
  else
    w = ps.create_randn(name + ".w", {out, in, k, k}, rng, init_scale / std::sqrt(fan_in));
  if (bias) b = ps.create_zeros(name + ".b", {out});
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

ConvTranspose2d::ConvTranspose2d(ParamStore& ps, const std::string& name, int in, int out, int k,
                                 int stride_, int pad_, RngStream& rng, bool bias)
    : stride(stride_), pad(pad_) {
  Scalar fan_in = static_cast<Scalar>(in * k * k) / static_cast<Scalar>(stride_ * stride_);
  w = ps.create_randn(name + ".w", {in, out, k, k}, rng, 1.0 / std::sqrt(fan_in));
  if (bias) b = ps.create_zeros(name + ".b", {out});
}

Tensor ConvTranspose2d::forward(const Tensor& x) const {
  return conv_transpose2d(x, w, b, stride, pad);
}

Tensor l2_normalize_lastdim(const Tensor& x, Scalar eps) {
  Tensor norm = sqrt(sum_axis(square(x), x.rank() - 1, true) + eps);
  return x / norm;
}

namespace {

// (T, width) -> (heads, T, dh)
Tensor split_heads(const Tensor& x, int heads) {
  long T = x.dim(0), W = x.dim(1);
  return permute(reshape(x, {static_cast<int>(T), heads, static_cast<int>(W / heads)}),
                 {1, 0, 2});
}

Tensor merge_heads(const Tensor& x) {
  long H = x.dim(0), T = x.dim(1), dh = x.dim(2);
  return reshape(permute(x, {1, 0, 2}), {static_cast<int>(T), static_cast<int>(H * dh)});
}

Tensor attention_core(Tensor q, Tensor k, const Tensor& v, const Tensor& mask, bool qk_norm,
                      const Tensor& logit_scale, int dh) {
  if (qk_norm) {
    q = l2_normalize_lastdim(q);
    k = l2_normalize_lastdim(k);
  }
  Tensor scores = bmm_nt(q, k);  // (H, Tq, Tk)
  if (qk_norm)
    scores = scores * reshape(exp(logit_scale), {-1, 1, 1});
  else
    scores = scores * (1.0 / std::sqrt(static_cast<Scalar>(dh)));
  if (mask.defined()) scores = scores + mask;
  Tensor attn = softmax_lastdim(scores);
  return bmm(attn, v);
}

}  // namespace

SelfAttention::SelfAttention(ParamStore& ps, const std::string& name, int width, int heads_,
                             RngStream& rng, bool qk_norm_, Scalar out_init_scale)
    : heads(heads_), qk_norm(qk_norm_) {
  check_arg(width % heads_ == 0, "SelfAttention: width not divisible by heads");
  qkv = Linear(ps, name + ".qkv", width, 3 * width, rng);
  out = Linear(ps, name + ".out", width, width, rng, true, out_init_scale);
  if (qk_norm)
    logit_scale = ps.create(name + ".logit_scale", {heads_},
                            ArrayX::Constant(heads_, std::log(10.0)));
}

Tensor SelfAttention::forward(const Tensor& x, const Tensor& mask) const {
  long T = x.dim(0), W = x.dim(1);
  int dh = static_cast<int>(W) / heads;
  Tensor proj = qkv.forward(x);  // (T, 3W)
  Tensor q = split_heads(slice(proj, 1, 0, static_cast<int>(W)), heads);
  Tensor k = split_heads(slice(proj, 1, static_cast<int>(W), static_cast<int>(W)), heads);
  Tensor v = split_heads(slice(proj, 1, 2 * static_cast<int>(W), static_cast<int>(W)), heads);
  Tensor ctx = attention_core(q, k, v, mask, qk_norm, logit_scale, dh);
  (void)T;
  return out.forward(merge_heads(ctx));
}

CrossAttention::CrossAttention(ParamStore& ps, const std::string& name, int width, int ctx_width,
                               int heads_, RngStream& rng, bool qk_norm_)
    : heads(heads_), qk_norm(qk_norm_) {
  check_arg(width % heads_ == 0, "CrossAttention: width not divisible by heads");
  q = Linear(ps, name + ".q", width, width, rng);
  kv = Linear(ps, name + ".kv", ctx_width, 2 * width, rng);
  out = Linear(ps, name + ".out", width, width, rng, true, 0.0);
  if (qk_norm)
    logit_scale = ps.create(name + ".logit_scale", {heads_},
                            ArrayX::Constant(heads_, std::log(10.0)));
}

Tensor CrossAttention::forward(const Tensor& x, const Tensor& ctx) const {
  long W = x.dim(1);
  int dh = static_cast<int>(W) / heads;
  Tensor qh = split_heads(q.forward(x), heads);
  Tensor kvp = kv.forward(ctx);  // (S, 2W)
  Tensor kh = split_heads(slice(kvp, 1, 0, static_cast<int>(W)), heads);
  Tensor vh = split_heads(slice(kvp, 1, static_cast<int>(W), static_cast<int>(W)), heads);
  Tensor out_h = attention_core(qh, kh, vh, Tensor(), qk_norm, logit_scale, dh);
  return out.forward(merge_heads(out_h));
}

void AdamW::step(ParamStore& ps) { step(ps, lr_); }

void AdamW::step(ParamStore& ps, Scalar lr_now) {
  ++t_;
  Scalar bc1 = 1.0 - std::pow(beta1_, static_cast<Scalar>(t_));
  Scalar bc2 = 1.0 - std::pow(beta2_, static_cast<Scalar>(t_));
  for (auto& [name, p] : ps.all()) {
    if (!p.requires_grad()) continue;
    const ArrayX& g = p.grad();
    if (g.size() == 0) continue;
    Slot& s = state_[name];
    if (s.m.size() == 0) {
      s.m = ArrayX::Zero(p.numel());
      s.v = ArrayX::Zero(p.numel());
    }
    s.m = beta1_ * s.m + (1.0 - beta1_) * g;
    s.v = beta2_ * s.v + (1.0 - beta2_) * g.square();
    ArrayX update = (s.m / bc1) / ((s.v / bc2).sqrt() + eps_);
    if (weight_decay_ > 0) update += weight_decay_ * p.raw_value();
    p.raw_value() -= lr_now * update;
  }
}

}  // namespace var3d
