#include "var3d/ar.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace var3d {

void ARConfig::validate() const {
  check_arg(blocks >= 1 && heads >= 1 && width >= heads, "ar: bad transformer shape");
  check_arg(width % heads == 0, "ar: width must be divisible by heads");
  check_arg(tau > 0, "ar: gumbel temperature must be positive");
  check_arg(vocab >= 2 && dq >= 1, "ar: bad vocabulary");
  check_arg(cross_attn_every >= 1, "ar: cross_attn_every must be >= 1");
  check_arg(text_width >= 1 && text_buckets >= 1, "ar: bad text embedding shape");
  schedule.validate(schedule.r.empty() ? 0 : schedule.r.back());
}

// ---------------------------------------------------------------------------
// text embedding
// ---------------------------------------------------------------------------

VectorX HashedBagTextEncoder::bucket_vector(int bucket) const {
  RngStream rng(mix_seed(0x7a31dbeef002ull, "text-bucket", static_cast<uint64_t>(bucket)));
  VectorX v(width_);
  Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(width_));
  for (int i = 0; i < width_; ++i) v[i] = rng.normal() * scale;
  return v;
}

bool HashedBagTextEncoder::embed(const std::string& prompt, VectorX& pooled,
                                 MatrixX& sequence) const {
  std::vector<int> buckets;
  std::string token;
  std::istringstream is(prompt);
  while (is >> token) {
    for (auto& c : token) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    buckets.push_back(static_cast<int>(fnv1a64(token) % static_cast<uint64_t>(buckets_)));
  }
  if (buckets.empty()) return false;
  pooled = VectorX::Zero(width_);
  sequence.resize(static_cast<long>(buckets.size()), width_);
  for (size_t i = 0; i < buckets.size(); ++i) {
    VectorX v = bucket_vector(buckets[i]);
    sequence.row(static_cast<long>(i)) = v.transpose();
    pooled += v;
  }
  Scalar n = pooled.norm();
  if (n > 1e-12) pooled /= n;
  return true;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

ARModel::ARModel(ParamStore& ps, const std::string& prefix, ARConfig cfg, RngStream& rng,
                 std::shared_ptr<TextEncoderBackend> backend)
    : cfg_(std::move(cfg)), backend_(std::move(backend)) {
  cfg_.validate();
  if (!backend_)
    backend_ = std::make_shared<HashedBagTextEncoder>(cfg_.text_buckets, cfg_.text_width);

  const int W = cfg_.width;
  word_in_ = Linear(ps, prefix + ".word_in", cfg_.dq, W, rng);
  start_proj_ = Linear(ps, prefix + ".start_proj", cfg_.text_width, W, rng);
  null_embedding_ = ps.create_randn(prefix + ".null_embedding", {cfg_.text_width}, rng, 1.0);
  const int k = cfg_.schedule.scales();
  scale_emb_ = ps.create_randn(prefix + ".scale_emb", {k, W}, rng, 0.02);
  plane_emb_ = ps.create_randn(prefix + ".plane_emb", {3, W}, rng, 0.02);
  for (int i = 0; i < k; ++i) {
    int r = cfg_.schedule.r[static_cast<size_t>(i)];
    raster_emb_.push_back(
        ps.create_randn(prefix + ".raster_emb" + std::to_string(i), {r * r, W}, rng, 0.02));
  }
  for (int b = 0; b < cfg_.blocks; ++b) {
    Block blk;
    std::string base = prefix + ".block" + std::to_string(b);
    blk.attn = SelfAttention(ps, base + ".attn", W, cfg_.heads, rng, true, 0.0);
    blk.mlp_in = Linear(ps, base + ".mlp_in", W, 4 * W, rng);
    blk.mlp_out = Linear(ps, base + ".mlp_out", 4 * W, W, rng, true, 0.0);
    blk.modulation = Linear(ps, base + ".mod", cfg_.text_width, 6 * W, rng, true, 0.0);
    if ((b + 1) % cfg_.cross_attn_every == 0) {
      blk.cross = CrossAttention(ps, base + ".cross", W, cfg_.text_width, cfg_.heads, rng, true);
      blk.has_cross = true;
    }
    blocks_.push_back(std::move(blk));
  }
  head_ = Linear(ps, prefix + ".head", W, cfg_.vocab, rng);

  // additive block-causal masks for every prefix length
  std::vector<long> block_len;
  for (int r : cfg_.schedule.r) block_len.push_back(3L * r * r);
  for (int m = 1; m <= k; ++m) {
    long L = std::accumulate(block_len.begin(), block_len.begin() + m, 0L);
    ArrayX mask = ArrayX::Zero(L * L);
    long q0 = 0;
    for (int bi = 0; bi < m; ++bi) {
      long allowed = std::accumulate(block_len.begin(), block_len.begin() + bi + 1, 0L);
      for (long q = q0; q < q0 + block_len[static_cast<size_t>(bi)]; ++q)
        for (long key = allowed; key < L; ++key) mask[q * L + key] = -1e30;
      q0 += block_len[static_cast<size_t>(bi)];
    }
    masks_.push_back(std::move(mask));
  }
}

TextCondition ARModel::text_embed(const std::string& prompt) const {
  VectorX pooled;
  MatrixX sequence;
  if (!backend_->embed(prompt, pooled, sequence)) {
    TextCondition c = null_condition();
    c.prompt = prompt;
    return c;
  }
  TextCondition c;
  c.prompt = prompt;
  ArrayX pa(pooled.size());
  for (long i = 0; i < pooled.size(); ++i) pa[i] = pooled[i];
  c.pooled = Tensor::from({cfg_.text_width}, std::move(pa));
  ArrayX sa(sequence.size());
  for (long r = 0; r < sequence.rows(); ++r)
    for (long col = 0; col < sequence.cols(); ++col) sa[r * sequence.cols() + col] = sequence(r, col);
  c.sequence = Tensor::from({static_cast<int>(sequence.rows()), cfg_.text_width}, std::move(sa));
  return c;
}

TextCondition ARModel::null_condition() const {
  TextCondition c;
  c.is_null = true;
  Tensor norm = l2_normalize_lastdim(reshape(null_embedding_, {1, cfg_.text_width}));
  c.pooled = reshape(norm, {cfg_.text_width});
  c.sequence = reshape(c.pooled, {1, cfg_.text_width});
  return c;
}

Tensor ARModel::block_input_embedding(int scale_idx, const Tensor& vectors,
                                      const TextCondition& cond) const {
  int r = cfg_.schedule.r[static_cast<size_t>(scale_idx)];
  long L = 3L * r * r;
  Tensor base;
  if (scale_idx == 0) {
    Tensor start = start_proj_.forward(reshape(cond.pooled, {1, cfg_.text_width}));
    base = Tensor::zeros({static_cast<int>(L), cfg_.width}) + start;
  } else {
    check_arg(vectors.defined() && vectors.dim(0) == L && vectors.dim(1) == cfg_.dq,
              "ar: scale input shape mismatch");
    base = word_in_.forward(vectors);
  }
  std::vector<int> plane_idx(static_cast<size_t>(L)), raster_idx(static_cast<size_t>(L));
  for (long n = 0; n < L; ++n) {
    plane_idx[static_cast<size_t>(n)] = static_cast<int>(n % 3);
    raster_idx[static_cast<size_t>(n)] = static_cast<int>(n / 3);
  }
  base = base + slice(scale_emb_, 0, scale_idx, 1);
  base = base + gather_rows(plane_emb_, plane_idx);
  base = base + gather_rows(raster_emb_[static_cast<size_t>(scale_idx)], raster_idx);
  return base;
}

std::vector<Tensor> ARModel::forward_blocks(const std::vector<Tensor>& scale_inputs,
                                            const TextCondition& cond, int m) const {
  check_arg(m >= 1 && m <= cfg_.schedule.scales(), "ar: bad block count");
  check_arg(static_cast<int>(scale_inputs.size()) == m - 1, "ar: scale input count mismatch");

  std::vector<Tensor> embs;
  for (int i = 0; i < m; ++i)
    embs.push_back(block_input_embedding(i, i == 0 ? Tensor() : scale_inputs[static_cast<size_t>(i - 1)], cond));
  Tensor x = embs.size() == 1 ? embs[0] : concat(embs, 0);
  long L = x.dim(0);
  Tensor mask = Tensor::from({static_cast<int>(L), static_cast<int>(L)},
                             ArrayX(masks_[static_cast<size_t>(m - 1)]));

  Tensor c = reshape(cond.pooled, {1, cfg_.text_width});
  const int W = cfg_.width;
  for (const Block& blk : blocks_) {
    Tensor g1, mod;
    Tensor h = layer_norm_lastdim(x);
    if (conditioning_enabled_) {
      mod = blk.modulation.forward(c);  // (1, 6W)
      h = h * (slice(mod, 1, 0, W) + 1.0) + slice(mod, 1, W, W);
    }
    Tensor a = blk.attn.forward(h, mask);
    if (conditioning_enabled_) a = a * (slice(mod, 1, 2 * W, W) + 1.0);
    x = x + a;
    if (blk.has_cross && conditioning_enabled_)
      x = x + blk.cross.forward(layer_norm_lastdim(x), cond.sequence);
    Tensor h2 = layer_norm_lastdim(x);
    if (conditioning_enabled_)
      h2 = h2 * (slice(mod, 1, 3 * W, W) + 1.0) + slice(mod, 1, 4 * W, W);
    Tensor mlp = blk.mlp_out.forward(silu(blk.mlp_in.forward(h2)));
    if (conditioning_enabled_) mlp = mlp * (slice(mod, 1, 5 * W, W) + 1.0);
    x = x + mlp;
  }
  Tensor logits = head_.forward(layer_norm_lastdim(x));  // (L, V)

  std::vector<Tensor> per_scale;
  long off = 0;
  for (int i = 0; i < m; ++i) {
    int r = cfg_.schedule.r[static_cast<size_t>(i)];
    long Li = 3L * r * r;
    per_scale.push_back(slice(logits, 0, static_cast<int>(off), static_cast<int>(Li)));
    off += Li;
  }
  return per_scale;
}

namespace {

// (3, d, r, r) value maps -> (3*r*r, d) vectors in serialization order
// (raster position major, planes consecutive)
Tensor maps_to_sequence_vectors(const Tensor& maps) {
  int d = maps.dim(1), r = maps.dim(2);
  return reshape(permute(maps, {2, 3, 0, 1}), {3 * r * r, d});
}

Tensor sequence_vectors_to_maps(const Tensor& vectors, int r, int d) {
  return permute(reshape(vectors, {r, r, 3, d}), {2, 3, 0, 1});
}

// plane-major token map of one scale -> (3, dq, r, r) embedding values
Tensor scale_embedding_maps(const std::vector<int>& tokens, const Codebook& cb, int r) {
  Tensor z = gather_rows(cb.embeddings, tokens);  // plane-major rows
  return permute(reshape(z, {3, r, r, cb.dim()}), {0, 3, 1, 2});
}

}  // namespace

std::vector<Tensor> ARModel::forward_all(const TokenPyramid& targets, const Codebook& cb,
                                         const TextCondition& cond) const {
  check_arg(targets.schedule.r == cfg_.schedule.r, "ar: pyramid schedule mismatch with config");
  targets.validate(cb.vocab());
  const int k = cfg_.schedule.scales();
  const int h = cfg_.schedule.final_res();
  std::vector<Tensor> inputs;
  {
    NoGradGuard off;
    Tensor acc;
    for (int i = 0; i + 1 < k; ++i) {
      int r = cfg_.schedule.r[static_cast<size_t>(i)];
      Tensor up = bilinear_resize(
          scale_embedding_maps(targets.indices[static_cast<size_t>(i)], cb, r), h, h);
      acc = acc.defined() ? acc + up : up;
      int rn = cfg_.schedule.r[static_cast<size_t>(i + 1)];
      inputs.push_back(maps_to_sequence_vectors(bilinear_resize(acc, rn, rn)));
    }
  }
  return forward_blocks(inputs, cond, k);
}

Tensor ARModel::forward_next(const TokenPyramid& prefix, int prefix_scales, const Codebook& cb,
                             const TextCondition& cond) const {
  check_arg(prefix_scales >= 0 && prefix_scales < cfg_.schedule.scales(),
            "ar: prefix covers the whole schedule");
  check_arg(prefix.schedule.r == cfg_.schedule.r || prefix_scales == 0,
            "ar: prefix schedule inconsistent with config");
  check_arg(static_cast<int>(prefix.indices.size()) >= prefix_scales,
            "ar: prefix misses scales");
  const int h = cfg_.schedule.final_res();
  std::vector<Tensor> inputs;
  {
    NoGradGuard off;
    Tensor acc;
    for (int i = 0; i < prefix_scales; ++i) {
      int r = cfg_.schedule.r[static_cast<size_t>(i)];
      for (int v : prefix.indices[static_cast<size_t>(i)])
        check_arg(v >= 0 && v < cb.vocab(), "ar: prefix token out of vocabulary");
      Tensor up = bilinear_resize(
          scale_embedding_maps(prefix.indices[static_cast<size_t>(i)], cb, r), h, h);
      acc = acc.defined() ? acc + up : up;
      int rn = cfg_.schedule.r[static_cast<size_t>(i + 1)];
      inputs.push_back(maps_to_sequence_vectors(bilinear_resize(acc, rn, rn)));
    }
  }
  return forward_blocks(inputs, cond, prefix_scales + 1).back();
}

Tensor ARModel::ce_loss(const std::vector<Tensor>& logits, const TokenPyramid& targets) const {
  check_arg(static_cast<int>(logits.size()) == cfg_.schedule.scales(),
            "ce_loss: logits must cover every scale");
  Tensor total;
  for (size_t i = 0; i < logits.size(); ++i) {
    int r = cfg_.schedule.r[i];
    long L = 3L * r * r;
    check_arg(logits[i].dim(0) == L && logits[i].dim(1) == cfg_.vocab,
              "ce_loss: logits shape mismatch");
    std::vector<int> tgt(static_cast<size_t>(L));
    for (long n = 0; n < L; ++n) {
      int q = static_cast<int>(n % 3);
      long p = n / 3;
      tgt[static_cast<size_t>(n)] =
          targets.indices[i][(static_cast<size_t>(q) * r + p / r) * r + p % r];
    }
    Tensor nll = -mean(take_per_row(log_softmax_lastdim(logits[i]), tgt));
    total = total.defined() ? total + nll : nll;
  }
  return total * (1.0 / static_cast<Scalar>(logits.size()));
}

Tensor gumbel_st_sample(const Tensor& logits, Scalar tau, RngStream& rng) {
  check_arg(tau > 0, "gumbel_st_sample: tau must be positive");
  check_arg(logits.rank() == 2, "gumbel_st_sample: expects (N, V)");
  long N = logits.dim(0), V = logits.dim(1);
  ArrayX noise(N * V);
  for (long i = 0; i < noise.size(); ++i) {
    Scalar u = std::max(rng.uniform(), 1e-300);
    noise[i] = -std::log(-std::log(u));
  }
  Tensor perturbed = (logits + Tensor::from(logits.shape(), std::move(noise))) * (1.0 / tau);
  Tensor soft = softmax_lastdim(perturbed);
  ArrayX hard = ArrayX::Zero(N * V);
  for (long n = 0; n < N; ++n) {
    long arg = 0;
    Scalar best = soft.value()[n * V];
    for (long v = 1; v < V; ++v)
      if (soft.value()[n * V + v] > best) {
        best = soft.value()[n * V + v];
        arg = v;
      }
    hard[n * V + arg] = 1.0;
  }
  return Tensor::from(logits.shape(), std::move(hard)) + (soft - detach(soft));
}

namespace {

int sample_categorical(const Scalar* logits, int V, const SamplingParams& sp, RngStream& rng) {
  if (sp.temperature <= 1e-12) {
    int arg = 0;
    for (int v = 1; v < V; ++v)
      if (logits[v] > logits[arg]) arg = v;
    return arg;
  }
  std::vector<int> order(static_cast<size_t>(V));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits[a] > logits[b]; });
  int keep = V;
  if (sp.top_k > 0 && sp.top_k < V) keep = sp.top_k;

  std::vector<Scalar> probs(static_cast<size_t>(keep));
  Scalar mx = logits[order[0]] / sp.temperature;
  Scalar total = 0;
  for (int i = 0; i < keep; ++i) {
    probs[static_cast<size_t>(i)] = std::exp(logits[order[static_cast<size_t>(i)]] / sp.temperature - mx);
    total += probs[static_cast<size_t>(i)];
  }
  if (sp.top_p < 1.0) {
    Scalar cum = 0;
    int cut = keep;
    for (int i = 0; i < keep; ++i) {
      cum += probs[static_cast<size_t>(i)] / total;
      if (cum >= sp.top_p) {
        cut = i + 1;
        break;
      }
    }
    keep = cut;
    total = 0;
    for (int i = 0; i < keep; ++i) total += probs[static_cast<size_t>(i)];
  }
  Scalar u = rng.uniform() * total;
  Scalar cum = 0;
  for (int i = 0; i < keep; ++i) {
    cum += probs[static_cast<size_t>(i)];
    if (u < cum) return order[static_cast<size_t>(i)];
  }
  return order[static_cast<size_t>(keep - 1)];
}

}  // namespace

TokenPyramid ARModel::generate(const TextCondition& cond, const SamplingParams& sp,
                               const Codebook& cb, uint64_t seed) const {
  NoGradGuard off;
  const int k = cfg_.schedule.scales();
  const int h = cfg_.schedule.final_res();
  TokenPyramid pyramid;
  pyramid.schedule = cfg_.schedule;
  TextCondition null_cond;
  const bool use_cfg = std::abs(sp.cfg_scale - 1.0) > 1e-12;
  if (use_cfg) null_cond = null_condition();

  std::vector<Tensor> inputs;
  Tensor acc;
  for (int i = 0; i < k; ++i) {
    int r = cfg_.schedule.r[static_cast<size_t>(i)];
    long L = 3L * r * r;
    Tensor logits = forward_blocks(inputs, cond, i + 1).back();
    if (use_cfg) {
      Tensor null_logits = forward_blocks(inputs, null_cond, i + 1).back();
      logits = null_logits + sp.cfg_scale * (logits - null_logits);
    }
    RngStream rng(mix_seed(seed, "ar.sample", static_cast<uint64_t>(i)));
    std::vector<int> map(static_cast<size_t>(L));
    for (long n = 0; n < L; ++n) {
      int tok = sample_categorical(logits.value().data() + n * cfg_.vocab, cfg_.vocab, sp, rng);
      int q = static_cast<int>(n % 3);
      long p = n / 3;
      map[(static_cast<size_t>(q) * r + p / r) * r + p % r] = tok;
    }
    pyramid.indices.push_back(std::move(map));

    Tensor up = bilinear_resize(scale_embedding_maps(pyramid.indices.back(), cb, r), h, h);
    acc = acc.defined() ? acc + up : up;
    if (i + 1 < k) {
      int rn = cfg_.schedule.r[static_cast<size_t>(i + 1)];
      inputs.push_back(maps_to_sequence_vectors(bilinear_resize(acc, rn, rn)));
    }
  }
  return pyramid;
}

Tensor render_supervision_loss(const std::vector<Tensor>& fz_scales, const Codebook& cb,
                               const TriplaneDecoder& decoder, const ViewRGBD& gt,
                               const RenderConfig& rcfg, Scalar lambda_1, Scalar lambda_2) {
  if (!decoder.frozen())
    throw StateError("render_supervision_loss: decoder must be frozen");
  const int h = decoder.config().latent_res;
  Tensor codes = detach(cb.embeddings);  // gradients reach the AR model through f_z only
  Tensor acc;
  check_arg(!fz_scales.empty(), "render_supervision_loss: no scales");
  for (size_t i = 0; i < fz_scales.size(); ++i) {
    const Tensor& fz = fz_scales[i];
    check_arg(fz.rank() == 2 && fz.dim(1) == cb.vocab(),
              "render_supervision_loss: one-hot shape mismatch");
    long L = fz.dim(0);
    int r = static_cast<int>(std::lround(std::sqrt(static_cast<Scalar>(L / 3))));
    check_arg(3L * r * r == L, "render_supervision_loss: map length is not 3*r^2");
    Tensor emb = matmul(fz, codes);  // (L, dq)
    Tensor up = bilinear_resize(sequence_vectors_to_maps(emb, r, cb.dim()), h, h);
    acc = acc.defined() ? acc + up : up;
  }
  TriplaneField field = decoder.decode_field(acc);
  RenderedView pred = volume_render(field, gt.camera, gt.rgb.h, gt.rgb.w, rcfg);
  Tensor diff = pred.rgb - to_tensor(gt.rgb);
  return lambda_1 * mean(abs(diff)) + lambda_2 * mean(square(diff));
}

Tensor total_ar_loss(const Tensor& ce, const Tensor& rend, Scalar gamma) {
  if (!rend.defined() || gamma == 0) return reshape(ce, ce.shape());
  return ce + gamma * rend;
}

}  // namespace var3d
