#include "var3d/encoder.hpp"

namespace var3d {

void EncoderConfig::validate() const {
  check_arg(widths.size() == 6 && strides.size() == 6, "encoder: trunk must have 6 stages");
  check_arg(views >= 2, "encoder: needs at least 2 views");
  int r = image_size;
  for (size_t i = 0; i < strides.size(); ++i) {
    check_arg(strides[i] == 1 || strides[i] == 2, "encoder: stage strides must be 1 or 2");
    check_arg(r % strides[i] == 0, "encoder: image size not divisible by stride chain");
    r /= strides[i];
  }
  check_arg(r >= 1, "encoder: stride chain collapses the image");
  for (int l : attn_levels)
    check_arg(l >= 4 && l <= 6, "encoder: per-view attention only at levels 4..6");
  check_arg(latent_res >= 1 && latent_channels >= 1, "encoder: bad latent shape");
  check_arg(views <= max_views, "encoder: views exceed max_views");
}

SpatialAttentionBlock::SpatialAttentionBlock(ParamStore& ps, const std::string& name, int width,
                                             int heads, RngStream& rng) {
  attn = SelfAttention(ps, name, width, heads, rng, false, 0.0);
}

Tensor SpatialAttentionBlock::forward_tokens(const Tensor& tokens, const Tensor& extra) const {
  Tensor branch_in = layer_norm_lastdim(tokens);
  if (extra.defined()) branch_in = branch_in + extra;
  return tokens + attn.forward(branch_in, Tensor());
}

Tensor SpatialAttentionBlock::forward(const Tensor& x) const {
  long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<Tensor> outs;
  for (long n = 0; n < N; ++n) {
    Tensor item = slice(x, 0, static_cast<int>(n), 1);
    Tensor tokens = transpose(reshape(item, {static_cast<int>(C), static_cast<int>(H * W)}));
    Tensor y = forward_tokens(tokens, Tensor());
    outs.push_back(reshape(transpose(y), {1, static_cast<int>(C), static_cast<int>(H),
                                          static_cast<int>(W)}));
  }
  return outs.size() == 1 ? outs[0] : concat(outs, 0);
}

MultiViewEncoder::MultiViewEncoder(ParamStore& ps, const std::string& prefix, EncoderConfig cfg,
                                   RngStream& rng)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  int in_ch = 10;
  for (int i = 0; i < 6; ++i) {
    stages_.emplace_back(ps, prefix + ".stage" + std::to_string(i + 1), in_ch, cfg_.widths[i], 3,
                         cfg_.strides[i], 1, rng);
    in_ch = cfg_.widths[i];
  }
  for (size_t i = 0; i < cfg_.attn_levels.size(); ++i) {
    int level = cfg_.attn_levels[i];
    view_attn_.emplace_back(ps, prefix + ".view_attn" + std::to_string(level),
                            cfg_.widths[level - 1], cfg_.attn_heads, rng);
  }
  int bw = cfg_.widths[5];
  cross_attn_ = SpatialAttentionBlock(ps, prefix + ".cross_attn", bw, cfg_.attn_heads, rng);
  for (int l = 3; l < 6; ++l)
    fuse_proj_.emplace_back(ps, prefix + ".fuse_proj" + std::to_string(l + 1), cfg_.widths[l], bw,
                            1, 1, 0, rng, false, 0.0);
  triplane_conv_ = Conv2d(ps, prefix + ".to_triplane", bw, 3 * cfg_.latent_channels, 3, 1, 1, rng);
  view_embedding_ = ps.create_randn(prefix + ".view_embedding", {cfg_.max_views, bw}, rng, 0.02);
}

Tensor MultiViewEncoder::assemble_input(const MultiViewSample& sample) {
  sample.validate();
  const int V = static_cast<int>(sample.views.size());
  const int H = sample.height(), W = sample.width();
  ArrayX data(static_cast<long>(V) * 10 * H * W);
  long plane = static_cast<long>(H) * W;
  for (int v = 0; v < V; ++v) {
    const ViewRGBD& view = sample.views[static_cast<size_t>(v)];
    Scalar inv_far = 1.0 / view.camera.far_plane;
    Scalar* base = data.data() + static_cast<long>(v) * 10 * plane;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        long p = static_cast<long>(y) * W + x;
        for (int c = 0; c < 3; ++c) base[c * plane + p] = view.rgb.at(y, x, c);
        base[3 * plane + p] = view.depth.at(y, x) * inv_far;
        const auto& pk = sample.plucker[static_cast<size_t>(v)];
        for (int c = 0; c < 6; ++c)
          base[(4 + c) * plane + p] = pk[static_cast<size_t>(p) * 6 + c];
      }
  }
  return Tensor::from({V, 10, H, W}, std::move(data));
}

Tensor MultiViewEncoder::per_view_attend(const Tensor& h_level, int level) const {
  for (size_t i = 0; i < cfg_.attn_levels.size(); ++i)
    if (cfg_.attn_levels[i] == level) return view_attn_[i].forward(h_level);
  throw ArgumentError("per_view_attend: no attention block at level " + std::to_string(level));
}

Tensor MultiViewEncoder::cross_view_attend(const Tensor& bottleneck) const {
  long V = bottleneck.dim(0), C = bottleneck.dim(1);
  long HW = static_cast<long>(bottleneck.dim(2)) * bottleneck.dim(3);
  // (V, C, H, W) -> (V*H*W, C), views kept contiguous
  Tensor tokens = reshape(permute(bottleneck, {0, 2, 3, 1}), {static_cast<int>(V * HW),
                                                              static_cast<int>(C)});
  Tensor extra;
  if (cfg_.view_embedding) {
    std::vector<int> idx(static_cast<size_t>(V * HW));
    for (long v = 0; v < V; ++v)
      std::fill(idx.begin() + v * HW, idx.begin() + (v + 1) * HW, static_cast<int>(v));
    extra = gather_rows(view_embedding_, idx);
  }
  Tensor y = cross_attn_.forward_tokens(tokens, extra);
  return permute(reshape(y, {static_cast<int>(V), bottleneck.dim(2), bottleneck.dim(3),
                             static_cast<int>(C)}),
                 {0, 3, 1, 2});
}

Tensor MultiViewEncoder::multiscale_fuse(const Tensor& h_prime,
                                         const std::vector<Tensor>& m_levels) const {
  check_arg(m_levels.size() == 3, "multiscale_fuse: expects exactly 3 hierarchical levels");
  Tensor out = h_prime;
  for (size_t i = 0; i < 3; ++i) {
    Tensor resized = bilinear_resize(m_levels[i], h_prime.dim(2), h_prime.dim(3));
    out = out + fuse_proj_[i].forward(resized);
  }
  return out;
}

Tensor MultiViewEncoder::to_triplane(const Tensor& fused) const {
  Tensor pooled = mean_axis(fused, 0, true);  // (1, C, hh, ww)
  Tensor tri = triplane_conv_.forward(pooled);
  tri = reshape(tri, {3, cfg_.latent_channels, fused.dim(2), fused.dim(3)});
  if (fused.dim(2) != cfg_.latent_res || fused.dim(3) != cfg_.latent_res)
    tri = bilinear_resize(tri, cfg_.latent_res, cfg_.latent_res);
  return tri;
}

Tensor MultiViewEncoder::encode_views(const Tensor& views_10chw) const {
  check_arg(views_10chw.rank() == 4 && views_10chw.dim(1) == 10,
            "encode: input must be (views, 10, H, W)");
  check_arg(views_10chw.dim(2) == cfg_.image_size && views_10chw.dim(3) == cfg_.image_size,
            "encode: image size mismatch");
  Tensor h = views_10chw;
  std::vector<Tensor> m_levels;
  for (int level = 1; level <= 6; ++level) {
    h = silu(stages_[static_cast<size_t>(level - 1)].forward(h));
    for (size_t i = 0; i < cfg_.attn_levels.size(); ++i)
      if (cfg_.attn_levels[i] == level) h = view_attn_[i].forward(h);
    if (level >= 4) m_levels.push_back(h);
  }
  Tensor h_prime = cross_view_attend(h);
  Tensor fused = multiscale_fuse(h_prime, m_levels);
  return to_triplane(fused);
}

Tensor MultiViewEncoder::encode(const MultiViewSample& sample) const {
  check_arg(static_cast<int>(sample.views.size()) == cfg_.views,
            "encode: view count mismatch with config");
  return encode_views(assemble_input(sample));
}

}  // namespace var3d
