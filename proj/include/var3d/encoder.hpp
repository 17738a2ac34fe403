#pragma once

#include "var3d/image.hpp"
#include "var3d/nn.hpp"

namespace var3d {

struct EncoderConfig {
  int views = 4;
  int image_size = 64;
  std::vector<int> widths{32, 64, 64, 128, 128, 256};   // 6 trunk stages
  std::vector<int> strides{2, 2, 2, 1, 1, 1};
  std::vector<int> attn_levels{5, 6};                   // per-view attention, 1-indexed
  int attn_heads = 4;
  int latent_res = 8;
  int latent_channels = 8;  // d
  bool view_embedding = true;
  int max_views = 8;

  int bottleneck_res() const {
    int r = image_size;
    for (int s : strides) r /= s;
    return r;
  }
  void validate() const;
};

// Residual pre-norm self-attention over the flattened spatial positions of a
// feature map; zero-initialized output projection makes it an exact identity
// at construction.
struct SpatialAttentionBlock {
  SelfAttention attn;

  SpatialAttentionBlock() = default;
  SpatialAttentionBlock(ParamStore& ps, const std::string& name, int width, int heads,
                        RngStream& rng);
  // x: (N, C, H, W), attention applied independently per item
  Tensor forward(const Tensor& x) const;
  // token-level entry point; extra is an optional additive bias on the
  // attention branch input (view embeddings)
  Tensor forward_tokens(const Tensor& tokens, const Tensor& extra) const;
};

class MultiViewEncoder {
 public:
  MultiViewEncoder(ParamStore& ps, const std::string& prefix, EncoderConfig cfg, RngStream& rng);

  // Input assembly: per view channels (rgb, depth / far, plucker) = 10.
  static Tensor assemble_input(const MultiViewSample& sample);

  Tensor encode(const MultiViewSample& sample) const;  // (3, d, h, w)
  Tensor encode_views(const Tensor& views_10chw) const;

  // spec operations, exposed for direct testing
  Tensor per_view_attend(const Tensor& h_level, int level) const;  // (V,C,hh,ww)
  Tensor cross_view_attend(const Tensor& bottleneck) const;
  Tensor multiscale_fuse(const Tensor& h_prime, const std::vector<Tensor>& m_levels) const;
  Tensor to_triplane(const Tensor& fused) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  std::vector<Conv2d> stages_;
  std::vector<SpatialAttentionBlock> view_attn_;  // parallel to attn_levels
  SpatialAttentionBlock cross_attn_;
  std::vector<Conv2d> fuse_proj_;  // 1x1, zero-init, one per fused level
  Conv2d triplane_conv_;
  Tensor view_embedding_;  // (max_views, bottleneck width)
};

}  // namespace var3d
