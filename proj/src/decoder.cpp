#include "var3d/decoder.hpp"

#include <cmath>

namespace var3d {

void DecoderConfig::validate() const {
  check_arg(latent_channels >= 1 && latent_res >= 1, "decoder: bad latent shape");
  check_arg(unified_width >= 1 && field_channels >= 1, "decoder: bad widths");
  check_arg(up_factor >= 1 && (up_factor & (up_factor - 1)) == 0,
            "decoder: up_factor must be a power of two");
}

TriplaneDecoder::TriplaneDecoder(ParamStore& ps, const std::string& prefix, DecoderConfig cfg,
                                 RngStream& rng)
    : cfg_(std::move(cfg)), prefix_(prefix) {
  cfg_.validate();
  const int copies = cfg_.share_plane_weights ? 1 : 3;
  int n_up = 0;
  for (int f = cfg_.up_factor; f > 1; f /= 2) ++n_up;
  for (int c = 0; c < copies; ++c) {
    std::string tag = cfg_.share_plane_weights ? "" : ".plane" + std::to_string(c);
    unify_.emplace_back(ps, prefix + ".unify" + tag, cfg_.latent_channels, cfg_.unified_width, 3,
                        1, 1, rng, false);
    std::vector<ConvTranspose2d> stack;
    int ch = cfg_.unified_width;
    for (int i = 0; i < n_up; ++i) {
      int out = (i == n_up - 1) ? cfg_.field_channels : std::max(cfg_.field_channels, ch / 2);
      stack.emplace_back(ps, prefix + ".up" + std::to_string(i) + tag, ch, out, 4, 2, 1, rng);
      ch = out;
    }
    if (n_up == 0)
      stack.emplace_back(ps, prefix + ".up0" + tag, ch, cfg_.field_channels, 1, 1, 0, rng);
    up_stages_.push_back(std::move(stack));
  }
  point_ = PointDecoder(ps, prefix + ".point", cfg_.field_channels, cfg_.point_hidden, rng);
}

Tensor TriplaneDecoder::unify_scales(const Tensor& fhat) const {
  check_arg(fhat.rank() == 4 && fhat.dim(0) == 3 && fhat.dim(1) == cfg_.latent_channels,
            "unify_scales: latent must be (3, d_q, h, w)");
  if (cfg_.share_plane_weights) return unify_[0].forward(fhat);
  std::vector<Tensor> planes;
  for (int q = 0; q < 3; ++q) planes.push_back(unify_[static_cast<size_t>(q)].forward(
      slice(fhat, 0, q, 1)));
  return concat(planes, 0);
}

Tensor TriplaneDecoder::upsample_to_planes(const Tensor& unified) const {
  check_arg(unified.dim(1) == cfg_.unified_width, "upsample: unexpected channel width");
  if (cfg_.share_plane_weights) {
    Tensor h = unified;
    const auto& ups = up_stages_[0];
    for (size_t i = 0; i < ups.size(); ++i) {
      if (i > 0) h = silu(h);
      h = ups[i].forward(h);
    }
    return h;
  }
  std::vector<Tensor> planes;
  for (int q = 0; q < 3; ++q) {
    Tensor h = slice(unified, 0, q, 1);
    const auto& ups = up_stages_[static_cast<size_t>(q)];
    for (size_t i = 0; i < ups.size(); ++i) {
      if (i > 0) h = silu(h);
      h = ups[i].forward(h);
    }
    planes.push_back(h);
  }
  return concat(planes, 0);
}

TriplaneField TriplaneDecoder::decode_field(const Tensor& fhat) const {
  TriplaneField field;
  field.planes = upsample_to_planes(unify_scales(fhat));
  field.decoder = &point_;
  return field;
}

void TriplaneDecoder::freeze(ParamStore& ps) {
  ps.freeze_prefix(prefix_ + ".");
  frozen_ = true;
}

}  // namespace var3d
