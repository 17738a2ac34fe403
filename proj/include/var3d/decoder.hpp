#pragma once

#include "var3d/renderer.hpp"

namespace var3d {

struct DecoderConfig {
  int latent_channels = 8;  // d_q
  int latent_res = 8;
  int unified_width = 64;   // C_dec
  int field_channels = 16;  // feature width consumed by the point decoder
  int up_factor = 4;        // power of two; plane res P = up_factor * latent_res
  int point_hidden = 32;
  bool share_plane_weights = true;

  int plane_res() const { return up_factor * latent_res; }
  void validate() const;
};

// Scale-unified projection + learned upsampling to a renderable triplane
// field; also owns the point decoder used by the renderer.
class TriplaneDecoder {
 public:
  TriplaneDecoder(ParamStore& ps, const std::string& prefix, DecoderConfig cfg, RngStream& rng);

  Tensor unify_scales(const Tensor& fhat) const;           // (3,d_q,h,w) -> (3,C_dec,h,w)
  Tensor upsample_to_planes(const Tensor& unified) const;  // -> (3,C_field,P,P)
  TriplaneField decode_field(const Tensor& fhat) const;

  const PointDecoder& point_decoder() const { return point_; }
  const DecoderConfig& config() const { return cfg_; }

  // Marks every decoder parameter immutable. Forward passes still carry
  // gradients to their inputs. Idempotent.
  void freeze(ParamStore& ps);
  bool frozen() const { return frozen_; }

  const std::string& prefix() const { return prefix_; }

 private:
  DecoderConfig cfg_;
  std::string prefix_;
  bool frozen_ = false;
  // index 0 is shared across planes; per-plane variants hold 3 entries
  std::vector<Conv2d> unify_;
  std::vector<std::vector<ConvTranspose2d>> up_stages_;
  PointDecoder point_;
};

}  // namespace var3d
