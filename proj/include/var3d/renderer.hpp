#pragma once

#include "var3d/image.hpp"
#include "var3d/nn.hpp"

namespace var3d {

struct RenderConfig {
  int steps = 24;
  Scalar near_plane = 0.2;
  Scalar far_plane = 3.8;
  Vec3 background{1, 1, 1};
  bool jitter = false;       // stratified sample offsets; off for tests
  uint64_t jitter_seed = 0;

  void validate() const {
    check_arg(steps >= 8, "render config: steps must be >= 8");
    check_arg(far_plane > near_plane, "render config: far must exceed near");
  }
};

// Small per-point feature -> (density, rgb) map shared between the renderer
// and the triplane decoder. Density uses softplus, rgb uses sigmoid.
struct PointDecoder {
  Linear fc, density_head, rgb_head;
  int feature_dim = 0;

  PointDecoder() = default;
  PointDecoder(ParamStore& ps, const std::string& name, int features, int hidden, RngStream& rng);

  // (N, C) -> density (N), rgb (N, 3)
  std::pair<Tensor, Tensor> decode(const Tensor& features) const;
};

struct TriplaneField {
  Tensor planes;  // (3, C, P, P), bounds fixed to [-1, 1]^3
  const PointDecoder* decoder = nullptr;

  int resolution() const { return planes.dim(2); }
  int channels() const { return planes.dim(1); }
};

// Feature lookup: sum of bilinear samples of the three plane projections.
Tensor sample_triplane(const TriplaneField& field, const Tensor& points);

struct RenderedView {
  Tensor rgb;    // (H, W, 3)
  Tensor depth;  // (H, W), expected termination distance
  Tensor mask;   // (H, W), 1 - final transmittance
};

// Emission-absorption compositing along camera rays; differentiable in the
// plane contents and decoder parameters.
RenderedView volume_render(const TriplaneField& field, const Camera& camera, int height,
                           int width, const RenderConfig& cfg);

// Field dump: u32 P, u32 C header + three row-major float32 plane grids.
void write_field_dump(const std::string& path, const TriplaneField& field);
Tensor read_field_dump(const std::string& path);  // returns (3, C, P, P)

}  // namespace var3d
