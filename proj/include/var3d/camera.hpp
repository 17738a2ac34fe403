#pragma once

#include "var3d/common.hpp"

namespace var3d {

struct Camera {
  Vec3 position{0, 0, 2.5};
  Vec3 look_at{0, 0, 0};
  Vec3 up{0, 1, 0};
  Scalar fov_y = 0.9;  // radians
  Scalar near_plane = 0.1;
  Scalar far_plane = 6.0;

  void validate() const;

  struct Basis {
    Vec3 forward, right, up;
  };
  Basis basis() const;

  // Unit ray direction through the center of pixel (ix, iy); iy counts rows
  // from the top.
  Vec3 ray_direction(int ix, int iy, int width, int height) const;
};

// Per-pixel Plücker line (direction, origin x direction), row-major H x W x 6.
std::vector<Scalar> plucker_embed(const Camera& camera, int height, int width);

}  // namespace var3d
