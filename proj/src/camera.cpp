#include "var3d/camera.hpp"

#include <cmath>

namespace var3d {

void Camera::validate() const {
  check_arg((position - look_at).norm() > 1e-12, "camera: position equals look-at");
  check_arg(far_plane > near_plane && near_plane > 0, "camera: requires far > near > 0");
  check_arg(fov_y > 0 && fov_y < M_PI, "camera: fov out of range");
  Vec3 fwd = (look_at - position).normalized();
  check_arg(fwd.cross(up).norm() > 1e-9, "camera: up parallel to view direction");
}

Camera::Basis Camera::basis() const {
  validate();
  Basis b;
  b.forward = (look_at - position).normalized();
  b.right = b.forward.cross(up).normalized();
  b.up = b.right.cross(b.forward);
  return b;
}

Vec3 Camera::ray_direction(int ix, int iy, int width, int height) const {
  Basis b = basis();
  Scalar tan_half = std::tan(fov_y * 0.5);
  Scalar aspect = static_cast<Scalar>(width) / static_cast<Scalar>(height);
  Scalar u = (2.0 * (ix + 0.5) / width - 1.0) * tan_half * aspect;
  Scalar v = (1.0 - 2.0 * (iy + 0.5) / height) * tan_half;
  return (b.forward + u * b.right + v * b.up).normalized();
}

std::vector<Scalar> plucker_embed(const Camera& camera, int height, int width) {
  check_arg(height >= 1 && width >= 1, "plucker_embed: H, W must be >= 1");
  camera.validate();
  Camera::Basis b = camera.basis();
  Scalar tan_half = std::tan(camera.fov_y * 0.5);
  Scalar aspect = static_cast<Scalar>(width) / static_cast<Scalar>(height);
  std::vector<Scalar> out(static_cast<size_t>(height) * width * 6);
  size_t k = 0;
  for (int iy = 0; iy < height; ++iy)
    for (int ix = 0; ix < width; ++ix) {
      Scalar u = (2.0 * (ix + 0.5) / width - 1.0) * tan_half * aspect;
      Scalar v = (1.0 - 2.0 * (iy + 0.5) / height) * tan_half;
      Vec3 d = (b.forward + u * b.right + v * b.up).normalized();
      Vec3 m = camera.position.cross(d);
      out[k++] = d.x();
      out[k++] = d.y();
      out[k++] = d.z();
      out[k++] = m.x();
      out[k++] = m.y();
      out[k++] = m.z();
    }
  return out;
}

}  // namespace var3d
