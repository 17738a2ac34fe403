#pragma once

#include <string>
#include <vector>

#include "var3d/image.hpp"

namespace var3d {

enum class PrimitiveKind { Sphere, Box, Torus, Capsule };

const char* kind_name(PrimitiveKind k);

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Vec3 center{0, 0, 0};
  // kind-specific positive size parameters:
  //   sphere: (radius, -, -)        box: half extents (x, y, z)
  //   torus:  (major R, minor r, -) capsule: (half height, radius, -), y axis
  Vec3 size{0.3, 0.3, 0.3};
  Vec3 albedo{0.8, 0.2, 0.2};
  std::string color_name = "red";

  Scalar sdf(const Vec3& p) const;
  Scalar bounding_radius() const;
};

struct SceneSDF {
  std::vector<Primitive> primitives;
  Scalar blend_radius = 0.0;  // smooth-min union, >= 0
  uint64_t seed = 0;

  Scalar sdf(const Vec3& p) const;
  // distance plus smooth-min blended albedo
  std::pair<Scalar, Vec3> sdf_albedo(const Vec3& p) const;
  Vec3 normal(const Vec3& p) const;
  std::string describe() const;  // stable textual serialization
  void validate() const;
};

SceneSDF make_scene(uint64_t seed, int max_primitives);
std::string make_caption(const SceneSDF& scene);

// Cameras on a sphere around the origin; evenly spaced azimuths with seeded
// jitter, elevations in [-30 deg, +45 deg].
std::vector<Camera> sample_cameras(int n, Scalar radius, uint64_t seed);

ViewRGBD render_groundtruth(const SceneSDF& scene, const Camera& camera, int height, int width,
                            int steps);

MultiViewSample make_sample(const SceneSDF& scene, const std::vector<Camera>& cameras, int height,
                            int width, int steps, const std::string& asset_id);

void write_dataset(const std::vector<MultiViewSample>& samples, const std::string& directory);
std::vector<MultiViewSample> read_dataset(const std::string& directory);

}  // namespace var3d
