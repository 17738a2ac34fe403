#include "var3d/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace var3d {

const char* kind_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Torus: return "torus";
    case PrimitiveKind::Capsule: return "capsule";
  }
  return "?";
}

Scalar Primitive::sdf(const Vec3& p) const {
  Vec3 q = p - center;
  switch (kind) {
    case PrimitiveKind::Sphere:
      return q.norm() - size.x();
    case PrimitiveKind::Box: {
      Vec3 d = q.cwiseAbs() - size;
      Vec3 dpos = d.cwiseMax(0.0);
      return dpos.norm() + std::min(std::max(d.x(), std::max(d.y(), d.z())), 0.0);
    }
    case PrimitiveKind::Torus: {
      Scalar ring = std::sqrt(q.x() * q.x() + q.z() * q.z()) - size.x();
      return std::sqrt(ring * ring + q.y() * q.y()) - size.y();
    }
    case PrimitiveKind::Capsule: {
      Scalar y = q.y() - std::min(std::max(q.y(), -size.x()), size.x());
      return std::sqrt(q.x() * q.x() + y * y + q.z() * q.z()) - size.y();
    }
  }
  return 1e9;
}

Scalar Primitive::bounding_radius() const {
  switch (kind) {
    case PrimitiveKind::Sphere: return size.x();
    case PrimitiveKind::Box: return size.norm();
    case PrimitiveKind::Torus: return size.x() + size.y();
    case PrimitiveKind::Capsule: return size.x() + size.y();
  }
  return 0;
}

namespace {

// polynomial smooth min; h also serves as the albedo mix weight
Scalar smooth_min(Scalar a, Scalar b, Scalar k, Scalar& h) {
  if (k <= 0) {
    h = a < b ? 1.0 : 0.0;
    return std::min(a, b);
  }
  h = std::min(std::max(0.5 + 0.5 * (b - a) / k, 0.0), 1.0);
  return b + (a - b) * h - k * h * (1.0 - h);
}

}  // namespace

Scalar SceneSDF::sdf(const Vec3& p) const {
  if (primitives.empty()) return 1e9;
  Scalar d = primitives[0].sdf(p);
  for (size_t i = 1; i < primitives.size(); ++i) {
    Scalar h;
    d = smooth_min(primitives[i].sdf(p), d, blend_radius, h);
  }
  return d;
}

std::pair<Scalar, Vec3> SceneSDF::sdf_albedo(const Vec3& p) const {
  if (primitives.empty()) return {1e9, Vec3(1, 1, 1)};
  Scalar d = primitives[0].sdf(p);
  Vec3 c = primitives[0].albedo;
  for (size_t i = 1; i < primitives.size(); ++i) {
    Scalar h;
    Scalar nd = smooth_min(primitives[i].sdf(p), d, blend_radius, h);
    c = primitives[i].albedo * h + c * (1.0 - h);
    d = nd;
  }
  return {d, c};
}

Vec3 SceneSDF::normal(const Vec3& p) const {
  const Scalar e = 1e-4;
  Vec3 n(sdf(p + Vec3(e, 0, 0)) - sdf(p - Vec3(e, 0, 0)),
         sdf(p + Vec3(0, e, 0)) - sdf(p - Vec3(0, e, 0)),
         sdf(p + Vec3(0, 0, e)) - sdf(p - Vec3(0, 0, e)));
  Scalar len = n.norm();
  return len > 1e-12 ? Vec3(n / len) : Vec3(0, 0, 1);
}

std::string SceneSDF::describe() const {
  std::ostringstream os;
  os.precision(17);
  os << "blend " << blend_radius << "\n";
  for (const auto& pr : primitives)
    os << kind_name(pr.kind) << " " << pr.color_name << " c " << pr.center.transpose() << " s "
       << pr.size.transpose() << " a " << pr.albedo.transpose() << "\n";
  return os.str();
}

void SceneSDF::validate() const {
  check_arg(!primitives.empty() && primitives.size() <= 6, "scene: needs 1..6 primitives");
  check_arg(blend_radius >= 0, "scene: blend radius must be >= 0");
  for (const auto& pr : primitives) {
    Scalar reach = pr.center.cwiseAbs().maxCoeff() + pr.bounding_radius();
    check_arg(reach <= 1.0 + 1e-9, "scene: primitive escapes the unit cube");
    check_arg(pr.size.x() > 0, "scene: non-positive size");
  }
}

namespace {

struct NamedColor {
  const char* name;
  Vec3 rgb;
};

const NamedColor kPalette[] = {
    {"red", {0.85, 0.15, 0.15}},    {"green", {0.15, 0.65, 0.20}},
    {"blue", {0.16, 0.30, 0.80}},   {"yellow", {0.90, 0.80, 0.15}},
    {"purple", {0.55, 0.20, 0.70}}, {"orange", {0.95, 0.55, 0.10}},
    {"cyan", {0.15, 0.75, 0.75}},   {"pink", {0.95, 0.45, 0.65}},
};
constexpr int kPaletteSize = 8;

}  // namespace

SceneSDF make_scene(uint64_t seed, int max_primitives) {
  check_arg(max_primitives >= 1 && max_primitives <= 6, "make_scene: max_primitives in [1,6]");
  RngStream rng(mix_seed(seed, "scene"));
  SceneSDF scene;
  scene.seed = seed;
  int n = rng.uniform_int(1, max_primitives);
  scene.blend_radius = rng.uniform(0.0, 0.12);

  // distinct colors via a seeded partial shuffle
  int order[kPaletteSize];
  for (int i = 0; i < kPaletteSize; ++i) order[i] = i;
  for (int i = kPaletteSize - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);

  for (int i = 0; i < n; ++i) {
    Primitive pr;
    pr.kind = static_cast<PrimitiveKind>(rng.uniform_int(0, 3));
    for (int a = 0; a < 3; ++a) pr.center[a] = rng.uniform(-0.55, 0.55);
    Scalar margin = 0.95 * (1.0 - pr.center.cwiseAbs().maxCoeff());
    switch (pr.kind) {
      case PrimitiveKind::Sphere:
        pr.size = Vec3(rng.uniform(0.15, std::min(0.45, margin)), 0, 0);
        break;
      case PrimitiveKind::Box: {
        Scalar cap = std::min(0.38, margin / std::sqrt(3.0));
        pr.size = Vec3(rng.uniform(0.12, cap), rng.uniform(0.12, cap), rng.uniform(0.12, cap));
        break;
      }
      case PrimitiveKind::Torus: {
        Scalar R = rng.uniform(0.18, std::min(0.4, 0.8 * margin));
        Scalar r = rng.uniform(0.06, std::min(0.15, margin - R));
        pr.size = Vec3(R, r, 0);
        break;
      }
      case PrimitiveKind::Capsule: {
        Scalar h = rng.uniform(0.12, std::min(0.35, 0.7 * margin));
        Scalar r = rng.uniform(0.08, std::min(0.2, margin - h));
        pr.size = Vec3(h, r, 0);
        break;
      }
    }
    const NamedColor& col = kPalette[order[i % kPaletteSize]];
    pr.albedo = col.rgb;
    pr.color_name = col.name;
    scene.primitives.push_back(pr);
  }
  scene.validate();
  return scene;
}

std::string make_caption(const SceneSDF& scene) {
  std::string caption;
  for (size_t i = 0; i < scene.primitives.size(); ++i) {
    if (i > 0) caption += " next to ";
    caption += "a " + scene.primitives[i].color_name + " " +
               kind_name(scene.primitives[i].kind);
  }
  return caption;
}

std::vector<Camera> sample_cameras(int n, Scalar radius, uint64_t seed) {
  check_arg(n >= 1, "sample_cameras: n must be >= 1");
  check_arg(radius > 1.0, "sample_cameras: radius must be > 1 (outside the unit cube)");
  RngStream rng(mix_seed(seed, "cameras"));
  std::vector<Camera> cams;
  const Scalar lo = -30.0 * M_PI / 180.0, hi = 45.0 * M_PI / 180.0;
  for (int i = 0; i < n; ++i) {
    Scalar azim = 2.0 * M_PI * (static_cast<Scalar>(i) + rng.uniform(-0.15, 0.15)) /
                  static_cast<Scalar>(n);
    Scalar elev = rng.uniform(lo, hi);
    Camera cam;
    cam.position = radius * Vec3(std::cos(elev) * std::cos(azim), std::sin(elev),
                                 std::cos(elev) * std::sin(azim));
    cam.look_at = Vec3(0, 0, 0);
    cam.up = Vec3(0, 1, 0);
    cam.fov_y = 50.0 * M_PI / 180.0;
    cam.near_plane = std::max(0.05, radius - 1.8);
    cam.far_plane = radius + 1.8;
    cam.validate();
    cams.push_back(cam);
  }
  return cams;
}

ViewRGBD render_groundtruth(const SceneSDF& scene, const Camera& camera, int height, int width,
                            int steps) {
  check_arg(steps >= 16, "render_groundtruth: steps must be >= 16");
  camera.validate();
  ViewRGBD view;
  view.camera = camera;
  view.rgb = ImageRGB(height, width);
  view.depth = ImageGray(height, width);
  view.mask = ImageGray(height, width);
  const Scalar eps = 1e-4;
  for (int iy = 0; iy < height; ++iy)
    for (int ix = 0; ix < width; ++ix) {
      Vec3 d = camera.ray_direction(ix, iy, width, height);
      Scalar t = camera.near_plane;
      bool hit = false;
      for (int it = 0; it < steps && t < camera.far_plane; ++it) {
        Vec3 p = camera.position + t * d;
        Scalar dist = scene.sdf(p);
        if (dist < eps) {
          hit = true;
          break;
        }
        t += dist;
      }
      if (hit) {
        Vec3 p = camera.position + t * d;
        auto [dist, albedo] = scene.sdf_albedo(p);
        Vec3 n = scene.normal(p);
        Scalar diffuse = std::max(0.0, n.dot(-d));
        Vec3 c = albedo * (0.15 + 0.85 * diffuse);
        for (int ch = 0; ch < 3; ++ch) {
          float q = std::lround(std::min(std::max(c[ch], 0.0), 1.0) * 255.0) / 255.f;
          view.rgb.at(iy, ix, ch) = q;
        }
        // pass depth through float32 so the on-disk raster is lossless
        view.depth.at(iy, ix) = static_cast<float>(t);
        view.mask.at(iy, ix) = 1.f;
      } else {
        for (int ch = 0; ch < 3; ++ch) view.rgb.at(iy, ix, ch) = 1.f;  // white background
      }
    }
  return view;
}

MultiViewSample make_sample(const SceneSDF& scene, const std::vector<Camera>& cameras, int height,
                            int width, int steps, const std::string& asset_id) {
  MultiViewSample s;
  s.asset_id = asset_id;
  s.caption = make_caption(scene);
  for (const auto& cam : cameras) {
    s.views.push_back(render_groundtruth(scene, cam, height, width, steps));
    s.plucker.push_back(plucker_embed(cam, height, width));
  }
  return s;
}

// ---------------------------------------------------------------------------
// dataset io
// ---------------------------------------------------------------------------

namespace {

std::string view_stem(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "view_%02d", i);
  return buf;
}

}  // namespace

void write_dataset(const std::vector<MultiViewSample>& samples, const std::string& directory) {
  fs::create_directories(directory);
  nlohmann::json manifest;
  manifest["format"] = "var3d-dataset-v1";
  manifest["assets"] = nlohmann::json::array();
  for (const auto& s : samples) {
    check_arg(!s.asset_id.empty(), "write_dataset: empty asset id");
    fs::path tmp = fs::path(directory) / (".tmp." + s.asset_id);
    fs::path final_dir = fs::path(directory) / s.asset_id;
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    for (size_t i = 0; i < s.views.size(); ++i) {
      const auto& v = s.views[i];
      std::string stem = (tmp / view_stem(static_cast<int>(i))).string();
      write_ppm(stem + "_rgb.ppm", v.rgb);
      write_f32_raster(stem + "_depth.f32", v.depth);
      write_mask_pgm(stem + "_mask.pgm", v.mask);
      write_camera_txt(stem + "_camera.txt", v.camera);
    }
    fs::remove_all(final_dir);
    fs::rename(tmp, final_dir);
    manifest["assets"].push_back({{"id", s.asset_id},
                                  {"views", s.views.size()},
                                  {"caption", s.caption},
                                  {"height", s.height()},
                                  {"width", s.width()}});
  }
  std::ofstream mf(fs::path(directory) / "manifest.json");
  if (!mf) throw IOError("cannot write manifest in " + directory);
  mf << manifest.dump(2) << "\n";
}

std::vector<MultiViewSample> read_dataset(const std::string& directory) {
  fs::path mpath = fs::path(directory) / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IOError("missing manifest: " + mpath.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    throw IOError("corrupt manifest " + mpath.string() + ": " + e.what());
  }
  std::vector<MultiViewSample> samples;
  for (const auto& entry : manifest.at("assets")) {
    MultiViewSample s;
    s.asset_id = entry.at("id").get<std::string>();
    s.caption = entry.at("caption").get<std::string>();
    int nviews = entry.at("views").get<int>();
    fs::path dir = fs::path(directory) / s.asset_id;
    for (int i = 0; i < nviews; ++i) {
      std::string stem = (dir / view_stem(i)).string();
      ViewRGBD v;
      try {
        v.rgb = read_ppm(stem + "_rgb.ppm");
        v.depth = read_f32_raster(stem + "_depth.f32");
        v.mask = read_mask_pgm(stem + "_mask.pgm");
        v.camera = read_camera_txt(stem + "_camera.txt");
      } catch (const IOError& e) {
        throw IOError("asset " + s.asset_id + ": " + e.what());
      }
      s.plucker.push_back(plucker_embed(v.camera, v.rgb.h, v.rgb.w));
      s.views.push_back(std::move(v));
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace var3d
