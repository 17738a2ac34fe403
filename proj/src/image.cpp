#include "var3d/image.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace var3d {

void ViewRGBD::validate() const {
  check_arg(rgb.h == depth.h && rgb.w == depth.w && rgb.h == mask.h && rgb.w == mask.w,
            "ViewRGBD: channel dimensions inconsistent");
  for (float v : rgb.data) check_arg(std::isfinite(v), "ViewRGBD: non-finite rgb");
  for (size_t i = 0; i < depth.data.size(); ++i) {
    bool hit = mask.data[i] != 0.f;
    check_arg(hit == (depth.data[i] > 0.f), "ViewRGBD: mask/depth mismatch");
    check_arg(mask.data[i] == 0.f || mask.data[i] == 1.f, "ViewRGBD: mask not binary");
  }
}

void MultiViewSample::validate() const {
  check_arg(views.size() >= 2, "MultiViewSample: needs at least 2 views");
  check_arg(plucker.size() == views.size(), "MultiViewSample: plucker/view count mismatch");
  for (const auto& v : views) {
    check_arg(v.rgb.h == height() && v.rgb.w == width(),
              "MultiViewSample: views disagree on resolution");
    v.validate();
  }
  for (const auto& p : plucker) {
    check_arg(static_cast<int>(p.size()) == height() * width() * 6,
              "MultiViewSample: plucker size mismatch");
    for (size_t i = 0; i < p.size(); i += 6) {
      Scalar n = std::sqrt(p[i] * p[i] + p[i + 1] * p[i + 1] + p[i + 2] * p[i + 2]);
      check_arg(std::abs(n - 1.0) < 1e-6, "MultiViewSample: plucker direction not unit");
    }
  }
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open for writing: " + path);
  return f;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open for reading: " + path);
  return f;
}

uint8_t to_byte(float v) {
  float c = std::min(std::max(v, 0.f), 1.f);
  return static_cast<uint8_t>(std::lround(c * 255.f));
}

}  // namespace

void write_ppm(const std::string& path, const ImageRGB& img) {
  auto f = open_out(path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) row[static_cast<size_t>(x) * 3 + c] = to_byte(img.at(y, x, c));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IOError("short write: " + path);
}

ImageRGB read_ppm(const std::string& path) {
  auto f = open_in(path);
  std::string magic;
  int w, h, maxv;
  f >> magic >> w >> h >> maxv;
  if (!f || magic != "P6" || maxv != 255 || w <= 0 || h <= 0)
    throw IOError("bad ppm header: " + path);
  f.get();
  ImageRGB img(h, w);
  std::vector<uint8_t> buf(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IOError("truncated ppm: " + path);
  for (size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<float>(buf[i]) / 255.f;
  return img;
}

void write_mask_pgm(const std::string& path, const ImageGray& mask) {
  auto f = open_out(path);
  f << "P5\n" << mask.w << " " << mask.h << "\n255\n";
  std::vector<uint8_t> buf(mask.data.size());
  for (size_t i = 0; i < buf.size(); ++i) buf[i] = mask.data[i] > 0.5f ? 255 : 0;
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IOError("short write: " + path);
}

ImageGray read_mask_pgm(const std::string& path) {
  auto f = open_in(path);
  std::string magic;
  int w, h, maxv;
  f >> magic >> w >> h >> maxv;
  if (!f || magic != "P5" || maxv != 255 || w <= 0 || h <= 0)
    throw IOError("bad pgm header: " + path);
  f.get();
  ImageGray img(h, w);
  std::vector<uint8_t> buf(static_cast<size_t>(w) * h);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IOError("truncated pgm: " + path);
  for (size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] > 127 ? 1.f : 0.f;
  return img;
}

void write_f32_raster(const std::string& path, const ImageGray& img) {
  auto f = open_out(path);
  uint32_t wh[2] = {static_cast<uint32_t>(img.w), static_cast<uint32_t>(img.h)};
  f.write(reinterpret_cast<const char*>(wh), sizeof(wh));
  f.write(reinterpret_cast<const char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (!f) throw IOError("short write: " + path);
}

ImageGray read_f32_raster(const std::string& path) {
  auto f = open_in(path);
  uint32_t wh[2];
  f.read(reinterpret_cast<char*>(wh), sizeof(wh));
  if (f.gcount() != sizeof(wh)) throw IOError("truncated raster header: " + path);
  if (wh[0] == 0 || wh[1] == 0 || wh[0] > 1u << 16 || wh[1] > 1u << 16)
    throw IOError("bad raster header: " + path);
  ImageGray img(static_cast<int>(wh[1]), static_cast<int>(wh[0]));
  std::streamsize bytes = static_cast<std::streamsize>(img.data.size() * sizeof(float));
  f.read(reinterpret_cast<char*>(img.data.data()), bytes);
  if (f.gcount() != bytes) throw IOError("truncated raster data: " + path);
  return img;
}

void write_camera_txt(const std::string& path, const Camera& cam) {
  auto f = open_out(path);
  f.precision(17);
  f << "position " << cam.position.x() << " " << cam.position.y() << " " << cam.position.z()
    << "\n";
  f << "lookat " << cam.look_at.x() << " " << cam.look_at.y() << " " << cam.look_at.z() << "\n";
  f << "up " << cam.up.x() << " " << cam.up.y() << " " << cam.up.z() << "\n";
  f << "fov " << cam.fov_y << "\n";
  f << "near " << cam.near_plane << "\n";
  f << "far " << cam.far_plane << "\n";
  if (!f) throw IOError("short write: " + path);
}

Camera read_camera_txt(const std::string& path) {
  auto f = open_in(path);
  Camera cam;
  std::string key;
  int seen = 0;
  while (f >> key) {
    if (key == "position")
      f >> cam.position.x() >> cam.position.y() >> cam.position.z();
    else if (key == "lookat")
      f >> cam.look_at.x() >> cam.look_at.y() >> cam.look_at.z();
    else if (key == "up")
      f >> cam.up.x() >> cam.up.y() >> cam.up.z();
    else if (key == "fov")
      f >> cam.fov_y;
    else if (key == "near")
      f >> cam.near_plane;
    else if (key == "far")
      f >> cam.far_plane;
    else
      throw IOError("unknown camera field '" + key + "' in " + path);
    if (!f) throw IOError("malformed camera record: " + path);
    ++seen;
  }
  if (seen != 6) throw IOError("incomplete camera record: " + path);
  return cam;
}

Tensor to_tensor(const ImageRGB& img) {
  ArrayX a(static_cast<long>(img.data.size()));
  for (size_t i = 0; i < img.data.size(); ++i) a[static_cast<long>(i)] = img.data[i];
  return Tensor::from({img.h, img.w, 3}, std::move(a));
}

Tensor to_tensor(const ImageGray& img) {
  ArrayX a(static_cast<long>(img.data.size()));
  for (size_t i = 0; i < img.data.size(); ++i) a[static_cast<long>(i)] = img.data[i];
  return Tensor::from({img.h, img.w}, std::move(a));
}

ImageRGB rgb_from_tensor(const Tensor& t, bool quantize_8bit) {
  check_arg(t.rank() == 3 && t.dim(2) == 3, "rgb_from_tensor: expects (H,W,3)");
  ImageRGB img(t.dim(0), t.dim(1));
  for (size_t i = 0; i < img.data.size(); ++i) {
    float v = static_cast<float>(t.value()[static_cast<long>(i)]);
    img.data[i] = quantize_8bit ? static_cast<float>(to_byte(v)) / 255.f : v;
  }
  return img;
}

ImageGray gray_from_tensor(const Tensor& t) {
  check_arg(t.rank() == 2, "gray_from_tensor: expects (H,W)");
  ImageGray img(t.dim(0), t.dim(1));
  for (size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = static_cast<float>(t.value()[static_cast<long>(i)]);
  return img;
}

}  // namespace var3d
