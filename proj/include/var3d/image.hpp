#pragma once

#include <string>
#include <vector>

#include "var3d/camera.hpp"
#include "var3d/common.hpp"
#include "var3d/tensor.hpp"

namespace var3d {

// Rasters are stored row-major from the top-left. RGB values live on the 8-bit
// grid (k/255) and depth passes through float32, so disk round trips are exact.
struct ImageRGB {
  int h = 0, w = 0;
  std::vector<float> data;  // h*w*3

  ImageRGB() = default;
  ImageRGB(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 3, 0.f) {}
  float& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

struct ImageGray {
  int h = 0, w = 0;
  std::vector<float> data;  // h*w

  ImageGray() = default;
  ImageGray(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0.f) {}
  float& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
  float at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }
};

struct ViewRGBD {
  ImageRGB rgb;
  ImageGray depth;  // first-hit distance, 0 on miss
  ImageGray mask;   // {0, 1}
  Camera camera;

  void validate() const;  // shape consistency, mask<->depth, finiteness
};

struct MultiViewSample {
  std::vector<ViewRGBD> views;
  std::vector<std::vector<Scalar>> plucker;  // per view, H*W*6
  std::string asset_id;
  std::string caption;

  int height() const { return views.empty() ? 0 : views[0].rgb.h; }
  int width() const { return views.empty() ? 0 : views[0].rgb.w; }
  void validate() const;
};

void write_ppm(const std::string& path, const ImageRGB& img);
ImageRGB read_ppm(const std::string& path);
void write_mask_pgm(const std::string& path, const ImageGray& mask);
ImageGray read_mask_pgm(const std::string& path);
// raw little-endian float32 with a (u32 w, u32 h) header
void write_f32_raster(const std::string& path, const ImageGray& img);
ImageGray read_f32_raster(const std::string& path);
void write_camera_txt(const std::string& path, const Camera& cam);
Camera read_camera_txt(const std::string& path);

// Tensor bridges.
Tensor to_tensor(const ImageRGB& img);   // (H, W, 3)
Tensor to_tensor(const ImageGray& img);  // (H, W)
ImageRGB rgb_from_tensor(const Tensor& t, bool quantize_8bit = false);
ImageGray gray_from_tensor(const Tensor& t);

}  // namespace var3d
