#include "var3d/renderer.hpp"

#include <cstdint>
#include <fstream>

namespace var3d {

PointDecoder::PointDecoder(ParamStore& ps, const std::string& name, int features, int hidden,
                           RngStream& rng)
    : feature_dim(features) {
  fc = Linear(ps, name + ".fc", features, hidden, rng);
  density_head = Linear(ps, name + ".density", hidden, 1, rng, true, 0.0);
  rgb_head = Linear(ps, name + ".rgb", hidden, 3, rng, true, 0.0);
}

std::pair<Tensor, Tensor> PointDecoder::decode(const Tensor& features) const {
  check_arg(features.rank() == 2 && features.dim(1) == feature_dim,
            "decode_point: feature width mismatch");
  Tensor h = silu(fc.forward(features));
  Tensor density = softplus(reshape(density_head.forward(h), {features.dim(0)}));
  Tensor rgb = sigmoid(rgb_head.forward(h));
  return {density, rgb};
}

Tensor sample_triplane(const TriplaneField& field, const Tensor& points) {
  return triplane_sample(field.planes, points);
}

RenderedView volume_render(const TriplaneField& field, const Camera& camera, int height,
                           int width, const RenderConfig& cfg) {
  cfg.validate();
  camera.validate();
  check_arg(field.decoder != nullptr, "volume_render: field has no point decoder");
  const long n_pix = static_cast<long>(height) * width;
  const int S = cfg.steps;
  const Scalar delta = (cfg.far_plane - cfg.near_plane) / static_cast<Scalar>(S);

  // sample positions and distances (constants w.r.t. the graph)
  ArrayX pts(n_pix * S * 3);
  ArrayX ts(n_pix * S);
  RngStream jrng(mix_seed(cfg.jitter_seed, "render.jitter"));
  long k = 0;
  for (int iy = 0; iy < height; ++iy)
    for (int ix = 0; ix < width; ++ix) {
      Vec3 d = camera.ray_direction(ix, iy, width, height);
      for (int j = 0; j < S; ++j) {
        Scalar u = cfg.jitter ? jrng.uniform() : 0.5;
        Scalar t = cfg.near_plane + (static_cast<Scalar>(j) + u) * delta;
        Vec3 p = camera.position + t * d;
        ts[k] = t;
        pts[k * 3 + 0] = p.x();
        pts[k * 3 + 1] = p.y();
        pts[k * 3 + 2] = p.z();
        ++k;
      }
    }

  Tensor points = Tensor::from({static_cast<int>(n_pix * S), 3}, std::move(pts));
  Tensor feats = sample_triplane(field, points);
  auto [density, rgb] = field.decoder->decode(feats);

  Tensor sigma_delta = reshape(density * delta, {static_cast<int>(n_pix), S});
  Tensor accumulated = cumsum_lastdim_exclusive(sigma_delta);
  Tensor transmittance = exp(-accumulated);
  Tensor alpha = -exp(-sigma_delta) + 1.0;
  Tensor weights = transmittance * alpha;  // (n_pix, S)

  Tensor rgb_samples = reshape(rgb, {static_cast<int>(n_pix), S, 3});
  Tensor w3 = reshape(weights, {static_cast<int>(n_pix), S, 1});
  Tensor rgb_fg = sum_axis(w3 * rgb_samples, 1);  // (n_pix, 3)

  Tensor t_final = exp(-sum_axis(sigma_delta, 1));  // (n_pix)
  ArrayX bg(3);
  bg << cfg.background.x(), cfg.background.y(), cfg.background.z();
  Tensor rgb_out = rgb_fg + reshape(t_final, {static_cast<int>(n_pix), 1}) * Tensor::from({3}, bg);

  Tensor t_vals = Tensor::from({static_cast<int>(n_pix), S}, std::move(ts));
  Tensor depth = sum_axis(weights * t_vals, 1);

  RenderedView out;
  out.rgb = reshape(rgb_out, {height, width, 3});
  out.depth = reshape(depth, {height, width});
  out.mask = reshape(-t_final + 1.0, {height, width});
  return out;
}

void write_field_dump(const std::string& path, const TriplaneField& field) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open for writing: " + path);
  uint32_t header[2] = {static_cast<uint32_t>(field.resolution()),
                        static_cast<uint32_t>(field.channels())};
  f.write(reinterpret_cast<const char*>(header), sizeof(header));
  const ArrayX& v = field.planes.value();
  std::vector<float> buf(static_cast<size_t>(v.size()));
  for (long i = 0; i < v.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(v[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw IOError("short write: " + path);
}

Tensor read_field_dump(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open for reading: " + path);
  uint32_t header[2];
  f.read(reinterpret_cast<char*>(header), sizeof(header));
  if (f.gcount() != sizeof(header)) throw IOError("truncated field dump: " + path);
  long P = header[0], C = header[1];
  if (P == 0 || C == 0 || P > 4096 || C > 4096) throw IOError("bad field dump header: " + path);
  std::vector<float> buf(static_cast<size_t>(3 * C * P * P));
  std::streamsize bytes = static_cast<std::streamsize>(buf.size() * sizeof(float));
  f.read(reinterpret_cast<char*>(buf.data()), bytes);
  if (f.gcount() != bytes) throw IOError("truncated field dump: " + path);
  ArrayX v(static_cast<long>(buf.size()));
  for (size_t i = 0; i < buf.size(); ++i) v[static_cast<long>(i)] = buf[i];
  return Tensor::from({3, static_cast<int>(C), static_cast<int>(P), static_cast<int>(P)},
                      std::move(v));
}

}  // namespace var3d
