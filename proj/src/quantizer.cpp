#include "var3d/quantizer.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>

namespace var3d {

Codebook::Codebook(ParamStore& ps, const std::string& name, int vocab, int dim, RngStream& rng) {
  check_arg(vocab >= 2, "codebook: vocabulary must hold at least 2 codes");
  embeddings = ps.create_randn(name + ".embeddings", {vocab, dim}, rng,
                               1.0 / std::sqrt(static_cast<Scalar>(dim)));
  usage.assign(static_cast<size_t>(vocab), 0);
  stale.assign(static_cast<size_t>(vocab), 0);
  used_this_step.assign(static_cast<size_t>(vocab), false);
}

void Codebook::reset_usage() { usage.assign(usage.size(), 0); }

void Codebook::end_step() {
  for (size_t v = 0; v < stale.size(); ++v) {
    stale[v] = used_this_step[v] ? 0 : stale[v] + 1;
    used_this_step[v] = false;
  }
}

uint64_t Codebook::content_hash() const {
  return fnv1a64(embeddings.value().data(),
                 sizeof(Scalar) * static_cast<size_t>(embeddings.numel()));
}

long ScaleSchedule::total_tokens() const {
  long n = 0;
  for (int ri : r) n += 3L * ri * ri;
  return n;
}

void ScaleSchedule::validate(int latent_res) const {
  check_arg(!r.empty(), "schedule: empty");
  check_arg(r.front() >= 1, "schedule: r_1 must be >= 1");
  for (size_t i = 1; i < r.size(); ++i)
    check_arg(r[i] > r[i - 1], "schedule: scales must be strictly increasing");
  check_arg(r.back() == latent_res, "schedule: final scale must equal the latent resolution");
}

void TokenPyramid::validate(int vocab) const {
  check_arg(indices.size() == schedule.r.size(), "pyramid: scale count mismatch");
  for (size_t i = 0; i < indices.size(); ++i) {
    long want = 3L * schedule.r[i] * schedule.r[i];
    check_arg(static_cast<long>(indices[i].size()) == want, "pyramid: index map size mismatch");
    for (int v : indices[i]) check_arg(v >= 0 && v < vocab, "pyramid: index out of vocabulary");
  }
}

std::vector<int> nearest_code(const MatrixX& vectors, Codebook& cb) {
  if (!cb.embeddings.defined() || cb.vocab() == 0)
    throw StateError("nearest_code: empty codebook");
  check_arg(vectors.cols() == cb.dim(), "nearest_code: vector dimension mismatch");
  const long N = vectors.rows(), V = cb.vocab();
  Eigen::Map<const MatrixX> Z(cb.embeddings.value().data(), V, cb.dim());
  MatrixX gram = vectors * Z.transpose();           // (N, V)
  VectorX z2 = Z.rowwise().squaredNorm();           // (V)
  std::vector<int> out(static_cast<size_t>(N));
  for (long n = 0; n < N; ++n) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    int arg = 0;
    for (long v = 0; v < V; ++v) {
      Scalar d = z2[v] - 2.0 * gram(n, v);
      if (d < best) {
        best = d;
        arg = static_cast<int>(v);
      }
    }
    out[static_cast<size_t>(n)] = arg;
    cb.usage[static_cast<size_t>(arg)]++;
    cb.used_this_step[static_cast<size_t>(arg)] = true;
  }
  return out;
}

namespace {

// (3, d, r, r) -> (3*r*r, d), plane-major with raster order inside each plane
Tensor to_code_vectors(const Tensor& maps) {
  int d = maps.dim(1), r = maps.dim(2);
  return reshape(permute(maps, {0, 2, 3, 1}), {3 * r * r, d});
}

Tensor to_plane_maps(const Tensor& vectors, int r, int d) {
  return permute(reshape(vectors, {3, r, r, d}), {0, 3, 1, 2});
}

}  // namespace

QuantizeResult quantize_multiscale(const Tensor& f, const ScaleSchedule& schedule, Codebook& cb) {
  check_arg(f.rank() == 4 && f.dim(0) == 3, "quantize: latent must be (3, d_q, h, w)");
  check_arg(f.dim(2) == f.dim(3), "quantize: latent must be square");
  check_arg(f.dim(1) == cb.dim(), "quantize: latent channels mismatch codebook dim");
  schedule.validate(f.dim(2));
  const int h = f.dim(2);
  const int dq = f.dim(1);

  QuantizeResult res;
  res.tokens.schedule = schedule;
  ArrayX accum;  // running value of the reconstruction
  for (size_t si = 0; si < schedule.r.size(); ++si) {
    int r = schedule.r[si];
    Tensor resid_g =
        accum.size() ? f - Tensor::from(f.shape(), ArrayX(accum)) : reshape(f, f.shape());
    Tensor f_i = bilinear_resize(resid_g, r, r);
    Tensor vecs = to_code_vectors(f_i);  // graph to f

    Eigen::Map<const MatrixX> vm(vecs.value().data(), 3L * r * r, dq);
    std::vector<int> idx = nearest_code(MatrixX(vm), cb);
    res.tokens.indices.push_back(idx);

    Tensor z = gather_rows(cb.embeddings, idx);  // graph to the codebook
    res.scale_pairs.emplace_back(vecs, z);

    NoGradGuard off;
    Tensor up = bilinear_resize(to_plane_maps(detach(z), r, dq), h, h);
    if (accum.size())
      accum += up.value();
    else
      accum = up.value();
  }
  res.final_residual = f.value() - accum;
  res.fhat = straight_through(f, std::move(accum));
  return res;
}

Tensor dequantize(const TokenPyramid& pyramid, const Codebook& cb) {
  return dequantize_prefix(pyramid, cb, pyramid.schedule.scales());
}

Tensor dequantize_prefix(const TokenPyramid& pyramid, const Codebook& cb, int upto) {
  check_arg(upto >= 1 && upto <= pyramid.schedule.scales(), "dequantize: bad scale count");
  pyramid.validate(cb.vocab());
  const int h = pyramid.schedule.final_res();
  const int dq = cb.dim();
  Tensor accum;
  for (int si = 0; si < upto; ++si) {
    int r = pyramid.schedule.r[static_cast<size_t>(si)];
    Tensor z = gather_rows(cb.embeddings, pyramid.indices[static_cast<size_t>(si)]);
    Tensor up = bilinear_resize(to_plane_maps(z, r, dq), h, h);
    accum = accum.defined() ? accum + up : up;
  }
  return accum;
}

Tensor vq_loss(const std::vector<std::pair<Tensor, Tensor>>& scale_pairs, Scalar beta) {
  check_arg(!scale_pairs.empty(), "vq_loss: no scales");
  Tensor total;
  for (const auto& [f_r, z_q] : scale_pairs) {
    check_arg(f_r.shape() == z_q.shape(), "vq_loss: mismatched shapes");
    Tensor codebook_term = mean(square(z_q - detach(f_r)));
    Tensor commit_term = mean(square(f_r - detach(z_q)));
    Tensor term = codebook_term + beta * commit_term;
    total = total.defined() ? total + term : term;
  }
  return total;
}

std::vector<int> serialize_tokens(const TokenPyramid& pyramid) {
  std::vector<int> seq;
  seq.reserve(static_cast<size_t>(pyramid.schedule.total_tokens()));
  for (size_t si = 0; si < pyramid.indices.size(); ++si) {
    int r = pyramid.schedule.r[si];
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x)
        for (int q = 0; q < 3; ++q)
          seq.push_back(pyramid.indices[si][(static_cast<size_t>(q) * r + y) * r + x]);
  }
  return seq;
}

TokenPyramid deserialize_tokens(const std::vector<int>& sequence, const ScaleSchedule& schedule) {
  check_arg(static_cast<long>(sequence.size()) == schedule.total_tokens(),
            "deserialize: sequence length must equal 3*sum(r_i^2)");
  TokenPyramid p;
  p.schedule = schedule;
  size_t pos = 0;
  for (int r : schedule.r) {
    std::vector<int> map(static_cast<size_t>(3L * r * r));
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x)
        for (int q = 0; q < 3; ++q)
          map[(static_cast<size_t>(q) * r + y) * r + x] = sequence[pos++];
    p.indices.push_back(std::move(map));
  }
  return p;
}

CodebookHealth codebook_health(const Codebook& cb) {
  CodebookHealth h;
  int64_t total = 0;
  long used = 0;
  for (int64_t u : cb.usage) {
    total += u;
    if (u > 0) ++used;
  }
  if (total == 0) throw StateError("codebook_health: usage counts not populated");
  h.utilization = static_cast<Scalar>(used) / static_cast<Scalar>(cb.usage.size());
  Scalar entropy = 0;
  for (int64_t u : cb.usage) {
    if (u == 0) continue;
    Scalar p = static_cast<Scalar>(u) / static_cast<Scalar>(total);
    entropy -= p * std::log(p);
  }
  h.perplexity = std::exp(entropy);
  return h;
}

int revive_dead_codes(Codebook& cb, const MatrixX& recent_vectors, int64_t threshold,
                      uint64_t seed) {
  check_arg(recent_vectors.rows() >= 1, "revive_dead_codes: no recent vectors");
  check_arg(recent_vectors.cols() == cb.dim(), "revive_dead_codes: dimension mismatch");
  RngStream rng(mix_seed(seed, "revive"));
  int revived = 0;
  ArrayX& emb = cb.embeddings.raw_value();
  const int dq = cb.dim();
  for (long v = 0; v < cb.vocab(); ++v) {
    if (cb.stale[static_cast<size_t>(v)] < threshold) continue;
    long pick = rng.uniform_int(0, static_cast<int>(recent_vectors.rows()) - 1);
    for (int c = 0; c < dq; ++c)
      emb[v * dq + c] = recent_vectors(pick, c) + 0.01 * rng.normal();
    cb.stale[static_cast<size_t>(v)] = 0;
    ++revived;
  }
  return revived;
}

void write_token_dump(const std::string& path, const TokenPyramid& pyramid) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open for writing: " + path);
  auto put = [&f](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  put(static_cast<uint32_t>(pyramid.schedule.r.size()));
  for (int r : pyramid.schedule.r) put(static_cast<uint32_t>(r));
  for (int v : serialize_tokens(pyramid)) put(static_cast<uint32_t>(v));
  if (!f) throw IOError("short write: " + path);
}

TokenPyramid read_token_dump(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open for reading: " + path);
  auto get = [&f, &path]() {
    uint32_t v;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (f.gcount() != 4) throw IOError("truncated token dump: " + path);
    return v;
  };
  ScaleSchedule schedule;
  uint32_t k = get();
  if (k == 0 || k > 64) throw IOError("bad token dump header: " + path);
  for (uint32_t i = 0; i < k; ++i) schedule.r.push_back(static_cast<int>(get()));
  std::vector<int> seq(static_cast<size_t>(schedule.total_tokens()));
  for (auto& v : seq) v = static_cast<int>(get());
  return deserialize_tokens(seq, schedule);
}

}  // namespace var3d
