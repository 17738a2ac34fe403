#include <doctest.h>

#include <cmath>

#include "var3d/tensor.hpp"

using namespace var3d;

namespace {

// max |analytic - fd| / max(1, |fd|) over all entries
Scalar check_grad(const std::function<Tensor()>& loss_fn, Tensor& x, Scalar eps = 1e-5) {
  x.zero_grad();
  Tensor loss = loss_fn();
  loss.backward();
  ArrayX analytic = x.grad();
  REQUIRE(analytic.size() == x.numel());
  ArrayX fd = finite_difference([&] { return loss_fn().item(); }, x, eps);
  Scalar worst = 0;
  for (long i = 0; i < fd.size(); ++i) {
    Scalar denom = std::max(1.0, std::abs(fd[i]));
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

Tensor leaf(Shape shape, uint64_t seed, Scalar scale = 1.0) {
  RngStream rng(seed);
  Tensor t = Tensor::randn(std::move(shape), rng, scale);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("binary ops, same shape and broadcast") {
  Tensor a = leaf({2, 3, 4}, 1);
  Tensor b = leaf({2, 3, 4}, 2);
  CHECK(check_grad([&] { return sum(a * b + a / (b * b + 3.0)); }, a) < 1e-7);
  CHECK(check_grad([&] { return sum(a * b + a / (b * b + 3.0)); }, b) < 1e-7);

  Tensor c = leaf({4}, 3);      // broadcast over leading dims
  Tensor d = leaf({3, 1}, 4);   // broadcast inner dim
  CHECK(check_grad([&] { return sum(a * c + d); }, c) < 1e-7);
  CHECK(check_grad([&] { return sum((a + d) * (a + d)); }, d) < 1e-7);

  ArrayX v = (a.value() * c.value().replicate(6, 1)).matrix();
  Tensor prod = a * c;
  for (long i = 0; i < 6; ++i)
    for (long j = 0; j < 4; ++j)
      CHECK(prod.value()[i * 4 + j] == doctest::Approx(a.value()[i * 4 + j] * c.value()[j]));
}

TEST_CASE("unary ops") {
  Tensor x = leaf({17}, 7, 0.8);
  CHECK(check_grad([&] { return sum(exp(x)); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(log(x * x + 1.1)); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(sqrt(x * x + 0.5)); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(sigmoid(x)); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(softplus(x)); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(silu(x)); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(square(x)); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(leaky_relu(x, 0.2)); }, x) < 1e-6);
}

TEST_CASE("reductions and structure") {
  Tensor x = leaf({3, 4, 5}, 11);
  CHECK(check_grad([&] { return mean(square(sum_axis(x, 1))); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(square(mean_axis(x, 2, true) + x)); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(square(reshape(x, {12, 5}))); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(square(permute(x, {2, 0, 1}))); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(square(slice(x, 1, 1, 2))); }, x) < 1e-7);
  CHECK(check_grad([&] { return sum(square(concat({x, x * 2.0}, 1))); }, x) < 1e-7);

  // permute round trip
  Tensor p = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  CHECK((p.value() - x.value()).abs().maxCoeff() == 0.0);
}

TEST_CASE("matmul family") {
  Tensor a = leaf({4, 6}, 21);
  Tensor b = leaf({6, 3}, 22);
  CHECK(check_grad([&] { return sum(square(matmul(a, b))); }, a) < 1e-6);
  CHECK(check_grad([&] { return sum(square(matmul(a, b))); }, b) < 1e-6);

  Tensor bt = leaf({3, 6}, 23);
  CHECK(check_grad([&] { return sum(square(matmul_nt(a, bt))); }, bt) < 1e-6);
  // matmul_nt(a, b^T) == matmul(a, b)
  Tensor m1 = matmul_nt(a, transpose(b));
  Tensor m2 = matmul(a, b);
  CHECK((m1.value() - m2.value()).abs().maxCoeff() < 1e-12);

  Tensor ba = leaf({2, 3, 4}, 24);
  Tensor bb = leaf({2, 4, 5}, 25);
  CHECK(check_grad([&] { return sum(square(bmm(ba, bb))); }, ba) < 1e-6);
  CHECK(check_grad([&] { return sum(square(bmm(ba, bb))); }, bb) < 1e-6);
  Tensor bc = leaf({2, 5, 4}, 26);
  CHECK(check_grad([&] { return sum(square(bmm_nt(ba, bc))); }, bc) < 1e-6);
}

TEST_CASE("indexing") {
  Tensor table = leaf({5, 3}, 31);
  std::vector<int> idx{4, 0, 0, 2};
  CHECK(check_grad([&] { return sum(square(gather_rows(table, idx))); }, table) < 1e-7);

  Tensor logits = leaf({4, 6}, 32);
  std::vector<int> tgt{1, 5, 0, 3};
  CHECK(check_grad([&] { return sum(square(take_per_row(logits, tgt))); }, logits) < 1e-7);
}

TEST_CASE("fused ops") {
  Tensor x = leaf({3, 7}, 41);
  CHECK(check_grad([&] { return sum(square(softmax_lastdim(x * 3.0))); }, x) < 1e-6);
  CHECK(check_grad([&] { return sum(square(log_softmax_lastdim(x))); }, x) < 1e-6);
  CHECK(check_grad([&] { return sum(square(layer_norm_lastdim(x))); }, x) < 1e-6);
  CHECK(check_grad([&] { return sum(square(cumsum_lastdim_exclusive(x))); }, x) < 1e-7);

  // softmax rows sum to one
  Tensor y = softmax_lastdim(x);
  for (int r = 0; r < 3; ++r)
    CHECK(y.value().segment(r * 7, 7).sum() == doctest::Approx(1.0));

  // exclusive cumsum starts at zero
  Tensor cs = cumsum_lastdim_exclusive(x);
  CHECK(cs.value()[0] == 0.0);
  CHECK(cs.value()[7] == 0.0);
}

TEST_CASE("conv2d matches direct computation and gradients") {
  Tensor x = leaf({2, 3, 5, 5}, 51);
  Tensor w = leaf({4, 3, 3, 3}, 52, 0.5);
  Tensor b = leaf({4}, 53);
  CHECK(check_grad([&] { return sum(square(conv2d(x, w, b, 1, 1))); }, x, 1e-5) < 1e-5);
  CHECK(check_grad([&] { return sum(square(conv2d(x, w, b, 2, 1))); }, w, 1e-5) < 1e-5);
  CHECK(check_grad([&] { return sum(square(conv2d(x, w, b, 2, 1))); }, b, 1e-5) < 1e-5);

  // 1x1 identity kernel copies the input channel
  Tensor x1 = leaf({1, 1, 4, 4}, 54);
  Tensor w1 = Tensor::from({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x1, w1, Tensor(), 1, 0);
  CHECK((y.value() - x1.value()).abs().maxCoeff() == 0.0);
}

TEST_CASE("conv_transpose2d shape and gradients") {
  Tensor x = leaf({2, 3, 4, 4}, 61);
  Tensor w = leaf({3, 5, 4, 4}, 62, 0.3);
  Tensor b = leaf({5}, 63);
  Tensor y = conv_transpose2d(x, w, b, 2, 1);
  CHECK(y.shape() == Shape{2, 5, 8, 8});
  CHECK(check_grad([&] { return sum(square(conv_transpose2d(x, w, b, 2, 1))); }, x, 1e-5) < 1e-5);
  CHECK(check_grad([&] { return sum(square(conv_transpose2d(x, w, b, 2, 1))); }, w, 1e-5) < 1e-5);

  // conv_transpose is the adjoint of conv: <conv(x), y> == <x, convT(y)>
  Tensor cx = leaf({1, 2, 6, 6}, 64);
  Tensor cw = leaf({3, 2, 4, 4}, 65);
  Tensor cy = leaf({1, 3, 3, 3}, 66);
  // conv weight (O,C,K,K) is read as (I,O,K,K) on the transpose side
  Tensor lhs = sum(conv2d(cx, cw, Tensor(), 2, 1) * cy);
  Tensor rhs = sum(cx * conv_transpose2d(cy, cw, Tensor(), 2, 1));
  CHECK(lhs.item() == doctest::Approx(rhs.item()).epsilon(1e-10));
}

TEST_CASE("bilinear_resize") {
  Tensor x = leaf({1, 2, 4, 4}, 71);
  CHECK(check_grad([&] { return sum(square(bilinear_resize(x, 7, 7))); }, x) < 1e-6);
  CHECK(check_grad([&] { return sum(square(bilinear_resize(x, 2, 2))); }, x) < 1e-6);
  CHECK(check_grad([&] { return sum(square(bilinear_resize(x, 1, 1))); }, x) < 1e-6);

  // constants are preserved at any size
  Tensor c = Tensor::full({1, 1, 3, 5}, 2.5);
  for (int s : {1, 2, 4, 9}) {
    Tensor r = bilinear_resize(c, s, s);
    CHECK((r.value() - 2.5).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("triplane_sample") {
  Tensor planes = leaf({3, 4, 5, 5}, 81);
  RngStream rng(82);
  ArrayX pts(6 * 3);
  for (long i = 0; i < pts.size(); ++i) pts[i] = rng.uniform(-0.95, 0.95);
  Tensor points = Tensor::from({6, 3}, pts);
  CHECK(check_grad([&] { return sum(square(triplane_sample(planes, points))); }, planes) < 1e-6);

  Tensor points_g = Tensor::from({6, 3}, pts, true);
  CHECK(check_grad([&] { return sum(square(triplane_sample(planes, points_g))); }, points_g, 1e-6) <
        1e-5);

  // zero planes give zero features
  Tensor zp = Tensor::zeros({3, 4, 5, 5});
  CHECK(triplane_sample(zp, points).value().abs().maxCoeff() == 0.0);
}

TEST_CASE("detach blocks gradient, diamond accumulates") {
  Tensor x = leaf({3}, 91);
  Tensor loss = sum(x * detach(x * 2.0));
  loss.backward();
  for (int i = 0; i < 3; ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 * x.value()[i]));

  Tensor y = leaf({3}, 92);
  Tensor l2 = sum(y * y);  // same node used twice
  l2.backward();
  for (int i = 0; i < 3; ++i)
    CHECK(y.grad()[i] == doctest::Approx(2.0 * y.value()[i]));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = leaf({3}, 93);
  NoGradGuard off;
  Tensor y = sum(x * x);
  CHECK_FALSE(y.requires_grad());
}
