#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "var3d/common.hpp"

namespace var3d {

// Reverse-mode autodiff over flat row-major dense arrays. Tensors are cheap
// handles onto shared graph nodes; ops are free functions that record a
// backward closure when gradients are enabled. backward() runs the tape in
// reverse topological order and frees interior buffers as it goes.

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  Shape shape;
  ArrayX value;
  ArrayX grad;  // lazily allocated
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backward_fn;

  long numel() const { return value.size(); }
  void accumulate(const ArrayX& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

// Scoped switch that disables graph recording (inference / plain numerics).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, ArrayX values, bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<Scalar>& values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar v);
  static Tensor scalar(Scalar v);
  static Tensor randn(Shape shape, RngStream& rng, Scalar stddev = 1.0);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  long numel() const { return node_->numel(); }

  const ArrayX& value() const { return node_->value; }
  ArrayX& raw_value() { return node_->value; }  // leaf mutation (optimizer, tests)
  const ArrayX& grad() const;
  void zero_grad() { node_->grad.resize(0); }

  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  // Runs reverse-mode accumulation from this (scalar) tensor.
  void backward();

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// -- elementwise (numpy-style right-aligned broadcasting) --------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor add_scalar(const Tensor& a, Scalar s);
Tensor mul_scalar(const Tensor& a, Scalar s);
inline Tensor operator+(const Tensor& a, Scalar s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, Scalar s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, Scalar s) { return mul_scalar(a, s); }
inline Tensor operator*(Scalar s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, Scalar s) { return mul_scalar(a, 1.0 / s); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, Scalar slope);

// -- reductions ---------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, int axis, bool keepdim = false);

// -- structure ----------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor transpose(const Tensor& a);  // 2-D
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor concat(const std::vector<Tensor>& ts, int axis);
Tensor detach(const Tensor& a);
// Forwards `forwarded` bit-exactly while backpropagating the incoming gradient
// to `a` unchanged (identity Jacobian).
Tensor straight_through(const Tensor& a, ArrayX forwarded);

// -- linear algebra -------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);          // (N,K)x(K,M)
Tensor matmul_nt(const Tensor& a, const Tensor& b);       // (N,K)x(M,K)^T
Tensor bmm(const Tensor& a, const Tensor& b);             // (B,N,K)x(B,K,M)
Tensor bmm_nt(const Tensor& a, const Tensor& b);          // (B,N,K)x(B,M,K)^T

// -- indexing -------------------------------------------------------------------
Tensor gather_rows(const Tensor& table, const std::vector<int>& idx);       // (V,D) -> (N,D)
Tensor take_per_row(const Tensor& a, const std::vector<int>& idx);          // (N,V) -> (N,)

// -- fused neural ops ------------------------------------------------------------
Tensor softmax_lastdim(const Tensor& a);
Tensor log_softmax_lastdim(const Tensor& a);
Tensor layer_norm_lastdim(const Tensor& a, Scalar eps = 1e-6);
Tensor cumsum_lastdim_exclusive(const Tensor& a);

// conv weight layout (out_ch, in_ch, k, k); input (N, C, H, W).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// transposed conv weight layout (in_ch, out_ch, k, k).
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// half-pixel bilinear resize of (N, C, H, W) to (N, C, out_h, out_w).
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// Triplane gather: planes (3, C, P, P), points (N, 3) in [-1,1]^3 (clamped).
// Feature = sum over the xy/xz/yz plane projections, bilinear, grid nodes at
// the cube boundary (align-corners). Differentiable in planes and points.
Tensor triplane_sample(const Tensor& planes, const Tensor& points);

// -- test support ----------------------------------------------------------------
// Central finite-difference gradient of f at x (perturbs x in place).
ArrayX finite_difference(const std::function<Scalar()>& f, Tensor& x, Scalar eps);

}  // namespace var3d
