#include "var3d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace var3d {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Map<MatrixX>;
using ConstRowMat = Eigen::Map<const MatrixX>;

RowMat as_matrix(ArrayX& a, long rows, long cols) { return RowMat(a.data(), rows, cols); }
ConstRowMat as_matrix(const ArrayX& a, long rows, long cols) {
  return ConstRowMat(a.data(), rows, cols);
}

Tensor make(Shape shape, ArrayX value, std::vector<NodePtr> parents,
            std::function<void(TensorNode&)> bw) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  if (g_grad_enabled)
    for (const auto& p : parents)
      if (p && p->requires_grad) rg = true;
  if (rg) {
    n->requires_grad = true;
    n->is_leaf = false;
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return Tensor(n);
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::from(Shape shape, ArrayX values, bool requires_grad) {
  check_arg(var3d::numel(shape) == values.size(), "Tensor::from: shape/value size mismatch");
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from(Shape shape, const std::vector<Scalar>& values) {
  ArrayX a(values.size());
  for (size_t i = 0; i < values.size(); ++i) a[static_cast<long>(i)] = values[i];
  return from(std::move(shape), std::move(a));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from(std::move(shape), ArrayX::Zero(var3d::numel(shape)), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar v) {
  return from(std::move(shape), ArrayX::Constant(var3d::numel(shape), v));
}

Tensor Tensor::scalar(Scalar v) { return full({1}, v); }

Tensor Tensor::randn(Shape shape, RngStream& rng, Scalar stddev) {
  ArrayX a(var3d::numel(shape));
  for (long i = 0; i < a.size(); ++i) a[i] = rng.normal() * stddev;
  return from(std::move(shape), std::move(a));
}

const ArrayX& Tensor::grad() const {
  static const ArrayX empty;
  return node_->grad.size() ? node_->grad : empty;
}

Scalar Tensor::item() const {
  check_arg(numel() == 1, "item(): tensor is not scalar");
  return node_->value[0];
}

void Tensor::backward() {
  check_arg(numel() == 1, "backward(): root must be scalar");
  if (!node_->requires_grad) return;

  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      TensorNode* p = n->parents[i++].get();
      if (p && p->requires_grad && !p->is_leaf && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad = ArrayX::Ones(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->grad.size() == 0 || !n->backward_fn) continue;
    n->backward_fn(*n);
    // Interior buffers are dead once this node's pullback has run.
    if (n != node_.get()) n->value.resize(0);
    n->grad.resize(0);
  }
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

namespace {

struct BcastPlan {
  Shape out;
  long n = 0;
  std::vector<long> dims;       // out dims
  std::vector<long> stride_a;   // per-axis flat strides (0 where broadcast)
  std::vector<long> stride_b;
};

BcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  BcastPlan p;
  p.out.resize(rank);
  p.dims.resize(rank);
  p.stride_a.assign(rank, 0);
  p.stride_b.assign(rank, 0);
  // natural strides, right-aligned
  std::vector<long> sa(rank, 0), sb(rank, 0), da(rank, 1), db(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    da[i] = (i + a.size() >= rank) ? a[i + a.size() - rank] : 1;
    db[i] = (i + b.size() >= rank) ? b[i + b.size() - rank] : 1;
  }
  long acc = 1;
  for (size_t i = rank; i-- > 0;) {
    sa[i] = acc;
    acc *= da[i];
  }
  acc = 1;
  for (size_t i = rank; i-- > 0;) {
    sb[i] = acc;
    acc *= db[i];
  }
  p.n = 1;
  for (size_t i = 0; i < rank; ++i) {
    long d;
    if (da[i] == db[i])
      d = da[i];
    else if (da[i] == 1)
      d = db[i];
    else if (db[i] == 1)
      d = da[i];
    else
      throw ArgumentError("broadcast: incompatible shapes");
    p.out[i] = static_cast<int>(d);
    p.dims[i] = d;
    p.stride_a[i] = (da[i] == 1 && d != 1) ? 0 : sa[i];
    p.stride_b[i] = (db[i] == 1 && d != 1) ? 0 : sb[i];
    p.n *= d;
  }
  return p;
}

template <class F>
void bcast_loop(const BcastPlan& p, F&& body) {
  size_t rank = p.dims.size();
  std::vector<long> idx(rank, 0);
  long oa = 0, ob = 0;
  for (long i = 0; i < p.n; ++i) {
    body(i, oa, ob);
    for (size_t ax = rank; ax-- > 0;) {
      if (++idx[ax] < p.dims[ax]) {
        oa += p.stride_a[ax];
        ob += p.stride_b[ax];
        break;
      }
      idx[ax] = 0;
      oa -= p.stride_a[ax] * (p.dims[ax] - 1);
      ob -= p.stride_b[ax] * (p.dims[ax] - 1);
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op) {
  const ArrayX& av = a.value();
  const ArrayX& bv = b.value();
  if (a.shape() == b.shape()) {
    ArrayX out;
    switch (op) {
      case BinOp::Add: out = av + bv; break;
      case BinOp::Sub: out = av - bv; break;
      case BinOp::Mul: out = av * bv; break;
      case BinOp::Div: out = av / bv; break;
    }
    return make(a.shape(), std::move(out), {a.node(), b.node()}, [op](TensorNode& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      const ArrayX& g = self.grad;
      switch (op) {
        case BinOp::Add:
          if (pa->requires_grad) pa->accumulate(g);
          if (pb->requires_grad) pb->accumulate(g);
          break;
        case BinOp::Sub:
          if (pa->requires_grad) pa->accumulate(g);
          if (pb->requires_grad) pb->accumulate(ArrayX(-g));
          break;
        case BinOp::Mul:
          if (pa->requires_grad) pa->accumulate(ArrayX(g * pb->value));
          if (pb->requires_grad) pb->accumulate(ArrayX(g * pa->value));
          break;
        case BinOp::Div:
          if (pa->requires_grad) pa->accumulate(ArrayX(g / pb->value));
          if (pb->requires_grad)
            pb->accumulate(ArrayX(-g * pa->value / (pb->value * pb->value)));
          break;
      }
    });
  }

  BcastPlan plan = broadcast_plan(a.shape(), b.shape());
  ArrayX out(plan.n);
  const Scalar* pa = av.data();
  const Scalar* pb = bv.data();
  Scalar* po = out.data();
  switch (op) {
    case BinOp::Add:
      bcast_loop(plan, [&](long i, long oa, long ob) { po[i] = pa[oa] + pb[ob]; });
      break;
    case BinOp::Sub:
      bcast_loop(plan, [&](long i, long oa, long ob) { po[i] = pa[oa] - pb[ob]; });
      break;
    case BinOp::Mul:
      bcast_loop(plan, [&](long i, long oa, long ob) { po[i] = pa[oa] * pb[ob]; });
      break;
    case BinOp::Div:
      bcast_loop(plan, [&](long i, long oa, long ob) { po[i] = pa[oa] / pb[ob]; });
      break;
  }
  return make(plan.out, std::move(out), {a.node(), b.node()}, [op, plan](TensorNode& self) {
    auto& na = self.parents[0];
    auto& nb = self.parents[1];
    const Scalar* g = self.grad.data();
    ArrayX ga, gb;
    if (na->requires_grad) ga = ArrayX::Zero(na->value.size());
    if (nb->requires_grad) gb = ArrayX::Zero(nb->value.size());
    const Scalar* pa = na->value.data();
    const Scalar* pb = nb->value.data();
    bcast_loop(plan, [&](long i, long oa, long ob) {
      switch (op) {
        case BinOp::Add:
          if (ga.size()) ga[oa] += g[i];
          if (gb.size()) gb[ob] += g[i];
          break;
        case BinOp::Sub:
          if (ga.size()) ga[oa] += g[i];
          if (gb.size()) gb[ob] -= g[i];
          break;
        case BinOp::Mul:
          if (ga.size()) ga[oa] += g[i] * pb[ob];
          if (gb.size()) gb[ob] += g[i] * pa[oa];
          break;
        case BinOp::Div:
          if (ga.size()) ga[oa] += g[i] / pb[ob];
          if (gb.size()) gb[ob] -= g[i] * pa[oa] / (pb[ob] * pb[ob]);
          break;
      }
    });
    if (ga.size()) na->accumulate(ga);
    if (gb.size()) nb->accumulate(gb);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Div); }

Tensor add_scalar(const Tensor& a, Scalar s) {
  return make(a.shape(), ArrayX(a.value() + s), {a.node()}, [](TensorNode& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
  });
}

Tensor mul_scalar(const Tensor& a, Scalar s) {
  return make(a.shape(), ArrayX(a.value() * s), {a.node()}, [s](TensorNode& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(ArrayX(self.grad * s));
  });
}

// ---------------------------------------------------------------------------
// unary elementwise
// ---------------------------------------------------------------------------

namespace {

// der receives (x, y) and returns dy/dx; NeedsOutput controls whether the
// forward result must be captured for the pullback.
template <bool NeedsOutput = false, class FwdF, class DerF>
Tensor unary_op(const Tensor& a, FwdF&& fwd, DerF&& der) {
  ArrayX out(a.numel());
  const ArrayX& x = a.value();
  for (long i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  ArrayX saved;
  if constexpr (NeedsOutput) saved = out;
  return make(a.shape(), std::move(out), {a.node()},
              [der, saved = std::move(saved)](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                ArrayX g(self.grad.size());
                const ArrayX& x = p->value;
                for (long i = 0; i < g.size(); ++i)
                  g[i] = self.grad[i] * der(x[i], NeedsOutput ? saved[i] : 0.0);
                p->accumulate(g);
              });
}

Scalar sigmoid_s(Scalar x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

Tensor exp(const Tensor& a) {
  return unary_op<true>(a, [](Scalar x) { return std::exp(x); },
                        [](Scalar, Scalar y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](Scalar x) { return std::log(x); },
                  [](Scalar x, Scalar) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op<true>(a, [](Scalar x) { return std::sqrt(x); },
                        [](Scalar, Scalar y) { return 0.5 / y; });
}

Tensor abs(const Tensor& a) {
  return unary_op(a, [](Scalar x) { return std::abs(x); },
                  [](Scalar x, Scalar) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary_op(a, [](Scalar x) { return x * x; }, [](Scalar x, Scalar) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op<true>(a, [](Scalar x) { return sigmoid_s(x); },
                        [](Scalar, Scalar y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_op(a, [](Scalar x) { return x > 30 ? x : std::log1p(std::exp(x)); },
                  [](Scalar x, Scalar) { return sigmoid_s(x); });
}

Tensor silu(const Tensor& a) {
  return unary_op(a, [](Scalar x) { return x * sigmoid_s(x); },
                  [](Scalar x, Scalar) {
                    Scalar s = sigmoid_s(x);
                    return s * (1.0 + x * (1.0 - s));
                  });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](Scalar x) { return x > 0 ? x : 0.0; },
                  [](Scalar x, Scalar) { return x > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, Scalar slope) {
  return unary_op(a, [slope](Scalar x) { return x > 0 ? x : slope * x; },
                  [slope](Scalar x, Scalar) { return x > 0 ? 1.0 : slope; });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  ArrayX out(1);
  out[0] = a.value().sum();
  return make({1}, std::move(out), {a.node()}, [](TensorNode& self) {
    auto& p = self.parents[0];
    if (p->requires_grad)
      p->accumulate(ArrayX::Constant(p->value.size(), self.grad[0]));
  });
}

Tensor mean(const Tensor& a) {
  long n = a.numel();
  ArrayX out(1);
  out[0] = a.value().sum() / static_cast<Scalar>(n);
  return make({1}, std::move(out), {a.node()}, [n](TensorNode& self) {
    auto& p = self.parents[0];
    if (p->requires_grad)
      p->accumulate(ArrayX::Constant(p->value.size(), self.grad[0] / static_cast<Scalar>(n)));
  });
}

namespace {

// Collapses shape around `axis` into (outer, d, inner).
void axis_split(const Shape& s, int axis, long& outer, long& d, long& inner) {
  check_arg(axis >= 0 && axis < static_cast<int>(s.size()), "axis out of range");
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  d = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Tensor sum_axis(const Tensor& a, int axis, bool keepdim) {
  long outer, d, inner;
  axis_split(a.shape(), axis, outer, d, inner);
  ArrayX out = ArrayX::Zero(outer * inner);
  const Scalar* x = a.value().data();
  for (long o = 0; o < outer; ++o)
    for (long k = 0; k < d; ++k) {
      const Scalar* src = x + (o * d + k) * inner;
      Scalar* dst = out.data() + o * inner;
      for (long i = 0; i < inner; ++i) dst[i] += src[i];
    }
  Shape os = a.shape();
  if (keepdim)
    os[static_cast<size_t>(axis)] = 1;
  else
    os.erase(os.begin() + axis);
  if (os.empty()) os = {1};
  return make(std::move(os), std::move(out), {a.node()},
              [outer, d, inner](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                ArrayX g(p->value.size());
                const Scalar* gs = self.grad.data();
                for (long o = 0; o < outer; ++o)
                  for (long k = 0; k < d; ++k) {
                    Scalar* dst = g.data() + (o * d + k) * inner;
                    const Scalar* src = gs + o * inner;
                    for (long i = 0; i < inner; ++i) dst[i] = src[i];
                  }
                p->accumulate(g);
              });
}

Tensor mean_axis(const Tensor& a, int axis, bool keepdim) {
  long d = a.shape()[static_cast<size_t>(axis)];
  return sum_axis(a, axis, keepdim) * (1.0 / static_cast<Scalar>(d));
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  long n = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      check_arg(infer < 0, "reshape: multiple -1 dims");
      infer = static_cast<int>(i);
    } else {
      n *= shape[i];
    }
  }
  if (infer >= 0) shape[static_cast<size_t>(infer)] = static_cast<int>(a.numel() / n);
  check_arg(var3d::numel(shape) == a.numel(), "reshape: element count mismatch");
  return make(std::move(shape), ArrayX(a.value()), {a.node()}, [](TensorNode& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
  });
}

namespace {

std::vector<long> contiguous_strides(const Shape& s) {
  std::vector<long> st(s.size(), 1);
  for (size_t i = s.size() - 1; i-- > 0;) st[i] = st[i + 1] * s[i + 1];
  return st;
}

void permute_copy(const Shape& in_shape, const std::vector<int>& axes, const Scalar* src,
                  Scalar* dst) {
  size_t rank = in_shape.size();
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[static_cast<size_t>(axes[i])];
  auto in_st = contiguous_strides(in_shape);
  std::vector<long> st(rank);
  for (size_t i = 0; i < rank; ++i) st[i] = in_st[static_cast<size_t>(axes[i])];
  std::vector<long> idx(rank, 0);
  long off = 0, n = numel(out_shape);
  for (long i = 0; i < n; ++i) {
    dst[i] = src[off];
    for (size_t ax = rank; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        off += st[ax];
        break;
      }
      idx[ax] = 0;
      off -= st[ax] * (out_shape[ax] - 1);
    }
  }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  check_arg(axes.size() == a.shape().size(), "permute: rank mismatch");
  Shape os(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) os[i] = a.shape()[static_cast<size_t>(axes[i])];
  ArrayX out(a.numel());
  permute_copy(a.shape(), axes, a.value().data(), out.data());
  Shape in_shape = a.shape();
  return make(std::move(os), std::move(out), {a.node()},
              [axes, in_shape](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                // inverse permutation
                std::vector<int> inv(axes.size());
                for (size_t i = 0; i < axes.size(); ++i) inv[static_cast<size_t>(axes[i])] = static_cast<int>(i);
                ArrayX g(p->value.size());
                permute_copy(self.shape, inv, self.grad.data(), g.data());
                p->accumulate(g);
              });
}

Tensor transpose(const Tensor& a) {
  check_arg(a.rank() == 2, "transpose: expects 2-D");
  return permute(a, {1, 0});
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  long outer, d, inner;
  axis_split(a.shape(), axis, outer, d, inner);
  check_arg(start >= 0 && len >= 0 && start + len <= d, "slice: range out of bounds");
  ArrayX out(outer * len * inner);
  const Scalar* x = a.value().data();
  for (long o = 0; o < outer; ++o)
    std::copy(x + (o * d + start) * inner, x + (o * d + start + len) * inner,
              out.data() + o * len * inner);
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] = len;
  return make(std::move(os), std::move(out), {a.node()},
              [outer, d, inner, start, len](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                ArrayX g = ArrayX::Zero(p->value.size());
                for (long o = 0; o < outer; ++o)
                  std::copy(self.grad.data() + o * len * inner,
                            self.grad.data() + (o + 1) * len * inner,
                            g.data() + (o * d + start) * inner);
                p->accumulate(g);
              });
}

Tensor concat(const std::vector<Tensor>& ts, int axis) {
  check_arg(!ts.empty(), "concat: empty input");
  Shape os = ts[0].shape();
  long outer, d0, inner;
  axis_split(os, axis, outer, d0, inner);
  long total = 0;
  std::vector<long> lens;
  for (const auto& t : ts) {
    Shape s = t.shape();
    check_arg(s.size() == os.size(), "concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      check_arg(static_cast<int>(i) == axis || s[i] == os[i], "concat: shape mismatch");
    lens.push_back(s[static_cast<size_t>(axis)]);
    total += lens.back();
  }
  os[static_cast<size_t>(axis)] = static_cast<int>(total);
  ArrayX out(outer * total * inner);
  long off = 0;
  for (size_t k = 0; k < ts.size(); ++k) {
    const Scalar* x = ts[k].value().data();
    for (long o = 0; o < outer; ++o)
      std::copy(x + o * lens[k] * inner, x + (o + 1) * lens[k] * inner,
                out.data() + (o * total + off) * inner);
    off += lens[k];
  }
  std::vector<NodePtr> parents;
  for (const auto& t : ts) parents.push_back(t.node());
  return make(std::move(os), std::move(out), std::move(parents),
              [outer, total, inner, lens](TensorNode& self) {
                long off = 0;
                for (size_t k = 0; k < self.parents.size(); ++k) {
                  auto& p = self.parents[k];
                  if (p->requires_grad) {
                    ArrayX g(outer * lens[k] * inner);
                    for (long o = 0; o < outer; ++o)
                      std::copy(self.grad.data() + (o * total + off) * inner,
                                self.grad.data() + (o * total + off + lens[k]) * inner,
                                g.data() + o * lens[k] * inner);
                    p->accumulate(g);
                  }
                  off += lens[k];
                }
              });
}

Tensor detach(const Tensor& a) { return Tensor::from(a.shape(), ArrayX(a.value())); }

Tensor straight_through(const Tensor& a, ArrayX forwarded) {
  check_arg(forwarded.size() == a.numel(), "straight_through: size mismatch");
  return make(a.shape(), std::move(forwarded), {a.node()}, [](TensorNode& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
  });
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_arg(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul: bad shapes");
  long n = a.dim(0), k = a.dim(1), m = b.dim(1);
  ArrayX out(n * m);
  as_matrix(out, n, m).noalias() = as_matrix(a.value(), n, k) * as_matrix(b.value(), k, m);
  return make({static_cast<int>(n), static_cast<int>(m)}, std::move(out),
              {a.node(), b.node()}, [n, k, m](TensorNode& self) {
                auto& pa = self.parents[0];
                auto& pb = self.parents[1];
                auto g = as_matrix(self.grad, n, m);
                if (pa->requires_grad) {
                  ArrayX ga(n * k);
                  as_matrix(ga, n, k).noalias() = g * as_matrix(pb->value, k, m).transpose();
                  pa->accumulate(ga);
                }
                if (pb->requires_grad) {
                  ArrayX gb(k * m);
                  as_matrix(gb, k, m).noalias() = as_matrix(pa->value, n, k).transpose() * g;
                  pb->accumulate(gb);
                }
              });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_arg(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "matmul_nt: bad shapes");
  long n = a.dim(0), k = a.dim(1), m = b.dim(0);
  ArrayX out(n * m);
  as_matrix(out, n, m).noalias() =
      as_matrix(a.value(), n, k) * as_matrix(b.value(), m, k).transpose();
  return make({static_cast<int>(n), static_cast<int>(m)}, std::move(out),
              {a.node(), b.node()}, [n, k, m](TensorNode& self) {
                auto& pa = self.parents[0];
                auto& pb = self.parents[1];
                auto g = as_matrix(self.grad, n, m);
                if (pa->requires_grad) {
                  ArrayX ga(n * k);
                  as_matrix(ga, n, k).noalias() = g * as_matrix(pb->value, m, k);
                  pa->accumulate(ga);
                }
                if (pb->requires_grad) {
                  ArrayX gb(m * k);
                  as_matrix(gb, m, k).noalias() = g.transpose() * as_matrix(pa->value, n, k);
                  pb->accumulate(gb);
                }
              });
}

namespace {

Tensor bmm_impl(const Tensor& a, const Tensor& b, bool transpose_b) {
  check_arg(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), "bmm: bad shapes");
  long B = a.dim(0), n = a.dim(1), k = a.dim(2);
  long m = transpose_b ? b.dim(1) : b.dim(2);
  check_arg(transpose_b ? b.dim(2) == k : b.dim(1) == k, "bmm: inner dim mismatch");
  ArrayX out(B * n * m);
  for (long i = 0; i < B; ++i) {
    ConstRowMat ai(a.value().data() + i * n * k, n, k);
    RowMat oi(out.data() + i * n * m, n, m);
    if (transpose_b)
      oi.noalias() = ai * ConstRowMat(b.value().data() + i * m * k, m, k).transpose();
    else
      oi.noalias() = ai * ConstRowMat(b.value().data() + i * k * m, k, m);
  }
  return make({static_cast<int>(B), static_cast<int>(n), static_cast<int>(m)}, std::move(out),
              {a.node(), b.node()}, [B, n, k, m, transpose_b](TensorNode& self) {
                auto& pa = self.parents[0];
                auto& pb = self.parents[1];
                ArrayX ga, gb;
                if (pa->requires_grad) ga.setZero(B * n * k);
                if (pb->requires_grad) gb.setZero(pb->value.size());
                for (long i = 0; i < B; ++i) {
                  ConstRowMat g(self.grad.data() + i * n * m, n, m);
                  ConstRowMat ai(pa->value.data() + i * n * k, n, k);
                  if (transpose_b) {
                    ConstRowMat bi(pb->value.data() + i * m * k, m, k);
                    if (ga.size()) RowMat(ga.data() + i * n * k, n, k).noalias() = g * bi;
                    if (gb.size()) RowMat(gb.data() + i * m * k, m, k).noalias() = g.transpose() * ai;
                  } else {
                    ConstRowMat bi(pb->value.data() + i * k * m, k, m);
                    if (ga.size()) RowMat(ga.data() + i * n * k, n, k).noalias() = g * bi.transpose();
                    if (gb.size()) RowMat(gb.data() + i * k * m, k, m).noalias() = ai.transpose() * g;
                  }
                }
                if (ga.size()) pa->accumulate(ga);
                if (gb.size()) pb->accumulate(gb);
              });
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) { return bmm_impl(a, b, false); }
Tensor bmm_nt(const Tensor& a, const Tensor& b) { return bmm_impl(a, b, true); }

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
  check_arg(table.rank() == 2, "gather_rows: table must be 2-D");
  long V = table.dim(0), D = table.dim(1);
  long N = static_cast<long>(idx.size());
  ArrayX out(N * D);
  const Scalar* t = table.value().data();
  for (long i = 0; i < N; ++i) {
    check_arg(idx[static_cast<size_t>(i)] >= 0 && idx[static_cast<size_t>(i)] < V,
              "gather_rows: index out of range");
    std::copy(t + idx[static_cast<size_t>(i)] * D, t + (idx[static_cast<size_t>(i)] + 1) * D,
              out.data() + i * D);
  }
  return make({static_cast<int>(N), static_cast<int>(D)}, std::move(out), {table.node()},
              [idx, D](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                ArrayX g = ArrayX::Zero(p->value.size());
                for (size_t i = 0; i < idx.size(); ++i) {
                  Scalar* dst = g.data() + idx[i] * D;
                  const Scalar* src = self.grad.data() + static_cast<long>(i) * D;
                  for (long j = 0; j < D; ++j) dst[j] += src[j];
                }
                p->accumulate(g);
              });
}

Tensor take_per_row(const Tensor& a, const std::vector<int>& idx) {
  check_arg(a.rank() == 2, "take_per_row: expects 2-D");
  long N = a.dim(0), V = a.dim(1);
  check_arg(static_cast<long>(idx.size()) == N, "take_per_row: index count mismatch");
  ArrayX out(N);
  for (long i = 0; i < N; ++i) {
    check_arg(idx[static_cast<size_t>(i)] >= 0 && idx[static_cast<size_t>(i)] < V,
              "take_per_row: index out of range");
    out[i] = a.value()[i * V + idx[static_cast<size_t>(i)]];
  }
  return make({static_cast<int>(N)}, std::move(out), {a.node()}, [idx, V](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayX g = ArrayX::Zero(p->value.size());
    for (size_t i = 0; i < idx.size(); ++i)
      g[static_cast<long>(i) * V + idx[i]] = self.grad[static_cast<long>(i)];
    p->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// fused neural ops
// ---------------------------------------------------------------------------

namespace {

long last_dim(const Tensor& a) { return a.shape().back(); }

}  // namespace

Tensor softmax_lastdim(const Tensor& a) {
  long V = last_dim(a);
  long R = a.numel() / V;
  ArrayX out(a.numel());
  for (long r = 0; r < R; ++r) {
    auto x = a.value().segment(r * V, V);
    Scalar m = x.maxCoeff();
    ArrayX e = (x - m).exp();
    out.segment(r * V, V) = e / e.sum();
  }
  ArrayX saved = out;
  return make(a.shape(), std::move(out), {a.node()},
              [R, V, saved = std::move(saved)](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                ArrayX g(saved.size());
                for (long r = 0; r < R; ++r) {
                  auto y = saved.segment(r * V, V);
                  auto go = self.grad.segment(r * V, V);
                  Scalar dot = (go * y).sum();
                  g.segment(r * V, V) = y * (go - dot);
                }
                p->accumulate(g);
              });
}

Tensor log_softmax_lastdim(const Tensor& a) {
  long V = last_dim(a);
  long R = a.numel() / V;
  ArrayX out(a.numel());
  for (long r = 0; r < R; ++r) {
    auto x = a.value().segment(r * V, V);
    Scalar m = x.maxCoeff();
    Scalar lse = std::log((x - m).exp().sum()) + m;
    out.segment(r * V, V) = x - lse;
  }
  ArrayX saved = out;
  return make(a.shape(), std::move(out), {a.node()},
              [R, V, saved = std::move(saved)](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                ArrayX g(saved.size());
                for (long r = 0; r < R; ++r) {
                  auto go = self.grad.segment(r * V, V);
                  Scalar gsum = go.sum();
                  g.segment(r * V, V) = go - saved.segment(r * V, V).exp() * gsum;
                }
                p->accumulate(g);
              });
}

Tensor layer_norm_lastdim(const Tensor& a, Scalar eps) {
  long V = last_dim(a);
  long R = a.numel() / V;
  ArrayX out(a.numel());
  ArrayX inv_std(R);
  for (long r = 0; r < R; ++r) {
    auto x = a.value().segment(r * V, V);
    Scalar mu = x.mean();
    Scalar var = (x - mu).square().mean();
    Scalar is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    out.segment(r * V, V) = (x - mu) * is;
  }
  ArrayX xhat = out;
  return make(a.shape(), std::move(out), {a.node()},
              [R, V, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                ArrayX g(xhat.size());
                for (long r = 0; r < R; ++r) {
                  auto go = self.grad.segment(r * V, V);
                  auto xh = xhat.segment(r * V, V);
                  Scalar gm = go.mean();
                  Scalar gx = (go * xh).mean();
                  g.segment(r * V, V) = inv_std[r] * (go - gm - xh * gx);
                }
                p->accumulate(g);
              });
}

Tensor cumsum_lastdim_exclusive(const Tensor& a) {
  long V = last_dim(a);
  long R = a.numel() / V;
  ArrayX out(a.numel());
  for (long r = 0; r < R; ++r) {
    Scalar acc = 0;
    for (long j = 0; j < V; ++j) {
      out[r * V + j] = acc;
      acc += a.value()[r * V + j];
    }
  }
  return make(a.shape(), std::move(out), {a.node()}, [R, V](TensorNode& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    ArrayX g(p->value.size());
    for (long r = 0; r < R; ++r) {
      Scalar acc = 0;
      for (long j = V; j-- > 0;) {
        g[r * V + j] = acc;
        acc += self.grad[r * V + j];
      }
    }
    p->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

void im2col(const Scalar* x, long C, long H, long W, int K, int s, int p, long OH, long OW,
            Scalar* cols) {
  for (long c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        Scalar* row = cols + ((c * K + ky) * K + kx) * OH * OW;
        for (long oy = 0; oy < OH; ++oy) {
          long iy = oy * s - p + ky;
          if (iy < 0 || iy >= H) {
            std::fill(row + oy * OW, row + (oy + 1) * OW, 0.0);
            continue;
          }
          for (long ox = 0; ox < OW; ++ox) {
            long ix = ox * s - p + kx;
            row[oy * OW + ox] = (ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : 0.0;
          }
        }
      }
}

void col2im(const Scalar* cols, long C, long H, long W, int K, int s, int p, long OH, long OW,
            Scalar* x) {
  for (long c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        const Scalar* row = cols + ((c * K + ky) * K + kx) * OH * OW;
        for (long oy = 0; oy < OH; ++oy) {
          long iy = oy * s - p + ky;
          if (iy < 0 || iy >= H) continue;
          for (long ox = 0; ox < OW; ++ox) {
            long ix = ox * s - p + kx;
            if (ix >= 0 && ix < W) x[(c * H + iy) * W + ix] += row[oy * OW + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  check_arg(x.rank() == 4 && w.rank() == 4, "conv2d: expects 4-D input and weight");
  long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  long O = w.dim(0);
  int K = w.dim(2);
  check_arg(w.dim(1) == C && w.dim(3) == K, "conv2d: weight shape mismatch");
  long OH = (H + 2 * pad - K) / stride + 1;
  long OW = (W + 2 * pad - K) / stride + 1;
  check_arg(OH >= 1 && OW >= 1, "conv2d: output would be empty");
  const bool has_bias = b.defined();
  if (has_bias) check_arg(b.numel() == O, "conv2d: bias size mismatch");

  ArrayX out(N * O * OH * OW);
  ArrayX cols(C * K * K * OH * OW);
  ConstRowMat wm(w.value().data(), O, C * K * K);
  for (long n = 0; n < N; ++n) {
    im2col(x.value().data() + n * C * H * W, C, H, W, K, stride, pad, OH, OW, cols.data());
    RowMat on(out.data() + n * O * OH * OW, O, OH * OW);
    on.noalias() = wm * as_matrix(cols, C * K * K, OH * OW);
    if (has_bias)
      for (long o = 0; o < O; ++o) on.row(o).array() += b.value()[o];
  }
  std::vector<NodePtr> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(b.node());
  return make({static_cast<int>(N), static_cast<int>(O), static_cast<int>(OH), static_cast<int>(OW)},
              std::move(out), std::move(parents),
              [N, C, H, W, O, K, stride, pad, OH, OW, has_bias](TensorNode& self) {
                auto& px = self.parents[0];
                auto& pw = self.parents[1];
                ArrayX cols(C * K * K * OH * OW);
                ArrayX gx, gw;
                if (px->requires_grad) gx.setZero(px->value.size());
                if (pw->requires_grad) gw.setZero(pw->value.size());
                ConstRowMat wm(pw->value.data(), O, C * K * K);
                for (long n = 0; n < N; ++n) {
                  ConstRowMat gn(self.grad.data() + n * O * OH * OW, O, OH * OW);
                  if (pw->requires_grad) {
                    im2col(px->value.data() + n * C * H * W, C, H, W, K, stride, pad, OH, OW,
                           cols.data());
                    RowMat(gw.data(), O, C * K * K).noalias() +=
                        gn * as_matrix(cols, C * K * K, OH * OW).transpose();
                  }
                  if (px->requires_grad) {
                    as_matrix(cols, C * K * K, OH * OW).noalias() = wm.transpose() * gn;
                    col2im(cols.data(), C, H, W, K, stride, pad, OH, OW,
                           gx.data() + n * C * H * W);
                  }
                }
                if (gx.size()) px->accumulate(gx);
                if (gw.size()) pw->accumulate(gw);
                if (has_bias && self.parents[2]->requires_grad) {
                  ArrayX gb = ArrayX::Zero(O);
                  for (long n = 0; n < N; ++n)
                    for (long o = 0; o < O; ++o)
                      gb[o] += self.grad.segment((n * O + o) * OH * OW, OH * OW).sum();
                  self.parents[2]->accumulate(gb);
                }
              });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  check_arg(x.rank() == 4 && w.rank() == 4, "conv_transpose2d: expects 4-D input and weight");
  long N = x.dim(0), I = x.dim(1), H = x.dim(2), W = x.dim(3);
  check_arg(w.dim(0) == I, "conv_transpose2d: weight in_ch mismatch");
  long O = w.dim(1);
  int K = w.dim(2);
  long OH = (H - 1) * stride - 2 * pad + K;
  long OW = (W - 1) * stride - 2 * pad + K;
  const bool has_bias = b.defined();
  if (has_bias) check_arg(b.numel() == O, "conv_transpose2d: bias size mismatch");

  ArrayX out = ArrayX::Zero(N * O * OH * OW);
  ArrayX cols(O * K * K * H * W);
  ConstRowMat wm(w.value().data(), I, O * K * K);
  for (long n = 0; n < N; ++n) {
    as_matrix(cols, O * K * K, H * W).noalias() =
        wm.transpose() * ConstRowMat(x.value().data() + n * I * H * W, I, H * W);
    col2im(cols.data(), O, OH, OW, K, stride, pad, H, W, out.data() + n * O * OH * OW);
    if (has_bias)
      for (long o = 0; o < O; ++o)
        ArrayX::Map(out.data() + (n * O + o) * OH * OW, OH * OW) += b.value()[o];
  }
  std::vector<NodePtr> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(b.node());
  return make({static_cast<int>(N), static_cast<int>(O), static_cast<int>(OH), static_cast<int>(OW)},
              std::move(out), std::move(parents),
              [N, I, H, W, O, K, stride, pad, OH, OW, has_bias](TensorNode& self) {
                auto& px = self.parents[0];
                auto& pw = self.parents[1];
                ArrayX cols(O * K * K * H * W);
                ArrayX gx, gw;
                if (px->requires_grad) gx.setZero(px->value.size());
                if (pw->requires_grad) gw.setZero(pw->value.size());
                ConstRowMat wm(pw->value.data(), I, O * K * K);
                for (long n = 0; n < N; ++n) {
                  im2col(self.grad.data() + n * O * OH * OW, O, OH, OW, K, stride, pad, H, W,
                         cols.data());
                  if (px->requires_grad)
                    RowMat(gx.data() + n * I * H * W, I, H * W).noalias() =
                        wm * as_matrix(cols, O * K * K, H * W);
                  if (pw->requires_grad)
                    RowMat(gw.data(), I, O * K * K).noalias() +=
                        ConstRowMat(px->value.data() + n * I * H * W, I, H * W) *
                        as_matrix(cols, O * K * K, H * W).transpose();
                }
                if (gx.size()) px->accumulate(gx);
                if (gw.size()) pw->accumulate(gw);
                if (has_bias && self.parents[2]->requires_grad) {
                  ArrayX gb = ArrayX::Zero(O);
                  for (long n = 0; n < N; ++n)
                    for (long o = 0; o < O; ++o)
                      gb[o] += self.grad.segment((n * O + o) * OH * OW, OH * OW).sum();
                  self.parents[2]->accumulate(gb);
                }
              });
}

// ---------------------------------------------------------------------------
// bilinear resize
// ---------------------------------------------------------------------------

namespace {

struct ResizeTaps {
  std::vector<long> lo, hi;
  std::vector<Scalar> w;  // weight of hi tap
};

ResizeTaps resize_taps(long in, long out) {
  ResizeTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w.resize(out);
  for (long i = 0; i < out; ++i) {
    Scalar src = (static_cast<Scalar>(i) + 0.5) * static_cast<Scalar>(in) /
                     static_cast<Scalar>(out) -
                 0.5;
    src = std::min(std::max(src, 0.0), static_cast<Scalar>(in - 1));
    long lo = static_cast<long>(std::floor(src));
    long hi = std::min(lo + 1, in - 1);
    t.lo[i] = lo;
    t.hi[i] = hi;
    t.w[i] = src - static_cast<Scalar>(lo);
  }
  return t;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  check_arg(x.rank() == 4, "bilinear_resize: expects (N,C,H,W)");
  check_arg(out_h >= 1 && out_w >= 1, "bilinear_resize: bad target size");
  long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h == H && out_w == W) return reshape(x, x.shape());
  ResizeTaps ty = resize_taps(H, out_h), tx = resize_taps(W, out_w);
  ArrayX out(N * C * out_h * out_w);
  for (long nc = 0; nc < N * C; ++nc) {
    const Scalar* src = x.value().data() + nc * H * W;
    Scalar* dst = out.data() + nc * out_h * out_w;
    for (long oy = 0; oy < out_h; ++oy) {
      Scalar wy = ty.w[oy];
      const Scalar* r0 = src + ty.lo[oy] * W;
      const Scalar* r1 = src + ty.hi[oy] * W;
      for (long ox = 0; ox < out_w; ++ox) {
        Scalar wx = tx.w[ox];
        Scalar v0 = r0[tx.lo[ox]] * (1 - wx) + r0[tx.hi[ox]] * wx;
        Scalar v1 = r1[tx.lo[ox]] * (1 - wx) + r1[tx.hi[ox]] * wx;
        dst[oy * out_w + ox] = v0 * (1 - wy) + v1 * wy;
      }
    }
  }
  return make({static_cast<int>(N), static_cast<int>(C), out_h, out_w}, std::move(out),
              {x.node()}, [N, C, H, W, out_h, out_w, ty, tx](TensorNode& self) {
                auto& p = self.parents[0];
                if (!p->requires_grad) return;
                ArrayX g = ArrayX::Zero(p->value.size());
                for (long nc = 0; nc < N * C; ++nc) {
                  Scalar* dst = g.data() + nc * H * W;
                  const Scalar* gs = self.grad.data() + nc * out_h * out_w;
                  for (long oy = 0; oy < out_h; ++oy) {
                    Scalar wy = ty.w[oy];
                    for (long ox = 0; ox < out_w; ++ox) {
                      Scalar wx = tx.w[ox];
                      Scalar gv = gs[oy * out_w + ox];
                      dst[ty.lo[oy] * W + tx.lo[ox]] += gv * (1 - wy) * (1 - wx);
                      dst[ty.lo[oy] * W + tx.hi[ox]] += gv * (1 - wy) * wx;
                      dst[ty.hi[oy] * W + tx.lo[ox]] += gv * wy * (1 - wx);
                      dst[ty.hi[oy] * W + tx.hi[ox]] += gv * wy * wx;
                    }
                  }
                }
                p->accumulate(g);
              });
}

// ---------------------------------------------------------------------------
// triplane sampling
// ---------------------------------------------------------------------------

namespace {

// plane axis pairs: xy -> (0,1), xz -> (0,2), yz -> (1,2); first of the pair
// indexes columns, second indexes rows.
constexpr int kPlaneAxes[3][2] = {{0, 1}, {0, 2}, {1, 2}};

inline void plane_coord(Scalar u, long P, long& lo, long& hi, Scalar& w) {
  Scalar c = (std::min(std::max(u, -1.0), 1.0) + 1.0) * 0.5 * static_cast<Scalar>(P - 1);
  lo = static_cast<long>(std::floor(c));
  if (lo > P - 2) lo = P - 2;
  if (lo < 0) lo = 0;
  hi = lo + 1;
  w = c - static_cast<Scalar>(lo);
  if (P == 1) {
    lo = hi = 0;
    w = 0;
  }
}

}  // namespace

Tensor triplane_sample(const Tensor& planes, const Tensor& points) {
  check_arg(planes.rank() == 4 && planes.dim(0) == 3 && planes.dim(2) == planes.dim(3),
            "triplane_sample: planes must be (3,C,P,P)");
  check_arg(points.rank() == 2 && points.dim(1) == 3, "triplane_sample: points must be (N,3)");
  long C = planes.dim(1), P = planes.dim(2);
  long N = points.dim(0);
  ArrayX out = ArrayX::Zero(N * C);
  const Scalar* pl = planes.value().data();
  const Scalar* pt = points.value().data();
  for (long n = 0; n < N; ++n) {
    for (int q = 0; q < 3; ++q) {
      long cx0, cx1, cy0, cy1;
      Scalar wx, wy;
      plane_coord(pt[n * 3 + kPlaneAxes[q][0]], P, cx0, cx1, wx);
      plane_coord(pt[n * 3 + kPlaneAxes[q][1]], P, cy0, cy1, wy);
      const Scalar w00 = (1 - wy) * (1 - wx), w01 = (1 - wy) * wx;
      const Scalar w10 = wy * (1 - wx), w11 = wy * wx;
      const Scalar* base = pl + q * C * P * P;
      Scalar* o = out.data() + n * C;
      for (long c = 0; c < C; ++c) {
        const Scalar* g = base + c * P * P;
        o[c] += w00 * g[cy0 * P + cx0] + w01 * g[cy0 * P + cx1] + w10 * g[cy1 * P + cx0] +
                w11 * g[cy1 * P + cx1];
      }
    }
  }
  return make({static_cast<int>(N), static_cast<int>(C)}, std::move(out),
              {planes.node(), points.node()}, [C, P, N](TensorNode& self) {
                auto& ppl = self.parents[0];
                auto& ppt = self.parents[1];
                const Scalar* pl = ppl->value.data();
                const Scalar* pt = ppt->value.data();
                ArrayX gpl, gpt;
                if (ppl->requires_grad) gpl.setZero(ppl->value.size());
                if (ppt->requires_grad) gpt.setZero(ppt->value.size());
                for (long n = 0; n < N; ++n) {
                  const Scalar* g = self.grad.data() + n * C;
                  for (int q = 0; q < 3; ++q) {
                    long cx0, cx1, cy0, cy1;
                    Scalar wx, wy;
                    Scalar ux = pt[n * 3 + kPlaneAxes[q][0]];
                    Scalar uy = pt[n * 3 + kPlaneAxes[q][1]];
                    plane_coord(ux, P, cx0, cx1, wx);
                    plane_coord(uy, P, cy0, cy1, wy);
                    const Scalar scale = 0.5 * static_cast<Scalar>(P - 1);
                    Scalar dx_acc = 0, dy_acc = 0;
                    for (long c = 0; c < C; ++c) {
                      Scalar gv = g[c];
                      const Scalar* gr = pl + (q * C + c) * P * P;
                      if (gpl.size()) {
                        Scalar* dst = gpl.data() + (q * C + c) * P * P;
                        dst[cy0 * P + cx0] += gv * (1 - wy) * (1 - wx);
                        dst[cy0 * P + cx1] += gv * (1 - wy) * wx;
                        dst[cy1 * P + cx0] += gv * wy * (1 - wx);
                        dst[cy1 * P + cx1] += gv * wy * wx;
                      }
                      if (gpt.size()) {
                        Scalar v00 = gr[cy0 * P + cx0], v01 = gr[cy0 * P + cx1];
                        Scalar v10 = gr[cy1 * P + cx0], v11 = gr[cy1 * P + cx1];
                        dx_acc += gv * ((1 - wy) * (v01 - v00) + wy * (v11 - v10));
                        dy_acc += gv * ((1 - wx) * (v10 - v00) + wx * (v11 - v01));
                      }
                    }
                    if (gpt.size()) {
                      // zero slope once clamped at the boundary
                      if (ux > -1.0 && ux < 1.0) gpt[n * 3 + kPlaneAxes[q][0]] += dx_acc * scale;
                      if (uy > -1.0 && uy < 1.0) gpt[n * 3 + kPlaneAxes[q][1]] += dy_acc * scale;
                    }
                  }
                }
                if (gpl.size()) ppl->accumulate(gpl);
                if (gpt.size()) ppt->accumulate(gpt);
              });
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

ArrayX finite_difference(const std::function<Scalar()>& f, Tensor& x, Scalar eps) {
  ArrayX g(x.numel());
  ArrayX& v = x.raw_value();
  for (long i = 0; i < v.size(); ++i) {
    Scalar saved = v[i];
    v[i] = saved + eps;
    Scalar fp = f();
    v[i] = saved - eps;
    Scalar fm = f();
    v[i] = saved;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

}  // namespace var3d
