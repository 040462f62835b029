#include "tstrm/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace tstrm {

namespace {
using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

long shape_numel(const Shape& s) {
  long n = 1;
  for (long e : s) n *= e;
  return n;
}

namespace detail {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.node()->requires_grad;
    if (needs) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backprop = std::move(backprop);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace detail

// --- construction ---

Tensor Tensor::zeros(Shape shape) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<long>(values.size()))
    throw DimensionError("Tensor::from: " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.values()) v = stddev * rng.normal();
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item(): tensor has " + std::to_string(size()) + " elements");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<long> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw DimensionError("at(): rank mismatch");
  long off = 0;
  size_t k = 0;
  for (long i : idx) {
    off = off * s[k] + i;
    ++k;
  }
  return node_->data[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("grad(): no gradient populated");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

void Tensor::backward() {
  if (size() != 1) throw std::runtime_error("backward(): loss must be scalar, got " + shape_str(shape()));
  // Topological order via iterative DFS.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      detail::Node* p = n->parents[i++].get();
      if (p->backprop || p->requires_grad) {
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
  // Release the graph; leaves keep their accumulated grads.
  for (detail::Node* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
    if (!n->requires_grad) n->grad.clear();
  }
}

// --- broadcast binary ops ---

namespace {

struct BroadcastPlan {
  Shape out;
  std::vector<long> stride_a, stride_b;  // element strides, 0 on broadcast axes
};

BroadcastPlan broadcast_shapes(const Shape& a, const Shape& b, const char* opname) {
  BroadcastPlan plan;
  size_t nd = std::max(a.size(), b.size());
  plan.out.resize(nd);
  std::vector<long> ext_a(nd, 1), ext_b(nd, 1);
  std::copy(a.begin(), a.end(), ext_a.begin() + (nd - a.size()));
  std::copy(b.begin(), b.end(), ext_b.begin() + (nd - b.size()));
  for (size_t i = 0; i < nd; ++i) {
    if (ext_a[i] == ext_b[i]) plan.out[i] = ext_a[i];
    else if (ext_a[i] == 1) plan.out[i] = ext_b[i];
    else if (ext_b[i] == 1) plan.out[i] = ext_a[i];
    else
      throw DimensionError(std::string(opname) + ": shapes " + shape_str(a) + " and " +
                           shape_str(b) + " are not broadcast-compatible");
  }
  plan.stride_a.assign(nd, 0);
  plan.stride_b.assign(nd, 0);
  long sa = 1, sb = 1;
  for (size_t i = nd; i-- > 0;) {
    if (ext_a[i] != 1) plan.stride_a[i] = sa;
    if (ext_b[i] != 1) plan.stride_b[i] = sb;
    sa *= ext_a[i];
    sb *= ext_b[i];
  }
  return plan;
}

// Applies fn(va, vb) over the broadcast iteration space; offs_a/offs_b give
// the flat source offsets per output element.
template <class F>
void broadcast_apply(const BroadcastPlan& plan, F&& fn) {
  size_t nd = plan.out.size();
  std::vector<long> idx(nd, 0);
  long total = shape_numel(plan.out);
  long oa = 0, ob = 0;
  for (long flat = 0; flat < total; ++flat) {
    fn(flat, oa, ob);
    for (size_t i = nd; i-- > 0;) {
      ++idx[i];
      oa += plan.stride_a[i];
      ob += plan.stride_b[i];
      if (idx[i] < plan.out[i]) break;
      idx[i] = 0;
      oa -= plan.stride_a[i] * plan.out[i];
      ob -= plan.stride_b[i] * plan.out[i];
    }
  }
}

Tensor binary_op(const Tensor& a, const Tensor& b, const char* name,
                 double (*fwd)(double, double),
                 double (*dfa)(double, double),
                 double (*dfb)(double, double)) {
  BroadcastPlan plan = broadcast_shapes(a.shape(), b.shape(), name);
  std::vector<double> out(static_cast<size_t>(shape_numel(plan.out)));
  const double* pa = a.data();
  const double* pb = b.data();
  broadcast_apply(plan, [&](long flat, long oa, long ob) { out[flat] = fwd(pa[oa], pb[ob]); });
  return detail::make_op(
      plan.out, std::move(out), {a, b},
      [plan, dfa, dfb](detail::Node& n) {
        auto& an = *n.parents[0];
        auto& bn = *n.parents[1];
        bool ga = an.requires_grad, gb = bn.requires_grad;
        if (ga) an.ensure_grad();
        if (gb) bn.ensure_grad();
        broadcast_apply(plan, [&](long flat, long oa, long ob) {
          double g = n.grad[flat];
          if (ga) an.grad[oa] += g * dfa(an.data[oa], bn.data[ob]);
          if (gb) bn.grad[ob] += g * dfb(an.data[oa], bn.data[ob]);
        });
      });
}

Tensor unary_op(const Tensor& a, double (*fwd)(double), double (*dfd)(double, double)) {
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  return detail::make_op(a.shape(), std::move(out), {a}, [dfd](detail::Node& n) {
    auto& an = *n.parents[0];
    an.ensure_grad();
    for (size_t i = 0; i < n.data.size(); ++i)
      an.grad[i] += n.grad[i] * dfd(an.data[i], n.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                   [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                   [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                   [](double, double y) { return y; }, [](double x, double) { return x; });
}
Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "div", [](double x, double y) { return x / y; },
                   [](double, double y) { return 1.0 / y; },
                   [](double x, double y) { return -x / (y * y); });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return detail::make_op(a.shape(), std::move(out), {a}, [](detail::Node& n) {
    auto& an = *n.parents[0];
    an.ensure_grad();
    for (size_t i = 0; i < n.data.size(); ++i) an.grad[i] += n.grad[i];
  });
}

Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return detail::make_op(a.shape(), std::move(out), {a}, [c](detail::Node& n) {
    auto& an = *n.parents[0];
    an.ensure_grad();
    for (size_t i = 0; i < n.data.size(); ++i) an.grad[i] += n.grad[i] * c;
  });
}

Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}
Tensor log(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}
Tensor sqrt(const Tensor& a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

// --- reductions ---

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i) s += a.data()[i];
  return detail::make_op({}, {s}, {a}, [](detail::Node& n) {
    auto& an = *n.parents[0];
    an.ensure_grad();
    for (auto& g : an.grad) g += n.grad[0];
  });
}

namespace {
void reduce_extents(const Shape& s, long axis, long& outer, long& mid, long& inner) {
  outer = 1;
  inner = 1;
  for (long i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  mid = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace

Tensor sum(const Tensor& a, long axis, bool keepdims) {
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim()) throw DimensionError("sum: axis out of range");
  long outer, mid, inner;
  reduce_extents(a.shape(), axis, outer, mid, inner);
  Shape out_shape;
  for (long i = 0; i < a.ndim(); ++i) {
    if (i == axis) {
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.dim(i));
    }
  }
  std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
  const double* p = a.data();
  for (long o = 0; o < outer; ++o)
    for (long m = 0; m < mid; ++m)
      for (long i = 0; i < inner; ++i)
        out[static_cast<size_t>(o * inner + i)] += p[(o * mid + m) * inner + i];
  return detail::make_op(out_shape, std::move(out), {a}, [outer, mid, inner](detail::Node& n) {
    auto& an = *n.parents[0];
    an.ensure_grad();
    for (long o = 0; o < outer; ++o)
      for (long m = 0; m < mid; ++m)
        for (long i = 0; i < inner; ++i)
          an.grad[(o * mid + m) * inner + i] += n.grad[static_cast<size_t>(o * inner + i)];
  });
}

Tensor mean(const Tensor& a) { return sum(a) * (1.0 / static_cast<double>(a.size())); }

Tensor mean(const Tensor& a, long axis, bool keepdims) {
  if (axis < 0) axis += a.ndim();
  double inv = 1.0 / static_cast<double>(a.dim(axis));
  return sum(a, axis, keepdims) * inv;
}

// --- shape ops ---

Tensor reshape(const Tensor& a, Shape new_shape) {
  // One extent may be -1 and is inferred.
  long known = 1;
  long infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: multiple -1 extents");
      infer = static_cast<long>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) new_shape[static_cast<size_t>(infer)] = a.size() / known;
  if (shape_numel(new_shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
  return detail::make_op(std::move(new_shape), a.values(), {a}, [](detail::Node& n) {
    auto& an = *n.parents[0];
    an.ensure_grad();
    for (size_t i = 0; i < n.data.size(); ++i) an.grad[i] += n.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<long>& perm) {
  if (static_cast<long>(perm.size()) != a.ndim()) throw DimensionError("permute: rank mismatch");
  size_t nd = perm.size();
  Shape out_shape(nd);
  for (size_t i = 0; i < nd; ++i) out_shape[i] = a.dim(perm[i]);
  // out[idx] = in[idx ∘ perm]: precompute the input stride seen by each
  // output axis.
  std::vector<long> in_stride(nd, 1);
  for (size_t i = nd - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * a.dim(static_cast<long>(i) + 1);
  std::vector<long> src_stride(nd);
  for (size_t i = 0; i < nd; ++i) src_stride[i] = in_stride[static_cast<size_t>(perm[i])];

  std::vector<double> out(a.values().size());
  std::vector<long> src_index(a.values().size());
  std::vector<long> idx(nd, 0);
  long src = 0;
  for (size_t flat = 0; flat < out.size(); ++flat) {
    out[flat] = a.data()[src];
    src_index[flat] = src;
    for (size_t i = nd; i-- > 0;) {
      ++idx[i];
      src += src_stride[i];
      if (idx[i] < out_shape[i]) break;
      idx[i] = 0;
      src -= src_stride[i] * out_shape[i];
    }
  }
  return detail::make_op(out_shape, std::move(out), {a},
                         [src_index = std::move(src_index)](detail::Node& n) {
                           auto& an = *n.parents[0];
                           an.ensure_grad();
                           for (size_t i = 0; i < n.data.size(); ++i)
                             an.grad[static_cast<size_t>(src_index[i])] += n.grad[i];
                         });
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, long axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0) axis += static_cast<long>(s0.size());
  Shape out_shape = s0;
  for (size_t p = 1; p < parts.size(); ++p) {
    const Shape& sp = parts[p].shape();
    if (sp.size() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (size_t i = 0; i < sp.size(); ++i)
      if (static_cast<long>(i) != axis && sp[i] != s0[i])
        throw DimensionError("concat: " + shape_str(s0) + " vs " + shape_str(sp));
    out_shape[static_cast<size_t>(axis)] += sp[static_cast<size_t>(axis)];
  }
  long outer = 1, inner = 1;
  for (long i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];
  long out_mid = out_shape[static_cast<size_t>(axis)];

  std::vector<double> out(static_cast<size_t>(outer * out_mid * inner));
  std::vector<long> mids(parts.size());
  long off = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    long mid = parts[p].dim(axis);
    mids[p] = mid;
    const double* src = parts[p].data();
    for (long o = 0; o < outer; ++o)
      std::copy(src + o * mid * inner, src + (o + 1) * mid * inner,
                out.begin() + (o * out_mid + off) * inner);
    off += mid;
  }
  return detail::make_op(out_shape, std::move(out), parts,
                         [outer, inner, out_mid, mids = std::move(mids)](detail::Node& n) {
                           long off2 = 0;
                           for (size_t p = 0; p < n.parents.size(); ++p) {
                             auto& pn = *n.parents[p];
                             pn.ensure_grad();
                             long mid = mids[p];
                             for (long o = 0; o < outer; ++o)
                               for (long j = 0; j < mid * inner; ++j)
                                 pn.grad[static_cast<size_t>(o * mid * inner + j)] +=
                                     n.grad[static_cast<size_t>((o * out_mid + off2) * inner + j)];
                             off2 += mid;
                           }
                         });
}

Tensor slice(const Tensor& a, long axis, long start, long length) {
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim()) throw DimensionError("slice: axis out of range");
  if (start < 0 || length < 0 || start + length > a.dim(axis))
    throw DimensionError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + length) + ") exceeds extent " +
                         std::to_string(a.dim(axis)));
  long outer, mid, inner;
  reduce_extents(a.shape(), axis, outer, mid, inner);
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = length;
  std::vector<double> out(static_cast<size_t>(outer * length * inner));
  const double* src = a.data();
  for (long o = 0; o < outer; ++o)
    std::copy(src + (o * mid + start) * inner, src + (o * mid + start + length) * inner,
              out.begin() + o * length * inner);
  return detail::make_op(out_shape, std::move(out), {a},
                         [outer, mid, inner, start, length](detail::Node& n) {
                           auto& an = *n.parents[0];
                           an.ensure_grad();
                           for (long o = 0; o < outer; ++o)
                             for (long j = 0; j < length * inner; ++j)
                               an.grad[(o * mid + start) * inner + j] +=
                                   n.grad[static_cast<size_t>(o * length * inner + j)];
                         });
}

// --- matmul ---

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw DimensionError("matmul: expected 2-D operands, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  long m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul: inner extents disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m * n));
  {
    ConstMatMap A(a.data(), m, k), B(b.data(), k, n);
    MatMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  return detail::make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& nd) {
    auto& an = *nd.parents[0];
    auto& bn = *nd.parents[1];
    ConstMatMap G(nd.grad.data(), m, n);
    ConstMatMap A(an.data.data(), m, k), B(bn.data.data(), k, n);
    if (an.requires_grad) {
      an.ensure_grad();
      MatMap GA(an.grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      MatMap GB(bn.grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

// --- softmax / log_softmax ---

namespace {
template <class Fill>
Tensor axis_normalizer(const Tensor& a, long axis, const char* name, Fill&& fill,
                       std::function<void(detail::Node&, long, long, long)> backprop) {
  if (axis < 0) axis += a.ndim();
  if (axis < 0 || axis >= a.ndim()) throw DimensionError(std::string(name) + ": axis out of range");
  long outer, mid, inner;
  reduce_extents(a.shape(), axis, outer, mid, inner);
  std::vector<double> out(a.values().size());
  fill(a.data(), out.data(), outer, mid, inner);
  return detail::make_op(a.shape(), std::move(out), {a},
                         [outer, mid, inner, backprop = std::move(backprop)](detail::Node& n) {
                           backprop(n, outer, mid, inner);
                         });
}
}  // namespace

Tensor softmax(const Tensor& a, long axis) {
  return axis_normalizer(
      a, axis, "softmax",
      [](const double* in, double* out, long outer, long mid, long inner) {
        for (long o = 0; o < outer; ++o)
          for (long i = 0; i < inner; ++i) {
            const double* x = in + o * mid * inner + i;
            double mx = x[0];
            for (long m = 1; m < mid; ++m) mx = std::max(mx, x[m * inner]);
            double z = 0.0;
            double* y = out + o * mid * inner + i;
            for (long m = 0; m < mid; ++m) {
              y[m * inner] = std::exp(x[m * inner] - mx);
              z += y[m * inner];
            }
            for (long m = 0; m < mid; ++m) y[m * inner] /= z;
          }
      },
      [](detail::Node& n, long outer, long mid, long inner) {
        auto& an = *n.parents[0];
        an.ensure_grad();
        for (long o = 0; o < outer; ++o)
          for (long i = 0; i < inner; ++i) {
            const double* y = n.data.data() + o * mid * inner + i;
            const double* g = n.grad.data() + o * mid * inner + i;
            double dot = 0.0;
            for (long m = 0; m < mid; ++m) dot += y[m * inner] * g[m * inner];
            double* gx = an.grad.data() + o * mid * inner + i;
            for (long m = 0; m < mid; ++m)
              gx[m * inner] += y[m * inner] * (g[m * inner] - dot);
          }
      });
}

Tensor log_softmax(const Tensor& a, long axis) {
  return axis_normalizer(
      a, axis, "log_softmax",
      [](const double* in, double* out, long outer, long mid, long inner) {
        for (long o = 0; o < outer; ++o)
          for (long i = 0; i < inner; ++i) {
            const double* x = in + o * mid * inner + i;
            double mx = x[0];
            for (long m = 1; m < mid; ++m) mx = std::max(mx, x[m * inner]);
            double z = 0.0;
            for (long m = 0; m < mid; ++m) z += std::exp(x[m * inner] - mx);
            double lz = mx + std::log(z);
            double* y = out + o * mid * inner + i;
            for (long m = 0; m < mid; ++m) y[m * inner] = x[m * inner] - lz;
          }
      },
      [](detail::Node& n, long outer, long mid, long inner) {
        auto& an = *n.parents[0];
        an.ensure_grad();
        for (long o = 0; o < outer; ++o)
          for (long i = 0; i < inner; ++i) {
            const double* y = n.data.data() + o * mid * inner + i;
            const double* g = n.grad.data() + o * mid * inner + i;
            double gs = 0.0;
            for (long m = 0; m < mid; ++m) gs += g[m * inner];
            double* gx = an.grad.data() + o * mid * inner + i;
            for (long m = 0; m < mid; ++m)
              gx[m * inner] += g[m * inner] - std::exp(y[m * inner]) * gs;
          }
      });
}

// --- embedding ---

Tensor embedding(const Tensor& table, const std::vector<long>& ids) {
  if (table.ndim() != 2) throw DimensionError("embedding: table must be 2-D");
  long v = table.dim(0), d = table.dim(1);
  for (long id : ids)
    if (id < 0 || id >= v)
      throw DimensionError("embedding: id " + std::to_string(id) + " outside table of " +
                           std::to_string(v));
  long L = static_cast<long>(ids.size());
  std::vector<double> out(static_cast<size_t>(L * d));
  for (long i = 0; i < L; ++i)
    std::copy(table.data() + ids[i] * d, table.data() + (ids[i] + 1) * d, out.begin() + i * d);
  return detail::make_op({L, d}, std::move(out), {table}, [ids, d](detail::Node& n) {
    auto& tn = *n.parents[0];
    tn.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      for (long j = 0; j < d; ++j)
        tn.grad[static_cast<size_t>(ids[i] * d + j)] += n.grad[i * d + j];
  });
}

Tensor dropout(const Tensor& a, double rate, Rng& rng, bool enabled) {
  if (!enabled || rate <= 0.0) return a;
  double keep = 1.0 - rate;
  std::vector<double> mask(a.values().size());
  for (auto& m : mask) m = (rng.next_double() < keep) ? 1.0 / keep : 0.0;
  std::vector<double> out(a.values().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  return detail::make_op(a.shape(), std::move(out), {a}, [mask = std::move(mask)](detail::Node& n) {
    auto& an = *n.parents[0];
    an.ensure_grad();
    for (size_t i = 0; i < n.data.size(); ++i) an.grad[i] += n.grad[i] * mask[i];
  });
}

// --- grad_check ---

GradCheckReport grad_check(const std::string& op_name,
                           const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps, double tol, double absolute_floor) {
  GradCheckReport report;
  report.op_name = op_name;

  Tensor xv = x.detach().set_requires_grad(true);
  Tensor loss = f(xv);
  if (loss.size() != 1) throw std::runtime_error("grad_check: f must be scalar-valued");
  loss.backward();
  std::vector<double> analytic = xv.has_grad()
                                     ? xv.grad()
                                     : std::vector<double>(xv.values().size(), 0.0);

  NoGradGuard ng;
  Tensor probe = x.detach();
  for (long i = 0; i < probe.size(); ++i) {
    double saved = probe.data()[i];
    probe.data()[i] = saved + eps;
    double fp = f(probe).item();
    probe.data()[i] = saved - eps;
    double fm = f(probe).item();
    probe.data()[i] = saved;
    double numeric = (fp - fm) / (2.0 * eps);
    double a = analytic[static_cast<size_t>(i)];
    if (std::isnan(numeric) || std::isnan(a)) {
      report.passed = false;
      report.max_rel_error = std::numeric_limits<double>::quiet_NaN();
      report.diagnostic = "NaN at coordinate " + std::to_string(i);
      return report;
    }
    double abs_err = std::abs(a - numeric);
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (abs_err > absolute_floor) {
      double rel = abs_err / std::max(std::abs(a) + std::abs(numeric), 1e-12);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        if (rel > tol)
          report.diagnostic = "coordinate " + std::to_string(i) + ": analytic " +
                              std::to_string(a) + " vs numeric " + std::to_string(numeric);
      }
    }
  }
  report.passed = report.max_rel_error <= tol || report.max_abs_error <= absolute_floor;
  return report;
}

}  // namespace tstrm
