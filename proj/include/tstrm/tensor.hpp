#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <memory>
#include <string>
#include <vector>

#include "tstrm/rng.hpp"

namespace tstrm {

using Shape = std::vector<long>;

std::string shape_str(const Shape& s);
long shape_numel(const Shape& s);

// Thrown on shape/contract violations in tensor ops.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Thread-local switch: when false, ops do not record the graph.
bool grad_enabled();
void set_grad_enabled(bool on);

}  // namespace detail

// Temporarily disables graph recording (inference / oracle evaluation).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::set_grad_enabled(false); }
  ~NoGradGuard() { detail::set_grad_enabled(prev_); }

 private:
  bool prev_;
};

// Dense row-major f64 tensor with reverse-mode gradients. Copies are shallow:
// two Tensor values may share one underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  long ndim() const { return static_cast<long>(node_->shape.size()); }
  long dim(long i) const { return node_->shape[static_cast<size_t>(i)]; }
  long size() const { return static_cast<long>(node_->data.size()); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& values() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double item() const;
  double at(std::initializer_list<long> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  const std::vector<double>& grad() const;
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  void zero_grad();

  // Reverse pass from a scalar loss. Accumulates (+=) into every
  // requires_grad leaf reachable from this node; the recorded graph is
  // released afterwards.
  void backward();

  // A leaf with the same values and no graph history.
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// --- op construction helper (used by the op implementations) ---
namespace detail {
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(Node&)> backprop);
}

// --- elementwise / broadcast arithmetic ---
// Broadcast rule: shapes are aligned at the trailing axis; a missing or
// size-1 axis expands to the other operand's extent.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor operator*(const Tensor& a, double c);
Tensor operator*(double c, const Tensor& a);
Tensor operator+(const Tensor& a, double c);
Tensor operator-(const Tensor& a, double c);

Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);

// --- reductions ---
Tensor sum(const Tensor& a);                      // scalar
Tensor sum(const Tensor& a, long axis, bool keepdims = false);
Tensor mean(const Tensor& a);                     // scalar
Tensor mean(const Tensor& a, long axis, bool keepdims = false);

// --- shape ops ---
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor transpose(const Tensor& a);                // 2-D
Tensor permute(const Tensor& a, const std::vector<long>& perm);
Tensor concat(const std::vector<Tensor>& parts, long axis);
Tensor slice(const Tensor& a, long axis, long start, long length);

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]

// --- nonlinear normalizers ---
Tensor softmax(const Tensor& a, long axis);
Tensor log_softmax(const Tensor& a, long axis);

// --- lookups / regularization ---
Tensor embedding(const Tensor& table, const std::vector<long>& ids);
Tensor dropout(const Tensor& a, double rate, Rng& rng, bool enabled);

// --- gradient verification ---
struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
  std::string diagnostic;  // set when a NaN or failing coordinate is found
};

// Central-difference check of a scalar-valued function's gradient at x.
// A coordinate passes when its relative error is <= tol or its absolute
// error is <= absolute_floor; max_rel_error reports only coordinates whose
// absolute error exceeds the floor.
GradCheckReport grad_check(const std::string& op_name,
                           const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& x, double eps = 1e-5,
                           double tol = 1e-4, double absolute_floor = 1e-7);

}  // namespace tstrm
