#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sdet/error.hpp"

namespace sdet {

// Dense row-major double tensor with reverse-mode autodiff.
//
// A Tensor is a cheap handle onto a heap node. Nodes form a DAG: every op
// records its parents and a closure that propagates the node's gradient into
// them. Values are immutable once an op has consumed them; gradients are only
// mutated inside a single backward() pass. A graph is confined to one thread.

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily by backward()
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backward_fn;  // null for leaves
  const char* op = "leaf";

  size_t numel() const { return value.size(); }
  // Zero-fills on first use so accumulation is uniform across ops.
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  // N(0, stddev^2) elements drawn from rng in row-major order.
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t rank() const { return node_->shape.size(); }
  size_t dim(size_t i) const { return node_->shape.at(i); }
  size_t numel() const { return node_->numel(); }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::vector<double>& vec() { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }
  double item() const;  // numel()==1 only

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Value copy detached from the graph.
  Tensor detached() const;

  NodePtr node() const { return node_; }
  TensorNode* raw() const { return node_.get(); }

 private:
  NodePtr node_;
};

// Runs reverse-mode accumulation from a scalar loss. Every requires_grad
// leaf reachable from the loss ends up with an allocated gradient.
void backward(const Tensor& loss);

// While false, ops compute values but record no graph (inference mode).
class GradMode {
 public:
  static bool enabled();
  static void set(bool b);
};

// RAII guard: disables graph recording in scope.
struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }

 private:
  bool prev_;
};

namespace detail {
// Builds the result node of an op: wires parents/backward only when grad
// recording is on and some parent needs it.
Tensor make_op_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                      std::function<void(TensorNode&)> backward_fn, const char* op);
}  // namespace detail

}  // namespace sdet
