#include "sdet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace sdet {

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t e : s) {
    if (e == 0) fail("bad_shape", "zero extent in shape", shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  size_t n = shape_numel(shape);
  if (data.empty()) data.assign(n, 0.0);
  if (data.size() != n)
    fail("bad_shape", "element count does not match shape", shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  size_t n = shape_numel(shape);
  std::vector<double> v(n);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (size_t i = 0; i < n; ++i) v[i] = dist(rng) * stddev;
  return from_data(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  size_t n = shape_numel(shape);
  std::vector<double> v(n);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (size_t i = 0; i < n; ++i) v[i] = dist(rng);
  return from_data(std::move(shape), std::move(v), requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) fail("bad_shape", "item() on non-scalar tensor", shape_str(shape()));
  return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    fail("no_grad", "gradient not populated; run backward() first");
  return node_->grad;
}

Tensor Tensor::detached() const {
  return from_data(node_->shape, node_->value, false);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool b) { g_grad_enabled = b; }

namespace detail {

Tensor make_op_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                      std::function<void(TensorNode&)> backward_fn, const char* op) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (GradMode::enabled()) {
    bool needs = false;
    for (const auto& p : parents)
      if (p && p->requires_grad) needs = true;
    if (needs) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined()) fail("bad_argument", "backward() on undefined tensor");
  if (loss.numel() != 1)
    fail("bad_shape", "backward() requires a scalar loss", shape_str(loss.shape()));

  // Iterative post-order topological sort. The graph is a DAG by
  // construction; a temporary mark guards against accidental cycles from
  // hand-built nodes.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> done;
  std::unordered_set<TensorNode*> in_progress;
  struct Frame {
    TensorNode* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  TensorNode* root = loss.raw();
  if (!root->requires_grad) {
    fail("no_grad", "loss does not require grad; nothing to differentiate");
  }
  stack.push_back({root, 0});
  in_progress.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next_parent++].get();
      if (!p || !p->requires_grad || done.count(p)) continue;
      if (in_progress.count(p)) fail("graph_cycle", "cycle detected in autodiff graph");
      stack.push_back({p, 0});
      in_progress.insert(p);
    } else {
      order.push_back(f.node);
      done.insert(f.node);
      in_progress.erase(f.node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    } else {
      n->ensure_grad();  // leaf: guarantee an (accumulated) grad exists
    }
  }
}

}  // namespace sdet
