#include "aquadiff/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>

namespace aquadiff::ad {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Var Var::constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape_size(shape)) {
    throw std::invalid_argument("constant: value count does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Var(std::move(node));
}

Var Var::constant(Shape shape, double fill) {
  std::vector<double> values(shape_size(shape), fill);
  return constant(std::move(shape), std::move(values));
}

Var Var::parameter(Shape shape, std::vector<double> values) {
  Var v = constant(std::move(shape), std::move(values));
  v.node_->requires_grad = true;
  return v;
}

Var Var::detach() const { return constant(node_->shape, node_->value); }

namespace {
thread_local bool grad_mode = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }
bool grad_enabled() { return grad_mode; }

Var make_result(Shape shape, std::vector<double> value, std::vector<Var> inputs,
                std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  if (!grad_mode) inputs.clear();
  for (const Var& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Var& in : inputs) node->parents.push_back(in.shared());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (root.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are recomputed on every call; leaves accumulate.
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

}  // namespace aquadiff::ad
