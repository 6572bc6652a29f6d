#pragma once

// Minimal reverse-mode automatic differentiation over dense double arrays.
//
// A Var is a handle to a node in a dynamically built graph. Operations whose
// inputs all have requires_grad() == false record nothing, so inference does
// not pay for the tape.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace aquadiff::ad {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into its parents.
  std::function<void(Node&)> backward;

  std::size_t size() const { return value.size(); }
  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<double> values);
  static Var constant(Shape shape, double fill = 0.0);
  static Var parameter(Shape shape, std::vector<double> values);
  static Var scalar(double v) { return constant({1}, std::vector<double>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> value() const { return node_->value; }
  std::span<double> mutable_value() { return node_->value; }
  double item() const { return node_->value.at(0); }

  /// Gradient accumulated by backward(); zeros if none has flowed.
  std::span<const double> grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  bool requires_grad() const { return node_->requires_grad; }
  /// Same values, cut from the graph.
  Var detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Seeds d(root)/d(root) = 1 and propagates through the recorded graph.
/// root must hold exactly one element.
void backward(const Var& root);

/// Creates the result node for an op. Parents are recorded only when at least
/// one requires a gradient; `fn` is dropped otherwise.
Var make_result(Shape shape, std::vector<double> value, std::vector<Var> inputs,
                std::function<void(Node&)> fn);

}  // namespace aquadiff::ad
