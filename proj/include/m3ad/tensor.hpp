#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace m3ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents. Empty for leaves.
  std::function<void(Node&)> backward;

  std::span<double> grad_buffer();
};

}  // namespace detail

/// Handle to a node of the differentiation graph. Copies share the node.
///
/// Values are double precision, row-major. A tensor that requires a gradient
/// keeps its parents alive until the handle is dropped; `backward` fills the
/// grads of every requires-grad leaf reachable from a scalar loss, adding to
/// whatever is already stored there.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Only meaningful on leaves; mutating an interior value does not
  // invalidate anything downstream.
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient, or an empty span if none has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  // Same values, detached from the graph.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Build an interior node. `parents` that do not require a gradient are
  // dropped; if none remain the result is a constant and `fn` is discarded.
  static Tensor make(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                     std::function<void(detail::Node&)> fn, const char* op);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode pass from a scalar loss. Interior gradients are recomputed
/// from scratch on every call; leaf gradients accumulate until `zero_grad`.
void backward(const Tensor& loss);

}  // namespace m3ad
