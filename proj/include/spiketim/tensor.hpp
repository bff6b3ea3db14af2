#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spiketim {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

// One vertex of the define-by-run graph. `backward` reads `grad` of the node
// it is attached to and accumulates into the parents' `grad`.
template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<Real>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
    return grad;
  }
};

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
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

// Number of op results produced on this thread since the last reset.
std::uint64_t op_count();
void reset_op_count();

template <typename Real>
class Tensor {
 public:
  using value_type = Real;
  using NodeType = detail::Node<Real>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const Real> data() const { return node_->data; }
  // Writable storage. Only leaves may be written; interior values belong to
  // the graph that produced them.
  std::span<Real> mutable_data();
  Real item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Same values, cut from the graph.
  Tensor detach() const;
  // Deep copy as a fresh leaf.
  Tensor clone() const;

  // Reverse-mode sweep from this scalar. Leaf gradients are summed into any
  // existing accumulator.
  void backward() const;

  const std::shared_ptr<NodeType>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<NodeType> node);

 private:
  std::shared_ptr<NodeType> node_;
};

// Builds an op result. Records `backward` and the graph edges only when grad
// mode is on and some input requires a gradient.
template <typename Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> data,
                         const std::vector<Tensor<Real>>& inputs,
                         std::function<void(detail::Node<Real>&)> backward);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace spiketim
