#include "spiketim/tensor.hpp"

#include <sstream>
#include <unordered_set>
#include <utility>

#include "spiketim/errors.hpp"

namespace spiketim {

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_op_count = 0;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

std::uint64_t op_count() { return g_op_count; }
void reset_op_count() { g_op_count = 0; }

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  node_ = std::make_shared<NodeType>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::full(Shape shape, Real value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::scalar(Real value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<Real>{value}, requires_grad);
}

template <typename Real>
std::size_t Tensor<Real>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape()));
  }
  return node_->shape[axis];
}

template <typename Real>
std::span<Real> Tensor<Real>::mutable_data() {
  if (!node_->is_leaf()) throw ContractError("cannot write into a non-leaf tensor");
  return node_->data;
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() needs a single-element tensor, got shape " +
                         shape_to_string(shape()));
  }
  return node_->data[0];
}

template <typename Real>
Tensor<Real>& Tensor<Real>::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
  return *this;
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

template <typename Real>
Tensor<Real> Tensor<Real>::clone() const {
  return Tensor(node_->shape, node_->data, node_->requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::from_node(std::shared_ptr<NodeType> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename Real>
void Tensor<Real>::backward() const {
  if (!defined() || numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (defined() ? shape_to_string(shape()) : std::string("<undefined>")));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward() on a tensor that is not connected to any parameter");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<NodeType*> order;
  std::unordered_set<const NodeType*> visited;
  std::vector<std::pair<NodeType*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeType* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), Real(0));
  }
  node_->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType* node = *it;
    if (!node->is_leaf() && node->backward) node->backward(*node);
  }
  for (auto* node : order) {
    if (!node->is_leaf()) std::vector<Real>().swap(node->grad);
  }
}

template <typename Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> data,
                         const std::vector<Tensor<Real>>& inputs,
                         std::function<void(detail::Node<Real>&)> backward) {
  ++g_op_count;
  auto node = std::make_shared<detail::Node<Real>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (shape_numel(node->shape) != node->data.size()) {
    throw DimensionError("op produced " + std::to_string(node->data.size()) +
                         " values for shape " + shape_to_string(node->shape));
  }
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const auto& input : inputs) needs_grad = needs_grad || input.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& input : inputs) node->parents.push_back(input.node());
    node->backward = std::move(backward);
  }
  return Tensor<Real>::from_node(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, const std::vector<Tensor<float>>&,
                                   std::function<void(detail::Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>,
                                    const std::vector<Tensor<double>>&,
                                    std::function<void(detail::Node<double>&)>);

}  // namespace spiketim
