#include "affect/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

#include <fmt/format.h>

#include "affect/error.hpp"

namespace affect::num {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > kMaxRank) {
    throw ShapeError(fmt::format("tensor rank must be 1..{}, got {}", kMaxRank, shape.size()));
  }
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

void check_finite(const std::string& op, std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(fmt::format("{}: non-finite value {} at flat index {}", op, values[i], i));
    }
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  std::vector<double> values(num::numel(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != num::numel(shape)) {
    throw ShapeError(fmt::format("{} values do not fill shape {}", values.size(), to_string(shape)));
  }
  check_finite("tensor", values);
  auto node = std::make_shared<Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError(fmt::format("axis {} out of range for shape {}", axis, to_string(shape())));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data() is only available on leaf tensors");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::is_leaf() const { return node_->inputs.empty(); }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

const std::string& Tensor::op() const { return node_->op; }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

std::vector<const Node*> Tensor::topological_order() const {
  std::vector<const Node*> order;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS; graphs can be deep enough to matter for recursion.
  std::vector<std::pair<const Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Node* child = node->inputs[next++].node_.get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + to_string(shape()));
  if (!requires_grad()) throw std::logic_error("backward() on a tensor that does not require grad");

  auto order = topological_order();
  for (const Node* cnode : order) {
    auto* node = const_cast<Node*>(cnode);
    if (!node->requires_grad) continue;
    if (!node->inputs.empty()) {
      node->grad.assign(node->value.size(), 0.0);
    } else if (node->grad.size() != node->value.size()) {
      node->grad.assign(node->value.size(), 0.0);
    }
  }
  node_->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = const_cast<Node*>(*it);
    if (!node->backward) continue;
    BackwardContext ctx{node->value, node->grad, {}};
    ctx.input_grads.reserve(node->inputs.size());
    for (auto& in : node->inputs) {
      if (in.node_->requires_grad) {
        ctx.input_grads.emplace_back(in.node_->grad);
      } else {
        ctx.input_grads.emplace_back();
      }
    }
    node->backward(ctx);
  }

  // Release intermediate buffers; only leaves keep accumulated gradients.
  for (const Node* cnode : order) {
    auto* node = const_cast<Node*>(cnode);
    if (!node->inputs.empty()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

Tensor Tensor::record(std::string op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      BackwardFn backward) {
  validate_shape(shape);
  if (values.size() != num::numel(shape)) {
    throw ShapeError(fmt::format("{}: {} values do not fill shape {}", op, values.size(), to_string(shape)));
  }
  check_finite(op, values);
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace affect::num
