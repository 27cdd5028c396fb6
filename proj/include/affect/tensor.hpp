#pragma once

// Dense rank-1..3 tensors of doubles with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Ops create new nodes and, when
// any input requires a gradient, record the inputs and a backward rule on the
// output. backward() walks the recorded graph in reverse topological order,
// visiting every node once; gradients are summed across fan-out. Leaf
// gradients persist until zero_grad().

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace affect::num {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 3;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// What a backward rule sees: the node's forward value and incoming gradient,
/// and one gradient buffer per input (empty when that input needs no gradient).
struct BackwardContext {
  std::span<const double> value;
  std::span<const double> grad;
  std::vector<std::span<double>> input_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

struct Node;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// In-place access for leaves only (parameters, optimizer updates, gradcheck perturbation).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Seeds d(self)/d(self) = 1; self must hold a single element.
  void backward() const;

  /// Fresh leaf holding a copy of the values, detached from any graph.
  Tensor clone(bool requires_grad = false) const;

  const std::string& op() const;

  /// Nodes reachable from this tensor, inputs before consumers, each once.
  std::vector<const Node*> topological_order() const;

  /// Builds a new graph node. Used by every primitive op; exposed so tests and
  /// extensions can register their own primitives. `backward` is dropped when
  /// no input requires a gradient. Throws NumericError on non-finite values.
  static Tensor record(std::string op, Shape shape, std::vector<double> values,
                       std::vector<Tensor> inputs, BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

struct Node {
  std::string op;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace affect::num
