#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace m3::numcore {

using Real = double;
using Shape = std::vector<std::int64_t>;

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

struct Node;

// Handle to a node of the differentiation graph. Copies share storage.
//
// A tensor created by an op while gradient recording is enabled keeps its
// inputs alive and knows how to push its gradient back into them. Leaves
// created with requires_grad=true are trainable parameters: their gradient
// accumulates across backward() calls until zero_grad().
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const Real> data() const;
  // Only legal on leaves; used by optimizers and initializers.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::int64_t row, std::int64_t col) const;

  bool requires_grad() const;
  // Leaves only. Freezing a parameter keeps ops from computing its gradient.
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  // Reverse-mode sweep from a scalar. Releases the recorded graph; a second
  // call on the same result throws.
  void backward() const;

  // Same values, no graph history, no gradient.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<Real>, std::initializer_list<Tensor>,
                            std::function<void(Node&)>);
  friend Tensor make_result(Shape, std::vector<Real>, const std::vector<Tensor>&,
                            std::function<void(Node&)>);

  std::shared_ptr<Node> node_;
};

struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  bool released = false;
  std::uint64_t visit_stamp = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Gradient buffer of this node, allocated on first use.
  std::span<Real> grad_buffer();
};

// Creates an op result. The backward closure is stored only when recording is
// enabled and at least one input requires a gradient.
Tensor make_result(Shape shape, std::vector<Real> value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward_fn);
Tensor make_result(Shape shape, std::vector<Real> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn);

bool grad_enabled();

// Disables graph recording for its lifetime (target computation, rollouts).
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

}  // namespace m3::numcore
