#include "m3/numcore/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace m3::numcore {

namespace {
thread_local bool t_grad_enabled = true;

std::shared_ptr<Node> new_leaf(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->leaf = true;
  return node;
}
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::span<Real> Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), Real{0});
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real{0}, requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(new_leaf(std::move(shape), std::vector<Real>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(Real value) { return from({}, {value}); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->value.size()); }

std::span<const Real> Tensor::data() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->value;
}

std::span<Real> Tensor::mutable_data() {
  if (!node_) throw std::logic_error("use of undefined tensor");
  if (!node_->leaf) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->value;
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Real Tensor::at(std::int64_t row, std::int64_t col) const {
  const auto& s = shape();
  if (s.size() != 2) throw ShapeError("at(row, col) needs a matrix, got " + shape_str(s));
  return node_->value[static_cast<std::size_t>(row * s[1] + col)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool on) {
  if (!node_ || !node_->leaf) throw std::logic_error("set_requires_grad() is only legal on leaves");
  node_->requires_grad = on;
}

bool Tensor::is_leaf() const { return node_ && node_->leaf; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->grad;
}

std::span<Real> Tensor::mutable_grad() {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), Real{0});
}

void Tensor::backward() const {
  if (!node_) throw std::logic_error("backward() on undefined tensor");
  if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (node_->released) throw std::logic_error("backward() called twice on the same graph without reset");
  if (!node_->requires_grad) {
    node_->released = true;
    return;
  }

  // Iterative post-order DFS gives a topological order of the interior nodes.
  // Nodes are marked with a per-sweep stamp instead of a visited set.
  static thread_local std::uint64_t sweep = 0;
  const std::uint64_t stamp = ++sweep;
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  node_->visit_stamp = stamp;
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !p->leaf && p->visit_stamp != stamp) {
        p->visit_stamp = stamp;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += Real{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->leaf) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    n->released = true;
    if (n != node_.get()) n->grad.clear();
  }
}

Tensor Tensor::detach() const {
  return Tensor(new_leaf(shape(), node_->value, false));
}

Tensor make_result(Shape shape, std::vector<Real> value, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  return make_result(std::move(shape), std::move(value), std::vector<Tensor>(inputs), std::move(backward_fn));
}

Tensor make_result(Shape shape, std::vector<Real> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const auto& in : inputs) {
        if (in.defined()) node->parents.push_back(in.node_ptr());
      }
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace m3::numcore
