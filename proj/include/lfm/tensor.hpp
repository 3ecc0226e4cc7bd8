#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Ops build new nodes and, when
// any input tracks gradients (and grad mode is on), record a backward closure
// that accumulates into the parents. Values are never mutated by ops; the only
// in-place writes are explicit (mutable_data, optimizer updates, zero_grad).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lfm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thread-local switch for graph recording.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

using Rng = std::mt19937_64;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // null for leaves

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
  bool is_leaf() const { return !backward; }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1));
  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// In-place access. Only for leaves and freshly built values.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t flat) const { return node_->data.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Accumulates d(this)/d(leaf) into every tracked leaf. `this` must be scalar.
  void backward() const;

  /// Same values, no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const NodePtr& node() const { return node_; }
  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  NodePtr node_;
};

/// Builds a result node; records `backward` only if grad mode is on and some
/// input requires gradients.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(detail::Node<T>&)> backward);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(detail::Node<T>&)> backward);

/// Throws std::domain_error naming `what` if any element is NaN or infinite.
template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what);

template <typename T>
bool all_finite(const Tensor<T>& t);

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t);

}  // namespace lfm
