#include "lfm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace lfm {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<detail::Node<T>>()) {
  node_->data.assign(lfm::numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::Node<T>>()) {
  if (lfm::numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                     std::to_string(lfm::numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, T stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.node_->data) v = static_cast<T>(dist(rng)) * stddev;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, Rng& rng, T lo, T hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.node_->data) v = lo + (hi - lo) * static_cast<T>(dist(rng));
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->data.size() != 1) {
    throw ShapeError("item(): tensor of shape " + to_string(node_->shape) + " is not a scalar");
  }
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (node_->data.size() != 1) {
    throw ShapeError("backward(): loss must be scalar, got shape " + to_string(node_->shape));
  }
  using N = detail::Node<T>;
  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<N*> order;
  std::unordered_set<N*> seen;
  std::vector<std::pair<N*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      N* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior grads are scratch for this pass; leaf grads accumulate.
  for (N* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename T>
static Tensor<T> make_result_impl(Shape shape, std::vector<T> data,
                                  std::vector<std::shared_ptr<detail::Node<T>>> parents,
                                  std::function<void(detail::Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool track = false;
  for (const auto& p : parents) track = track || p->requires_grad;
  if (!track) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents = std::move(parents);
  node.backward = std::move(backward);
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  std::vector<std::shared_ptr<detail::Node<T>>> parents;
  for (const auto* t : inputs) parents.push_back(t->node());
  return make_result_impl<T>(std::move(shape), std::move(data), std::move(parents),
                             std::move(backward));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  std::vector<std::shared_ptr<detail::Node<T>>> parents;
  for (const auto& t : inputs) parents.push_back(t.node());
  return make_result_impl<T>(std::move(shape), std::move(data), std::move(parents),
                             std::move(backward));
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw std::domain_error(what + ": non-finite value at flat index " + std::to_string(i) +
                              " of tensor " + to_string(t.shape()));
    }
  }
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(out));
}

template class Tensor<float>;
template class Tensor<double>;

#define LFM_INSTANTIATE(T)                                                                  \
  template Tensor<T> make_result<T>(Shape, std::vector<T>,                                 \
                                    std::initializer_list<const Tensor<T>*>,               \
                                    std::function<void(detail::Node<T>&)>);                \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,  \
                                    std::function<void(detail::Node<T>&)>);                \
  template bool all_finite<T>(const Tensor<T>&);                                           \
  template void check_finite<T>(const Tensor<T>&, const std::string&);

LFM_INSTANTIATE(float)
LFM_INSTANTIATE(double)
#undef LFM_INSTANTIATE

template Tensor<float> cast<float, double>(const Tensor<double>&);
template Tensor<double> cast<double, float>(const Tensor<float>&);
template Tensor<float> cast<float, float>(const Tensor<float>&);
template Tensor<double> cast<double, double>(const Tensor<double>&);

}  // namespace lfm
