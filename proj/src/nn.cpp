#include "lfm/nn.hpp"

#include <cmath>
#include <map>
#include <numbers>

namespace lfm::nn {

template <typename T>
std::size_t Module<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : parameters()) n += p.numel();
  return n;
}

template <typename T>
void Module<T>::zero_grad() {
  for (auto& [name, p] : parameters()) p.zero_grad();
}

template <typename T>
void Module<T>::set_requires_grad(bool on) {
  for (auto& [name, p] : parameters()) p.set_requires_grad(on);
}

template <typename T>
NamedTensors export_params(const Module<T>& m) {
  NamedTensors out;
  for (const auto& [name, p] : m.parameters()) out.emplace_back(name, cast<float>(p));
  return out;
}

template <typename T>
void import_params(Module<T>& m, const NamedTensors& tensors) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  auto params = m.parameters();
  if (params.size() != tensors.size()) {
    throw FormatError("parameter count mismatch: model has " + std::to_string(params.size()) +
                      " tensors, checkpoint has " + std::to_string(tensors.size()));
  }
  for (auto& [name, p] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
    if (it->second->shape() != p.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + to_string(it->second->shape()) +
                        " in checkpoint but " + to_string(p.shape()) + " in model");
    }
    auto dst = p.mutable_data();
    auto src = it->second->data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  const T bound = T(1) / std::sqrt(T(in));
  weight = Tensor<T>::uniform({in, out}, rng, -bound, bound).set_requires_grad(true);
  if (with_bias) bias = Tensor<T>::zeros({out}).set_requires_grad(true);
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> y = matmul(x, weight);
  return bias.defined() ? y + bias : y;
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + "weight", weight);
  if (bias.defined()) out.emplace_back(prefix + "bias", bias);
}

template <typename T>
void Linear<T>::zero_init() {
  for (auto& v : weight.mutable_data()) v = T(0);
  if (bias.defined()) {
    for (auto& v : bias.mutable_data()) v = T(0);
  }
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t width, bool affine) {
  if (affine) {
    gamma = Tensor<T>::ones({width}).set_requires_grad(true);
    beta = Tensor<T>::zeros({width}).set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> LayerNorm<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> y = layer_norm(x, T(1e-5));
  return gamma.defined() ? y * gamma + beta : y;
}

template <typename T>
void LayerNorm<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  if (!gamma.defined()) return;
  out.emplace_back(prefix + "gamma", gamma);
  out.emplace_back(prefix + "beta", beta);
}

template <typename T>
Conv<T>::Conv(std::vector<std::size_t> kernel, std::size_t cin, std::size_t cout,
              ConvGeometry g, Rng& rng)
    : geom(std::move(g)) {
  std::size_t fan_in = cin;
  for (auto k : kernel) fan_in *= k;
  Shape shape = kernel;
  shape.push_back(cin);
  shape.push_back(cout);
  const T bound = T(1) / std::sqrt(T(fan_in));
  weight = Tensor<T>::uniform(shape, rng, -bound, bound).set_requires_grad(true);
  bias = Tensor<T>::zeros({cout}).set_requires_grad(true);
}

template <typename T>
Tensor<T> Conv<T>::operator()(const Tensor<T>& x) const {
  return conv(x, weight, geom) + bias;
}

template <typename T>
void Conv<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + "weight", weight);
  out.emplace_back(prefix + "bias", bias);
}

template <typename T>
ConvTranspose<T>::ConvTranspose(std::vector<std::size_t> kernel, std::size_t cin,
                                std::size_t cout, ConvGeometry g, Rng& rng)
    : geom(std::move(g)) {
  std::size_t fan_in = cin;
  for (auto k : kernel) fan_in *= k;
  Shape shape = kernel;
  shape.push_back(cout);
  shape.push_back(cin);
  // Each output receives roughly prod(K)/prod(stride) taps.
  std::size_t stride_prod = 1;
  for (auto s : geom.stride) stride_prod *= s;
  const T bound = T(1) / std::sqrt(T(fan_in) / T(stride_prod));
  weight = Tensor<T>::uniform(shape, rng, -bound, bound).set_requires_grad(true);
  bias = Tensor<T>::zeros({cout}).set_requires_grad(true);
}

template <typename T>
Tensor<T> ConvTranspose<T>::operator()(const Tensor<T>& x,
                                       const std::vector<std::size_t>& out_extents) const {
  return conv_transpose(x, weight, geom, out_extents) + bias;
}

template <typename T>
void ConvTranspose<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + "weight", weight);
  out.emplace_back(prefix + "bias", bias);
}

template <typename T>
Adam<T>::Adam(ParamList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

template <typename T>
double Adam<T>::step(double lr) {
  double sq = 0.0;
  for (auto& [name, p] : params_) {
    if (!p.has_grad()) continue;
    for (T g : p.mutable_grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    if (!p.has_grad()) continue;
    auto g = p.mutable_grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = double(g[j]) * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double upd = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      w[j] = static_cast<T>(double(w[j]) * (1.0 - lr * cfg_.weight_decay) - lr * upd);
    }
    p.zero_grad();
  }
  return norm;
}

double cosine_lr(double base, std::size_t step, std::size_t total, std::size_t warmup) {
  if (warmup > 0 && step < warmup) return base * double(step + 1) / double(warmup);
  if (total <= warmup) return base;
  const double progress = double(step - warmup) / double(total - warmup);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

#define LFM_INSTANTIATE(T)                                                  \
  template class Module<T>;                                                 \
  template class Linear<T>;                                                 \
  template class LayerNorm<T>;                                              \
  template class Conv<T>;                                                   \
  template class ConvTranspose<T>;                                          \
  template class Adam<T>;                                                   \
  template NamedTensors export_params<T>(const Module<T>&);                 \
  template void import_params<T>(Module<T>&, const NamedTensors&);

LFM_INSTANTIATE(float)
LFM_INSTANTIATE(double)
#undef LFM_INSTANTIATE

}  // namespace lfm::nn
