#pragma once

// Layers, parameter bookkeeping, and the Adam optimizer.

#include <string>
#include <utility>
#include <vector>

#include "lfm/ops.hpp"
#include "lfm/serialize.hpp"
#include "lfm/tensor.hpp"

namespace lfm::nn {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  /// Appends (prefix + name, handle) for every trainable tensor.
  virtual void collect(ParamList<T>& out, const std::string& prefix) const = 0;

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out, "");
    return out;
  }
  std::size_t parameter_count() const;
  void zero_grad();
  void set_requires_grad(bool on);
};

/// Float copies of every parameter, keyed by name.
template <typename T>
NamedTensors export_params(const Module<T>& m);
/// Overwrites parameters in place; names and shapes must match exactly.
template <typename T>
void import_params(Module<T>& m, const NamedTensors& tensors);

template <typename T>
class Linear : public Module<T> {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const override;
  /// Sets weight and bias to zero (adaLN / output-head convention).
  void zero_init();

  Tensor<T> weight;  // (in, out)
  Tensor<T> bias;    // (out) or undefined
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t width, bool affine = true);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const override;

  Tensor<T> gamma, beta;
};

template <typename T>
class Conv : public Module<T> {
 public:
  Conv() = default;
  Conv(std::vector<std::size_t> kernel, std::size_t cin, std::size_t cout, ConvGeometry geom,
       Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const override;

  Tensor<T> weight;  // (K..., Cin, Cout)
  Tensor<T> bias;    // (Cout)
  ConvGeometry geom;
};

template <typename T>
class ConvTranspose : public Module<T> {
 public:
  ConvTranspose() = default;
  ConvTranspose(std::vector<std::size_t> kernel, std::size_t cin, std::size_t cout,
                ConvGeometry geom, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, const std::vector<std::size_t>& out_extents) const;
  void collect(ParamList<T>& out, const std::string& prefix) const override;

  Tensor<T> weight;  // (K..., Cout, Cin)
  Tensor<T> bias;    // (Cout)
  ConvGeometry geom;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables global-norm clipping
};

/// Adam with decoupled weight decay.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig cfg);
  /// Applies one update with learning rate `lr` and zeroes the gradients.
  /// Returns the pre-clipping global gradient norm.
  double step(double lr);
  void zero_grad();
  std::size_t steps_taken() const { return t_; }

 private:
  ParamList<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Cosine decay from `base` to 0 over `total` steps after a linear warmup.
double cosine_lr(double base, std::size_t step, std::size_t total, std::size_t warmup);

}  // namespace lfm::nn
