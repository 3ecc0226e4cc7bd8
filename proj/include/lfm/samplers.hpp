#pragma once

// Reverse-process integrators: DDIM, ancestral (lambda-space Euler-Maruyama),
// and first-order Euler on the flow ODE dx = -v dt.

#include <functional>
#include <string>
#include <vector>

#include "lfm/schedules.hpp"
#include "lfm/tensor.hpp"

namespace lfm {

/// What a network predicts. Velocity is v = eps - x0 on every path.
enum class Parameterization { Noise, Velocity, Data };

std::string to_string(Parameterization p);
/// "noise", "velocity" or "data".
Parameterization parameterization_from_string(const std::string& name);

/// Re-expresses a prediction in another parameterization given x_t.
/// Throws std::domain_error where the conversion divides by zero
/// (alpha = 0 from Noise, sigma = 0 from Data).
template <typename T>
Tensor<T> convert(const Tensor<T>& pred, Parameterization from, Parameterization to,
                  const Tensor<T>& x_t, double t, const DiffusionPath& path);

/// x_s = (a_s/a_k) x_k - a_s (s_k/a_k - s_s/a_s) eps_hat, for 0 <= t_s < t_k <= 1.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_k, const Tensor<T>& eps_hat, double t_k, double t_s,
                    const DiffusionPath& path);

/// Standard normal draws of a requested shape.
template <typename T>
using NoiseFn = std::function<Tensor<T>(const Shape&)>;

/// Draws from rng, which must outlive the returned function.
template <typename T>
NoiseFn<T> standard_noise(Rng& rng);

/// x~_s = x~_k - 2 (l_k - l_s) eps_hat + sqrt(l_k^2 - l_s^2) n, x = a x~.
template <typename T>
Tensor<T> ancestral_step(const Tensor<T>& x_k, const Tensor<T>& eps_hat, double t_k, double t_s,
                         const DiffusionPath& path, Rng& rng);
template <typename T>
Tensor<T> ancestral_step(const Tensor<T>& x_k, const Tensor<T>& eps_hat, double t_k, double t_s,
                         const DiffusionPath& path, const NoiseFn<T>& noise);

/// x_{t - dt} = x_t - dt * v_hat. Throws if t - dt < 0.
template <typename T>
Tensor<T> flow_euler_step(const Tensor<T>& x_t, const Tensor<T>& v_hat, double t, double dt);

enum class SamplerMode { DDIM, Ancestral, FlowEuler };

std::string to_string(SamplerMode m);
SamplerMode sampler_mode_from_string(const std::string& name);

template <typename T>
struct Predictor {
  Parameterization param = Parameterization::Velocity;
  /// Network evaluation at (x, t); conditioning is bound by the caller.
  std::function<Tensor<T>(const Tensor<T>& x, double t)> fn;
};

template <typename T>
struct SampleRecord {
  SamplerMode mode = SamplerMode::DDIM;
  std::vector<double> times;         // t_K, ..., t_0 (strictly decreasing)
  std::vector<Tensor<T>> eps_hat;    // eps prediction at times[i], i < K
  std::vector<Tensor<T>> states;     // x at times[i], i <= K
};

template <typename T>
struct SampleResult {
  Tensor<T> x0;
  SampleRecord<T> record;
};

/// Integrates from t = 1 to t = 0 over the grid knots. Steps that start where
/// alpha = 0 use the data-space form a_s x0_hat + s_s eps_hat (the model must
/// then predict velocity or data); ancestral mode falls back to that
/// deterministic step there.
template <typename T>
SampleResult<T> sample(const Predictor<T>& model, const Tensor<T>& x_init,
                       const DiffusionPath& path, const TimeGrid& grid, SamplerMode mode,
                       Rng& rng);
template <typename T>
SampleResult<T> sample(const Predictor<T>& model, const Tensor<T>& x_init,
                       const DiffusionPath& path, const TimeGrid& grid, SamplerMode mode,
                       const NoiseFn<T>& noise);

/// Rebuilds the DDIM output as x~_{l_K} - sum_i eps_i (l_i - l_{i-1}), starting
/// from the highest recorded knot with alpha > 0.
template <typename T>
Tensor<T> multistep_decompose(const SampleRecord<T>& record, const DiffusionPath& path);

}  // namespace lfm
