#pragma once

// Diffusion paths x_t = alpha(t) x0 + sigma(t) eps on t in [0, 1], with t = 0
// the clean data and t = 1 the noise end.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfm/tensor.hpp"

namespace lfm {

enum class PathKind { FlowLinear, ExponentialRefiner, VPDDPM };

std::string to_string(PathKind kind);
PathKind path_kind_from_string(const std::string& name);

struct DiffusionPath {
  PathKind kind = PathKind::FlowLinear;
  /// Smallest non-zero noise level of the exponential path (reached as t -> 0+).
  double sigma_min = 1e-2;
  /// Noise level of the exponential path at t = 1. Must be < 1 when
  /// variance preserving so that alpha(1) > 0.
  double terminal_sigma = 0.99498743710662;  // sqrt(0.99)
  /// Exponential path frame: alpha = sqrt(1 - sigma^2) (true) or alpha = 1.
  bool variance_preserving = true;
  /// VP-DDPM linear beta schedule over `ddpm_steps` discrete steps.
  double beta_min = 1e-4;
  double beta_max = 2e-2;
  double ddpm_steps = 1000;

  static DiffusionPath flow_linear();
  static DiffusionPath exponential(double sigma_min, bool variance_preserving = true);
  static DiffusionPath vpddpm(double beta_min = 1e-4, double beta_max = 2e-2);

  /// Predicting velocity natively avoids dividing by alpha at t = 1.
  bool velocity_native() const { return kind == PathKind::FlowLinear; }
};

void to_json(nlohmann::json& j, const DiffusionPath& p);
void from_json(const nlohmann::json& j, DiffusionPath& p);

struct AlphaSigma {
  double alpha;
  double sigma;
};

/// Throws std::domain_error for t outside [0, 1].
AlphaSigma alpha_sigma(const DiffusionPath& path, double t);

/// d alpha/dt and d sigma/dt (one-sided at the interval ends).
AlphaSigma alpha_sigma_rates(const DiffusionPath& path, double t);

struct DriftDiffusion {
  double f;   // d log alpha / dt
  double g2;  // d sigma^2/dt - 2 f sigma^2
};

/// Throws std::domain_error where alpha(t) = 0.
DriftDiffusion drift_diffusion(const DiffusionPath& path, double t);

/// lambda = sigma / alpha. Throws std::domain_error where alpha(t) = 0.
double lambda_of(const DiffusionPath& path, double t);

/// alpha(t) * x0 + sigma(t) * eps.
template <typename T>
Tensor<T> perturb(const DiffusionPath& path, const Tensor<T>& x0, double t, const Tensor<T>& eps);

enum class GridSpacing { UniformT, UniformLogLambda };

std::string to_string(GridSpacing s);
GridSpacing grid_spacing_from_string(const std::string& name);

struct TimeGrid {
  std::vector<double> knots;  // t_0 = 0 < ... < t_K = 1
  std::size_t steps() const { return knots.empty() ? 0 : knots.size() - 1; }
};

/// K >= 1 steps. UniformLogLambda spaces interior knots evenly in log lambda
/// between lambda(1/K) and lambda(1 - 1/K).
TimeGrid make_grid(const DiffusionPath& path, std::size_t steps,
                   GridSpacing spacing = GridSpacing::UniformT);

}  // namespace lfm
