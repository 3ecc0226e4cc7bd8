#include "lfm/schedules.hpp"

#include <cmath>
#include <stdexcept>

#include "lfm/ops.hpp"

namespace lfm {

std::string to_string(PathKind kind) {
  switch (kind) {
    case PathKind::FlowLinear: return "flow_linear";
    case PathKind::ExponentialRefiner: return "exponential";
    case PathKind::VPDDPM: return "vp_ddpm";
  }
  return "unknown";
}

PathKind path_kind_from_string(const std::string& name) {
  if (name == "flow_linear" || name == "flow") return PathKind::FlowLinear;
  if (name == "exponential" || name == "exp") return PathKind::ExponentialRefiner;
  if (name == "vp_ddpm" || name == "vpddpm") return PathKind::VPDDPM;
  throw std::invalid_argument("unknown diffusion path kind '" + name + "'");
}

DiffusionPath DiffusionPath::flow_linear() { return DiffusionPath{}; }

DiffusionPath DiffusionPath::exponential(double sigma_min, bool vp) {
  if (!(sigma_min > 0.0 && sigma_min < 1.0)) {
    throw std::invalid_argument("exponential path: sigma_min must lie in (0, 1)");
  }
  DiffusionPath p;
  p.kind = PathKind::ExponentialRefiner;
  p.sigma_min = sigma_min;
  p.variance_preserving = vp;
  if (!vp) p.terminal_sigma = 1.0;
  return p;
}

DiffusionPath DiffusionPath::vpddpm(double beta_min, double beta_max) {
  DiffusionPath p;
  p.kind = PathKind::VPDDPM;
  p.beta_min = beta_min;
  p.beta_max = beta_max;
  return p;
}

void to_json(nlohmann::json& j, const DiffusionPath& p) {
  j = nlohmann::json{{"kind", to_string(p.kind)}};
  if (p.kind == PathKind::ExponentialRefiner) {
    j["sigma_min"] = p.sigma_min;
    j["terminal_sigma"] = p.terminal_sigma;
    j["variance_preserving"] = p.variance_preserving;
  }
  if (p.kind == PathKind::VPDDPM) {
    j["beta_range"] = {p.beta_min, p.beta_max};
    j["ddpm_steps"] = p.ddpm_steps;
  }
}

void from_json(const nlohmann::json& j, DiffusionPath& p) {
  p = DiffusionPath{};
  p.kind = path_kind_from_string(j.at("kind").get<std::string>());
  if (p.kind == PathKind::ExponentialRefiner) {
    p.variance_preserving = j.value("variance_preserving", true);
    p = DiffusionPath::exponential(j.value("sigma_min", 1e-2), p.variance_preserving);
    if (j.contains("terminal_sigma")) p.terminal_sigma = j["terminal_sigma"].get<double>();
  }
  if (p.kind == PathKind::VPDDPM) {
    if (j.contains("beta_range")) {
      p.beta_min = j["beta_range"].at(0).get<double>();
      p.beta_max = j["beta_range"].at(1).get<double>();
    }
    p.ddpm_steps = j.value("ddpm_steps", 1000.0);
  }
}

namespace {

void check_t(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::domain_error("diffusion time " + std::to_string(t) + " outside [0, 1]");
  }
}

double exp_sigma(const DiffusionPath& p, double t) {
  if (t <= 0.0) return 0.0;
  return p.terminal_sigma * std::pow(p.sigma_min, 1.0 - t);
}

// Integrated VP-DDPM rate: B(t) = N (beta_min t + (beta_max - beta_min) t^2 / 2).
double ddpm_integral(const DiffusionPath& p, double t) {
  return p.ddpm_steps * (p.beta_min * t + 0.5 * (p.beta_max - p.beta_min) * t * t);
}
double ddpm_rate(const DiffusionPath& p, double t) {
  return p.ddpm_steps * (p.beta_min + (p.beta_max - p.beta_min) * t);
}

}  // namespace

AlphaSigma alpha_sigma(const DiffusionPath& path, double t) {
  check_t(t);
  switch (path.kind) {
    case PathKind::FlowLinear:
      return {1.0 - t, t};
    case PathKind::ExponentialRefiner: {
      const double s = exp_sigma(path, t);
      return {path.variance_preserving ? std::sqrt(std::max(0.0, 1.0 - s * s)) : 1.0, s};
    }
    case PathKind::VPDDPM: {
      const double a = std::exp(-0.5 * ddpm_integral(path, t));
      return {a, std::sqrt(std::max(0.0, 1.0 - a * a))};
    }
  }
  throw std::logic_error("unreachable");
}

AlphaSigma alpha_sigma_rates(const DiffusionPath& path, double t) {
  check_t(t);
  switch (path.kind) {
    case PathKind::FlowLinear:
      return {-1.0, 1.0};
    case PathKind::ExponentialRefiner: {
      const double s = exp_sigma(path, t);
      const double ds = -std::log(path.sigma_min) * s;
      if (!path.variance_preserving) return {0.0, ds};
      const double a = std::sqrt(std::max(0.0, 1.0 - s * s));
      if (a == 0.0) throw std::domain_error("exponential path: d alpha/dt undefined where alpha = 0");
      return {-s * ds / a, ds};
    }
    case PathKind::VPDDPM: {
      const auto [a, s] = alpha_sigma(path, t);
      const double da = -0.5 * ddpm_rate(path, t) * a;
      if (s == 0.0) return {da, std::sqrt(ddpm_rate(path, t))};  // sigma ~ sqrt(N beta t) near 0
      return {da, -a * da / s};
    }
  }
  throw std::logic_error("unreachable");
}

DriftDiffusion drift_diffusion(const DiffusionPath& path, double t) {
  const auto [a, s] = alpha_sigma(path, t);
  if (a <= 0.0) {
    throw std::domain_error("drift undefined at t = " + std::to_string(t) + " where alpha = 0");
  }
  const auto [da, ds] = alpha_sigma_rates(path, t);
  const double f = da / a;
  const double dsig2 = 2.0 * s * ds;
  return {f, dsig2 - 2.0 * f * s * s};
}

double lambda_of(const DiffusionPath& path, double t) {
  const auto [a, s] = alpha_sigma(path, t);
  if (a <= 0.0) {
    throw std::domain_error("lambda undefined at t = " + std::to_string(t) + " where alpha = 0");
  }
  return s / a;
}

template <typename T>
Tensor<T> perturb(const DiffusionPath& path, const Tensor<T>& x0, double t, const Tensor<T>& eps) {
  if (x0.shape() != eps.shape()) {
    throw ShapeError("perturb: x0 " + to_string(x0.shape()) + " and noise " +
                     to_string(eps.shape()) + " differ");
  }
  const auto [a, s] = alpha_sigma(path, t);
  return x0 * static_cast<T>(a) + eps * static_cast<T>(s);
}

std::string to_string(GridSpacing s) {
  return s == GridSpacing::UniformT ? "uniform-t" : "uniform-log-lambda";
}

GridSpacing grid_spacing_from_string(const std::string& name) {
  if (name == "uniform-t") return GridSpacing::UniformT;
  if (name == "uniform-log-lambda" || name == "uniform-lambda-log") return GridSpacing::UniformLogLambda;
  throw std::invalid_argument("unknown grid spacing '" + name + "'");
}

TimeGrid make_grid(const DiffusionPath& path, std::size_t steps, GridSpacing spacing) {
  if (steps == 0) throw std::invalid_argument("time grid needs at least one step");
  TimeGrid g;
  g.knots.resize(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) g.knots[i] = double(i) / double(steps);
  g.knots.back() = 1.0;
  if (spacing == GridSpacing::UniformT || steps < 3) return g;

  const double lo = std::log(lambda_of(path, 1.0 / double(steps)));
  const double hi = std::log(lambda_of(path, 1.0 - 1.0 / double(steps)));
  for (std::size_t i = 1; i < steps; ++i) {
    const double target = lo + (hi - lo) * double(i - 1) / double(steps - 2);
    // lambda is increasing in t, so bisect on log lambda.
    double a = 1.0 / double(steps), b = 1.0 - 1.0 / double(steps);
    for (int it = 0; it < 200; ++it) {
      const double m = 0.5 * (a + b);
      (std::log(lambda_of(path, m)) < target ? a : b) = m;
    }
    g.knots[i] = 0.5 * (a + b);
  }
  return g;
}

template Tensor<float> perturb<float>(const DiffusionPath&, const Tensor<float>&, double, const Tensor<float>&);
template Tensor<double> perturb<double>(const DiffusionPath&, const Tensor<double>&, double, const Tensor<double>&);

}  // namespace lfm
