#include "lfm/samplers.hpp"

#include <cmath>
#include <stdexcept>

#include "lfm/ops.hpp"

namespace lfm {

std::string to_string(Parameterization p) {
  switch (p) {
    case Parameterization::Noise: return "noise";
    case Parameterization::Velocity: return "velocity";
    case Parameterization::Data: return "data";
  }
  return "unknown";
}

std::string to_string(SamplerMode m) {
  switch (m) {
    case SamplerMode::DDIM: return "ddim";
    case SamplerMode::Ancestral: return "ancestral";
    case SamplerMode::FlowEuler: return "flow-euler";
  }
  return "unknown";
}

Parameterization parameterization_from_string(const std::string& name) {
  if (name == "noise") return Parameterization::Noise;
  if (name == "velocity") return Parameterization::Velocity;
  if (name == "data") return Parameterization::Data;
  throw std::invalid_argument("unknown prediction target '" + name + "'");
}

SamplerMode sampler_mode_from_string(const std::string& name) {
  if (name == "ddim") return SamplerMode::DDIM;
  if (name == "ancestral") return SamplerMode::Ancestral;
  if (name == "flow-euler" || name == "flow_euler") return SamplerMode::FlowEuler;
  throw std::invalid_argument("unknown sampler mode '" + name + "'");
}

namespace {

template <typename T>
struct DataNoise {
  Tensor<T> x0, eps;
};

template <typename T>
DataNoise<T> split_prediction(const Tensor<T>& pred, Parameterization from, const Tensor<T>& x,
                              double t, const DiffusionPath& path) {
  if (pred.shape() != x.shape()) {
    throw ShapeError("prediction " + to_string(pred.shape()) + " does not match state " +
                     to_string(x.shape()));
  }
  const auto [a, s] = alpha_sigma(path, t);
  switch (from) {
    case Parameterization::Noise: {
      if (a <= 0.0) {
        throw std::domain_error("noise -> data conversion undefined at t = " + std::to_string(t) +
                                " where alpha = 0");
      }
      return {(x - pred * static_cast<T>(s)) / static_cast<T>(a), pred};
    }
    case Parameterization::Data: {
      if (s <= 0.0) {
        throw std::domain_error("data -> noise conversion undefined at t = " + std::to_string(t) +
                                " where sigma = 0");
      }
      return {pred, (x - pred * static_cast<T>(a)) / static_cast<T>(s)};
    }
    case Parameterization::Velocity: {
      // x = a x0 + s (v + x0)  =>  x0 = (x - s v) / (a + s)
      Tensor<T> x0 = (x - pred * static_cast<T>(s)) / static_cast<T>(a + s);
      return {x0, pred + x0};
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace

template <typename T>
Tensor<T> convert(const Tensor<T>& pred, Parameterization from, Parameterization to,
                  const Tensor<T>& x_t, double t, const DiffusionPath& path) {
  if (from == to) return pred;
  if (path.kind == PathKind::FlowLinear && from == Parameterization::Velocity) {
    // eps = x_t + (1 - t) v, x0 = x_t - t v
    if (to == Parameterization::Noise) return x_t + pred * static_cast<T>(1.0 - t);
    return x_t - pred * static_cast<T>(t);
  }
  if (path.kind == PathKind::FlowLinear && to == Parameterization::Velocity) {
    if (from == Parameterization::Noise) {
      if (t >= 1.0) throw std::domain_error("noise -> velocity undefined at t = 1 on the flow path");
      return (pred - x_t) / static_cast<T>(1.0 - t);
    }
    if (t <= 0.0) throw std::domain_error("data -> velocity undefined at t = 0 on the flow path");
    return (x_t - pred) / static_cast<T>(t);
  }
  const auto dn = split_prediction(pred, from, x_t, t, path);
  switch (to) {
    case Parameterization::Noise: return dn.eps;
    case Parameterization::Data: return dn.x0;
    case Parameterization::Velocity: return dn.eps - dn.x0;
  }
  throw std::logic_error("unreachable");
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& x_k, const Tensor<T>& eps_hat, double t_k, double t_s,
                    const DiffusionPath& path) {
  if (!(t_s < t_k)) {
    throw std::invalid_argument("ddim_step: times must strictly decrease (from " +
                                std::to_string(t_k) + " to " + std::to_string(t_s) + ")");
  }
  const auto [ak, sk] = alpha_sigma(path, t_k);
  const auto [as, ss] = alpha_sigma(path, t_s);
  if (ak <= 0.0) throw std::domain_error("ddim_step: alpha(t_k) = 0");
  const double c_x = as / ak;
  const double c_e = as * (sk / ak - ss / as);
  return x_k * static_cast<T>(c_x) - eps_hat * static_cast<T>(c_e);
}

template <typename T>
Tensor<T> ancestral_step(const Tensor<T>& x_k, const Tensor<T>& eps_hat, double t_k, double t_s,
                         const DiffusionPath& path, Rng& rng) {
  return ancestral_step<T>(x_k, eps_hat, t_k, t_s, path, standard_noise<T>(rng));
}

template <typename T>
Tensor<T> ancestral_step(const Tensor<T>& x_k, const Tensor<T>& eps_hat, double t_k, double t_s,
                         const DiffusionPath& path, const NoiseFn<T>& noise) {
  const double lk = lambda_of(path, t_k);
  const double ls = lambda_of(path, t_s);
  if (lk < ls) {
    throw std::invalid_argument("ancestral_step: lambda must not increase (" + std::to_string(lk) +
                                " -> " + std::to_string(ls) + ")");
  }
  const double ak = alpha_sigma(path, t_k).alpha;
  const double as = alpha_sigma(path, t_s).alpha;
  Tensor<T> xt = x_k / static_cast<T>(ak) - eps_hat * static_cast<T>(2.0 * (lk - ls));
  const double var = (lk - ls) * (lk + ls);
  if (var > 0.0) {
    const Tensor<T> n = noise(x_k.shape());
    if (n.shape() != x_k.shape()) throw ShapeError("ancestral_step: noise has shape " + to_string(n.shape()));
    xt = xt + n * static_cast<T>(std::sqrt(var));
  }
  return xt * static_cast<T>(as);
}

template <typename T>
Tensor<T> flow_euler_step(const Tensor<T>& x_t, const Tensor<T>& v_hat, double t, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("flow_euler_step: dt must be positive");
  if (t - dt < -1e-12) {
    throw std::invalid_argument("flow_euler_step: stepping below t = 0 (t = " + std::to_string(t) +
                                ", dt = " + std::to_string(dt) + ")");
  }
  return x_t - v_hat * static_cast<T>(dt);
}

template <typename T>
NoiseFn<T> standard_noise(Rng& rng) {
  return [&rng](const Shape& shape) { return Tensor<T>::randn(shape, rng); };
}

template <typename T>
SampleResult<T> sample(const Predictor<T>& model, const Tensor<T>& x_init,
                       const DiffusionPath& path, const TimeGrid& grid, SamplerMode mode,
                       Rng& rng) {
  return sample<T>(model, x_init, path, grid, mode, standard_noise<T>(rng));
}

template <typename T>
SampleResult<T> sample(const Predictor<T>& model, const Tensor<T>& x_init,
                       const DiffusionPath& path, const TimeGrid& grid, SamplerMode mode,
                       const NoiseFn<T>& noise) {
  if (grid.steps() == 0) throw std::invalid_argument("sample: empty time grid");
  for (std::size_t i = 0; i + 1 < grid.knots.size(); ++i) {
    if (!(grid.knots[i] < grid.knots[i + 1])) throw std::invalid_argument("sample: grid not increasing");
  }
  if (mode == SamplerMode::FlowEuler && path.kind != PathKind::FlowLinear) {
    throw std::invalid_argument("flow-euler sampling requires the flow_linear path");
  }
  NoGradGuard no_grad;
  SampleResult<T> out;
  auto& rec = out.record;
  rec.mode = mode;
  const std::size_t K = grid.steps();
  for (std::size_t i = 0; i <= K; ++i) rec.times.push_back(grid.knots[K - i]);

  Tensor<T> x = x_init;
  rec.states.push_back(x);
  for (std::size_t i = 0; i < K; ++i) {
    const double tk = rec.times[i], ts = rec.times[i + 1];
    const Tensor<T> pred = model.fn(x, tk);
    if (pred.shape() != x.shape()) {
      throw ShapeError("model output " + to_string(pred.shape()) + " does not match state " +
                       to_string(x.shape()));
    }
    const double ak = alpha_sigma(path, tk).alpha;
    if (mode == SamplerMode::FlowEuler) {
      const Tensor<T> v = convert(pred, model.param, Parameterization::Velocity, x, tk, path);
      rec.eps_hat.push_back(convert(pred, model.param, Parameterization::Noise, x, tk, path));
      x = flow_euler_step(x, v, tk, tk - ts);
    } else if (ak > 0.0) {
      const Tensor<T> eps = convert(pred, model.param, Parameterization::Noise, x, tk, path);
      rec.eps_hat.push_back(eps);
      x = mode == SamplerMode::DDIM ? ddim_step(x, eps, tk, ts, path)
                                    : ancestral_step(x, eps, tk, ts, path, noise);
    } else {
      if (model.param == Parameterization::Noise) {
        throw std::domain_error("sample: a noise-predicting model cannot start where alpha = 0; "
                                "use a path with alpha(1) > 0 or a velocity model");
      }
      const auto dn = split_prediction(pred, model.param, x, tk, path);
      rec.eps_hat.push_back(dn.eps);
      const auto [as, ss] = alpha_sigma(path, ts);
      x = dn.x0 * static_cast<T>(as) + dn.eps * static_cast<T>(ss);
    }
    rec.states.push_back(x);
  }
  out.x0 = x;
  return out;
}

template <typename T>
Tensor<T> multistep_decompose(const SampleRecord<T>& record, const DiffusionPath& path) {
  if (record.mode != SamplerMode::DDIM) {
    throw std::invalid_argument("multistep_decompose: record was produced by " +
                                to_string(record.mode) + ", not ddim");
  }
  const std::size_t K = record.times.size() - 1;
  if (record.eps_hat.size() != K || record.states.size() != K + 1) {
    throw std::invalid_argument("multistep_decompose: inconsistent record lengths");
  }
  // record index j <-> knot K - j; start from the first state with alpha > 0.
  std::size_t j0 = 0;
  while (j0 < K && alpha_sigma(path, record.times[j0]).alpha <= 0.0) ++j0;
  NoGradGuard no_grad;
  const double a_start = alpha_sigma(path, record.times[j0]).alpha;
  Tensor<T> xt = record.states[j0] / static_cast<T>(a_start);
  for (std::size_t j = j0; j < K; ++j) {
    const double dl = lambda_of(path, record.times[j]) - lambda_of(path, record.times[j + 1]);
    xt = xt - record.eps_hat[j] * static_cast<T>(dl);
  }
  return xt * static_cast<T>(alpha_sigma(path, record.times[K]).alpha);
}

#define LFM_INSTANTIATE(T)                                                                      \
  template Tensor<T> convert<T>(const Tensor<T>&, Parameterization, Parameterization,          \
                                const Tensor<T>&, double, const DiffusionPath&);               \
  template Tensor<T> ddim_step<T>(const Tensor<T>&, const Tensor<T>&, double, double,          \
                                  const DiffusionPath&);                                       \
  template Tensor<T> ancestral_step<T>(const Tensor<T>&, const Tensor<T>&, double, double,     \
                                       const DiffusionPath&, Rng&);                            \
  template Tensor<T> ancestral_step<T>(const Tensor<T>&, const Tensor<T>&, double, double,     \
                                       const DiffusionPath&, const NoiseFn<T>&);               \
  template NoiseFn<T> standard_noise<T>(Rng&);                                                 \
  template Tensor<T> flow_euler_step<T>(const Tensor<T>&, const Tensor<T>&, double, double);   \
  template SampleResult<T> sample<T>(const Predictor<T>&, const Tensor<T>&,                    \
                                     const DiffusionPath&, const TimeGrid&, SamplerMode, Rng&); \
  template SampleResult<T> sample<T>(const Predictor<T>&, const Tensor<T>&,                    \
                                     const DiffusionPath&, const TimeGrid&, SamplerMode,       \
                                     const NoiseFn<T>&);                                       \
  template Tensor<T> multistep_decompose<T>(const SampleRecord<T>&, const DiffusionPath&);

LFM_INSTANTIATE(float)
LFM_INSTANTIATE(double)
#undef LFM_INSTANTIATE

}  // namespace lfm
