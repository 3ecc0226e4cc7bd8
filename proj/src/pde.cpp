#include "lfm/pde.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "lfm/fft.hpp"
#include "lfm/serialize.hpp"
#include "lfm/util.hpp"

namespace lfm::pde {

using fft::Complex;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::size_t Trajectory::points() const {
  std::size_t p = 1;
  for (auto e : extents) p *= e;
  return p;
}

std::span<const double> Trajectory::frame(std::size_t m) const {
  if (m >= frames) throw std::out_of_range("frame " + std::to_string(m) + " of " + std::to_string(frames));
  return {data.data() + m * frame_size(), frame_size()};
}

std::span<double> Trajectory::frame(std::size_t m) {
  if (m >= frames) throw std::out_of_range("frame " + std::to_string(m) + " of " + std::to_string(frames));
  return {data.data() + m * frame_size(), frame_size()};
}

void Trajectory::validate(std::size_t min_frames) const {
  if (extents.empty() || extents.size() != domain.dim) throw std::invalid_argument("trajectory: extents do not match domain dimension");
  if (channels == 0) throw std::invalid_argument("trajectory: zero channels");
  if (!(dt > 0)) throw std::invalid_argument("trajectory: dt must be positive");
  if (data.size() != frames * frame_size()) throw std::invalid_argument("trajectory: data size does not match shape");
  if (frames < min_frames) {
    throw std::invalid_argument("trajectory: " + std::to_string(frames) + " frames, need at least " +
                                std::to_string(min_frames));
  }
  for (double v : data)
    if (!std::isfinite(v)) throw std::invalid_argument("trajectory: non-finite value");
}

namespace {

void check_grid(std::size_t n, std::size_t frames, double dt) {
  if (!fft::is_power_of_two(n) || n < 4) throw std::invalid_argument("grid size must be a power of two >= 4, got " + std::to_string(n));
  if (frames == 0) throw std::invalid_argument("at least one frame is required");
  if (!(dt > 0)) throw std::invalid_argument("dt must be positive");
}

Trajectory blank(std::size_t dim, std::size_t n, std::size_t frames, double dt, std::vector<double> xi) {
  Trajectory t;
  t.extents.assign(dim, n);
  t.channels = 1;
  t.frames = frames;
  t.dt = dt;
  t.xi = std::move(xi);
  t.domain = codec::Domain{dim, kTwoPi, true};
  t.data.assign(frames * t.frame_size(), 0.0);
  return t;
}

// Smooth random field: white noise filtered by exp(-|k|^2 / (2 k0^2)),
// scaled to unit RMS about a zero mean.
std::vector<double> smooth_field2d(std::size_t n, double k0, Rng& rng) {
  std::normal_distribution<double> g;
  std::vector<Complex> s(n * n);
  for (auto& v : s) v = g(rng);
  fft::transform2d(s, n, n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double kx = fft::wavenumber(i, n), ky = fft::wavenumber(j, n);
      s[i * n + j] *= (i == 0 && j == 0) ? 0.0 : std::exp(-(kx * kx + ky * ky) / (2 * k0 * k0));
    }
  fft::transform2d(s, n, n, true);
  std::vector<double> out(n * n);
  double ss = 0;
  for (std::size_t i = 0; i < n * n; ++i) {
    out[i] = s[i].real();
    ss += out[i] * out[i];
  }
  const double rms = std::sqrt(ss / double(n * n));
  for (auto& v : out) v /= rms;
  return out;
}

void ensure_finite(std::span<const double> x, const char* what, std::size_t frame) {
  for (double v : x)
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(what) + ": solution became non-finite at frame " + std::to_string(frame) +
                               "; reduce dt");
    }
}

}  // namespace

Trajectory gen_heat2d(double nu, std::size_t n, std::size_t frames, double dt, std::uint64_t seed) {
  if (nu < 0) throw std::invalid_argument("gen_heat2d: viscosity must be non-negative, got " + std::to_string(nu));
  check_grid(n, frames, dt);
  Rng rng = derive_rng(seed, 0);
  Trajectory t = blank(2, n, frames, dt, {nu});
  auto u0 = smooth_field2d(n, 4.0, rng);
  const double offset = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  for (auto& v : u0) v += offset;

  auto spec = fft::forward_real2d(u0, n, n);
  std::vector<double> decay(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double kx = fft::wavenumber(i, n), ky = fft::wavenumber(j, n);
      decay[i * n + j] = std::exp(-nu * (kx * kx + ky * ky) * dt);
    }
  for (std::size_t m = 0; m < frames; ++m) {
    if (m > 0)
      for (std::size_t i = 0; i < n * n; ++i) spec[i] *= decay[i];
    const auto u = fft::inverse_real2d(spec, n, n);
    std::copy(u.begin(), u.end(), t.frame(m).begin());
  }
  return t;
}

Trajectory gen_burgers1d(double nu, std::size_t n, std::size_t frames, double dt, std::uint64_t seed,
                         std::size_t substeps) {
  if (nu < 0) throw std::invalid_argument("gen_burgers1d: viscosity must be non-negative");
  check_grid(n, frames, dt);
  if (substeps == 0) throw std::invalid_argument("gen_burgers1d: substeps must be positive");
  Rng rng = derive_rng(seed, 0);
  Trajectory t = blank(1, n, frames, dt, {nu});
  const double dx = kTwoPi / double(n);
  const double h = dt / double(substeps);
  const std::size_t half = n / 2 + 1;
  const long kcut = long(n) / 3;

  std::vector<double> u(n);
  {
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> phase(0.0, kTwoPi), offset(-0.3, 0.3);
    const double mean = offset(rng);
    std::vector<double> amp(5), ph(5);
    for (int k = 1; k <= 4; ++k) {
      amp[k] = 0.5 * g(rng) / k;
      ph[k] = phase(rng);
    }
    for (std::size_t i = 0; i < n; ++i) {
      u[i] = mean;
      for (int k = 1; k <= 4; ++k) u[i] += amp[k] * std::cos(k * dx * double(i) + ph[k]);
    }
  }
  if (nu * double(kcut * kcut) * h > 2.5) {
    throw CflError("gen_burgers1d: viscous stability limit exceeded (nu k_max^2 dt = " +
                   std::to_string(nu * double(kcut * kcut) * h) + " > 2.5); use a smaller dt or more substeps");
  }

  auto dealias = [&](std::vector<Complex>& s) {
    for (std::size_t k = 0; k < half; ++k)
      if (long(k) > kcut) s[k] = 0.0;
  };
  auto rhs = [&](const std::vector<Complex>& s) {
    const auto w = fft::inverse_real(s, n);
    double umax = 0;
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) {
      sq[i] = w[i] * w[i];
      umax = std::max(umax, std::abs(w[i]));
    }
    if (umax * h / dx > 1.0) {
      throw CflError("gen_burgers1d: CFL number max|u| dt/dx = " + std::to_string(umax * h / dx) +
                     " exceeds 1; use a smaller dt or more substeps");
    }
    auto f = fft::forward_real(sq);
    std::vector<Complex> out(half);
    for (std::size_t k = 0; k < half; ++k) {
      const double kk = double(k);
      out[k] = Complex(0.0, -0.5 * kk) * f[k] - nu * kk * kk * s[k];
    }
    dealias(out);
    return out;
  };

  auto s = fft::forward_real(u);
  dealias(s);
  std::vector<Complex> tmp(half);
  for (std::size_t m = 0; m < frames; ++m) {
    if (m > 0) {
      for (std::size_t step = 0; step < substeps; ++step) {
        const auto k1 = rhs(s);
        for (std::size_t k = 0; k < half; ++k) tmp[k] = s[k] + 0.5 * h * k1[k];
        const auto k2 = rhs(tmp);
        for (std::size_t k = 0; k < half; ++k) tmp[k] = s[k] + 0.5 * h * k2[k];
        const auto k3 = rhs(tmp);
        for (std::size_t k = 0; k < half; ++k) tmp[k] = s[k] + h * k3[k];
        const auto k4 = rhs(tmp);
        for (std::size_t k = 0; k < half; ++k) s[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
      }
    }
    const auto w = fft::inverse_real(s, n);
    ensure_finite(w, "gen_burgers1d", m);
    std::copy(w.begin(), w.end(), t.frame(m).begin());
  }
  return t;
}

void velocity_from_vorticity(std::span<const double> omega, std::size_t n, std::vector<double>& u,
                             std::vector<double>& v) {
  if (omega.size() != n * n) throw std::invalid_argument("velocity_from_vorticity: field is not n x n");
  auto w = fft::forward_real2d(omega, n, n);
  std::vector<Complex> su(n * n), sv(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double kx = fft::wavenumber(i, n), ky = fft::wavenumber(j, n);
      const double k2 = kx * kx + ky * ky;
      const Complex psi = k2 == 0 ? Complex(0) : w[i * n + j] / k2;
      su[i * n + j] = Complex(0, ky) * psi;
      sv[i * n + j] = Complex(0, -kx) * psi;
    }
  u = fft::inverse_real2d(su, n, n);
  v = fft::inverse_real2d(sv, n, n);
}

std::vector<double> divergence(std::span<const double> u, std::span<const double> v, std::size_t n) {
  auto su = fft::forward_real2d(u, n, n);
  auto sv = fft::forward_real2d(v, n, n);
  std::vector<Complex> d(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double kx = fft::wavenumber(i, n), ky = fft::wavenumber(j, n);
      d[i * n + j] = Complex(0, kx) * su[i * n + j] + Complex(0, ky) * sv[i * n + j];
    }
  return fft::inverse_real2d(d, n, n);
}

Trajectory gen_vorticity2d(double re, std::size_t n, std::size_t frames, double dt, std::size_t forcing_mode,
                           std::uint64_t seed, const VorticityOptions& opt) {
  if (!(re > 0)) throw std::invalid_argument("gen_vorticity2d: Reynolds number must be positive");
  if (opt.drag < 0) throw std::invalid_argument("gen_vorticity2d: drag must be non-negative");
  check_grid(n, frames, dt);
  if (opt.substeps == 0) throw std::invalid_argument("gen_vorticity2d: substeps must be positive");
  Rng rng = derive_rng(seed, 0);
  Trajectory t = blank(2, n, frames, dt, {re});
  const double nu = 1.0 / re;
  const double dx = kTwoPi / double(n);
  const double h = dt / double(opt.substeps);
  const long kcut = long(n) / 3;
  const std::size_t nn = n * n;

  std::vector<double> kx(nn), ky(nn), lin(nn), mask(nn);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const long a = fft::wavenumber(i, n), b = fft::wavenumber(j, n);
      kx[i * n + j] = double(a);
      ky[i * n + j] = double(b);
      lin[i * n + j] = -nu * double(a * a + b * b) - opt.drag;
      mask[i * n + j] = (std::abs(a) <= kcut && std::abs(b) <= kcut) ? 1.0 : 0.0;
    }
  std::vector<Complex> force(nn, 0.0);
  if (forcing_mode > 0) {
    std::vector<double> f(nn);
    const double k = double(forcing_mode);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double s = k * dx * double(i + j);
        f[i * n + j] = opt.forcing_amp * (std::sin(s) + std::cos(s));
      }
    force = fft::forward_real2d(f, n, n);
  }

  std::vector<Complex> a(nn), b(nn), c(nn), d(nn);
  auto nonlinear = [&](const std::vector<Complex>& w) {
    for (std::size_t q = 0; q < nn; ++q) {
      const double k2 = kx[q] * kx[q] + ky[q] * ky[q];
      const Complex psi = k2 == 0 ? Complex(0) : w[q] * mask[q] / k2;
      a[q] = Complex(0, ky[q]) * psi;                  // u
      b[q] = Complex(0, -kx[q]) * psi;                 // v
      c[q] = Complex(0, kx[q]) * w[q] * mask[q];       // omega_x
      d[q] = Complex(0, ky[q]) * w[q] * mask[q];       // omega_y
    }
    const auto u = fft::inverse_real2d(a, n, n), v = fft::inverse_real2d(b, n, n);
    const auto wx = fft::inverse_real2d(c, n, n), wy = fft::inverse_real2d(d, n, n);
    std::vector<double> adv(nn);
    double cfl = 0;
    for (std::size_t q = 0; q < nn; ++q) {
      adv[q] = u[q] * wx[q] + v[q] * wy[q];
      cfl = std::max(cfl, (std::abs(u[q]) + std::abs(v[q])) * h / dx);
    }
    if (cfl > 1.0) {
      throw CflError("gen_vorticity2d: CFL number (|u|+|v|) dt/dx = " + std::to_string(cfl) +
                     " exceeds 1; use a smaller dt or more substeps");
    }
    auto out = fft::forward_real2d(adv, n, n);
    for (std::size_t q = 0; q < nn; ++q) out[q] = (-out[q] + force[q]) * mask[q];
    return out;
  };

  auto w0 = smooth_field2d(n, 3.0, rng);
  auto w = fft::forward_real2d(w0, n, n);
  for (std::size_t q = 0; q < nn; ++q) w[q] *= mask[q];
  std::vector<Complex> star(nn);
  for (std::size_t m = 0; m < frames; ++m) {
    if (m > 0) {
      for (std::size_t step = 0; step < opt.substeps; ++step) {
        const auto n0 = nonlinear(w);
        for (std::size_t q = 0; q < nn; ++q)
          star[q] = ((1 + 0.5 * h * lin[q]) * w[q] + h * n0[q]) / (1 - 0.5 * h * lin[q]);
        const auto n1 = nonlinear(star);
        for (std::size_t q = 0; q < nn; ++q)
          w[q] = ((1 + 0.5 * h * lin[q]) * w[q] + 0.5 * h * (n0[q] + n1[q])) / (1 - 0.5 * h * lin[q]);
      }
    }
    const auto field = fft::inverse_real2d(w, n, n);
    ensure_finite(field, "gen_vorticity2d", m);
    std::copy(field.begin(), field.end(), t.frame(m).begin());
  }
  return t;
}

std::vector<double> interpolate(const Trajectory& traj, std::size_t frame, const codec::PointSet& points) {
  const std::size_t dim = traj.extents.size();
  if (points.dim != dim) throw std::invalid_argument("interpolate: point dimension does not match the grid");
  if (dim > 3) throw std::invalid_argument("interpolate: at most three dimensions");
  const auto f = traj.frame(frame);
  const std::size_t C = traj.channels;
  const std::size_t P = points.size();
  std::vector<double> out(P * C, 0.0);
  std::vector<std::size_t> lo(dim), hi(dim);
  std::vector<double> frac(dim);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t a = 0; a < dim; ++a) {
      const double n = double(traj.extents[a]);
      double s = points.point(p)[a] / traj.domain.length * n;
      s -= n * std::floor(s / n);
      const double fl = std::floor(s);
      frac[a] = s - fl;
      lo[a] = std::size_t(fl) % traj.extents[a];
      hi[a] = (lo[a] + 1) % traj.extents[a];
    }
    for (std::size_t corner = 0; corner < (std::size_t(1) << dim); ++corner) {
      double wgt = 1;
      std::size_t idx = 0;
      for (std::size_t a = 0; a < dim; ++a) {
        const bool up = (corner >> a) & 1;
        wgt *= up ? frac[a] : 1 - frac[a];
        idx = idx * traj.extents[a] + (up ? hi[a] : lo[a]);
      }
      if (wgt == 0) continue;
      for (std::size_t ch = 0; ch < C; ++ch) out[p * C + ch] += wgt * f[idx * C + ch];
    }
  }
  return out;
}

ScatterField sample_scatter(const Trajectory& traj, std::size_t n_points, std::uint64_t seed) {
  if (n_points < 16) throw std::invalid_argument("sample_scatter: need at least 16 points, got " + std::to_string(n_points));
  const std::size_t dim = traj.extents.size();
  Rng rng = derive_rng(seed, 1);
  std::uniform_real_distribution<double> pos(0.0, traj.domain.length);
  ScatterField out;
  out.points.dim = dim;
  out.points.coords.resize(n_points * dim);
  for (auto& c : out.points.coords) c = pos(rng);
  out.weights.assign(n_points, traj.domain.measure() / double(n_points));
  out.values.reserve(traj.frames * n_points * traj.channels);
  for (std::size_t m = 0; m < traj.frames; ++m) {
    const auto v = interpolate(traj, m, out.points);
    out.values.insert(out.values.end(), v.begin(), v.end());
  }
  return out;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) out.push_back(i);
  return out;
}

void Dataset::compute_normalization() {
  mean.clear();
  stddev.clear();
  xi_min.clear();
  xi_max.clear();
  const auto train = indices(Split::Train);
  if (train.empty()) return;
  const std::size_t C = trajectories[train[0]].channels;
  const std::size_t X = trajectories[train[0]].xi.size();
  std::vector<double> s(C, 0.0), ss(C, 0.0);
  double count = 0;
  xi_min.assign(X, INFINITY);
  xi_max.assign(X, -INFINITY);
  for (auto i : train) {
    const auto& t = trajectories[i];
    if (t.channels != C || t.xi.size() != X) throw std::invalid_argument("dataset: train trajectories disagree in shape");
    for (std::size_t q = 0; q < t.data.size(); ++q) s[q % C] += t.data[q];
    count += double(t.data.size() / C);
    for (std::size_t k = 0; k < X; ++k) {
      xi_min[k] = std::min(xi_min[k], t.xi[k]);
      xi_max[k] = std::max(xi_max[k], t.xi[k]);
    }
  }
  mean.resize(C);
  for (std::size_t c = 0; c < C; ++c) mean[c] = s[c] / count;
  for (auto i : train) {
    const auto& t = trajectories[i];
    for (std::size_t q = 0; q < t.data.size(); ++q) {
      const double d = t.data[q] - mean[q % C];
      ss[q % C] += d * d;
    }
  }
  stddev.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double sd = std::sqrt(ss[c] / count);
    stddev[c] = sd > 0 ? sd : 1.0;
  }
}

std::vector<double> Dataset::normalize(std::span<const double> frame) const {
  std::vector<double> out(frame.begin(), frame.end());
  const std::size_t C = mean.size();
  if (C == 0) return out;
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = (out[q] - mean[q % C]) / stddev[q % C];
  return out;
}

std::vector<double> Dataset::denormalize(std::span<const double> frame) const {
  std::vector<double> out(frame.begin(), frame.end());
  const std::size_t C = mean.size();
  if (C == 0) return out;
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = out[q] * stddev[q % C] + mean[q % C];
  return out;
}

std::vector<double> Dataset::normalize_xi(const std::vector<double>& xi) const {
  std::vector<double> out(xi);
  for (std::size_t k = 0; k < out.size() && k < xi_min.size(); ++k) {
    const double span = xi_max[k] - xi_min[k];
    out[k] = span > 0 ? (xi[k] - xi_min[k]) / span : 0.0;
  }
  return out;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  if (ds.splits.size() != ds.trajectories.size()) throw std::invalid_argument("write_dataset: one split label per trajectory");
  nlohmann::json h;
  h["format"] = "lfm-dataset";
  h["problem"] = ds.problem;
  h["normalization"] = {{"mean", ds.mean}, {"std", ds.stddev}, {"xi_min", ds.xi_min}, {"xi_max", ds.xi_max}};
  nlohmann::json trajs = nlohmann::json::array();
  NamedTensors blocks;
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const auto& t = ds.trajectories[i];
    t.validate();
    trajs.push_back({{"extents", t.extents},
                     {"channels", t.channels},
                     {"frames", t.frames},
                     {"dt", t.dt},
                     {"xi", t.xi},
                     {"split", to_string(ds.splits[i])},
                     {"domain", {{"dim", t.domain.dim}, {"length", t.domain.length}, {"periodic", t.domain.periodic}}}});
    Shape shape{t.frames};
    shape.insert(shape.end(), t.extents.begin(), t.extents.end());
    shape.push_back(t.channels);
    blocks.emplace_back("traj" + std::to_string(i),
                        Tensor<float>(shape, std::vector<float>(t.data.begin(), t.data.end())));
  }
  h["trajectories"] = trajs;
  write_container(path, h, blocks);
}

Dataset read_dataset(const std::filesystem::path& path) {
  auto c = read_container(path, "lfm-dataset");
  Dataset ds;
  try {
    const auto& h = c.header;
    ds.problem = h.at("problem").get<std::string>();
    const auto& nrm = h.at("normalization");
    ds.mean = nrm.at("mean").get<std::vector<double>>();
    ds.stddev = nrm.at("std").get<std::vector<double>>();
    ds.xi_min = nrm.at("xi_min").get<std::vector<double>>();
    ds.xi_max = nrm.at("xi_max").get<std::vector<double>>();
    const auto& trajs = h.at("trajectories");
    if (trajs.size() != c.tensors.size()) throw FormatError(path.string() + ": trajectory count does not match tensor blocks");
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      const auto& m = trajs[i];
      Trajectory t;
      t.extents = m.at("extents").get<std::vector<std::size_t>>();
      t.channels = m.at("channels").get<std::size_t>();
      t.frames = m.at("frames").get<std::size_t>();
      t.dt = m.at("dt").get<double>();
      t.xi = m.at("xi").get<std::vector<double>>();
      const auto& d = m.at("domain");
      t.domain = codec::Domain{d.at("dim").get<std::size_t>(), d.at("length").get<double>(), d.at("periodic").get<bool>()};
      const auto& block = c.tensors[i].second;
      t.data.assign(block.data().begin(), block.data().end());
      t.validate();
      ds.trajectories.push_back(std::move(t));
      ds.splits.push_back(split_from_string(m.at("split").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed dataset header: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return ds;
}

GenConfig GenConfig::defaults(const std::string& problem) {
  GenConfig c;
  c.problem = problem;
  if (problem == "heat2d") {
    c.dt = 0.05;
    c.param_min = 0.005;
    c.param_max = 0.02;
  } else if (problem == "burgers1d") {
    c.dt = 0.05;
    c.substeps = 10;
    c.param_min = 0.02;
    c.param_max = 0.05;
  } else if (problem == "vorticity2d") {
    c.dt = 0.5;
    c.substeps = 20;
    c.param_min = 500;
    c.param_max = 1000;
    c.forcing_mode = 4;
  } else {
    throw std::invalid_argument("unknown problem '" + problem + "' (expected heat2d, burgers1d or vorticity2d)");
  }
  return c;
}

void GenConfig::validate() const {
  if (problem != "heat2d" && problem != "burgers1d" && problem != "vorticity2d")
    throw std::invalid_argument("unknown problem '" + problem + "'");
  if (param_min > param_max) throw std::invalid_argument("param_min exceeds param_max");
  if (n_train + n_valid + n_test == 0) throw std::invalid_argument("dataset needs at least one trajectory");
  check_grid(n, frames, dt);
  if (substeps == 0) throw std::invalid_argument("substeps must be positive");
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  j = {{"problem", c.problem},     {"n", c.n},
       {"frames", c.frames},       {"dt", c.dt},
       {"substeps", c.substeps},   {"param_min", c.param_min},
       {"param_max", c.param_max}, {"forcing_mode", c.forcing_mode},
       {"n_train", c.n_train},     {"n_valid", c.n_valid},
       {"n_test", c.n_test},       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  c = GenConfig::defaults(j.value("problem", std::string("heat2d")));
  c.n = j.value("n", c.n);
  c.frames = j.value("frames", c.frames);
  c.dt = j.value("dt", c.dt);
  c.substeps = j.value("substeps", c.substeps);
  c.param_min = j.value("param_min", c.param_min);
  c.param_max = j.value("param_max", c.param_max);
  c.forcing_mode = j.value("forcing_mode", c.forcing_mode);
  c.n_train = j.value("n_train", c.n_train);
  c.n_valid = j.value("n_valid", c.n_valid);
  c.n_test = j.value("n_test", c.n_test);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

Dataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  const std::size_t total = cfg.n_train + cfg.n_valid + cfg.n_test;
  Dataset ds;
  ds.problem = cfg.problem;
  ds.trajectories.resize(total);
  for (std::size_t i = 0; i < total; ++i)
    ds.splits.push_back(i < cfg.n_train ? Split::Train : i < cfg.n_train + cfg.n_valid ? Split::Valid : Split::Test);

  auto make = [&](std::size_t i) {
    Rng rng = derive_rng(cfg.seed, 1000 + i);
    const double p = std::uniform_real_distribution<double>(cfg.param_min, cfg.param_max)(rng);
    const std::uint64_t s = rng();
    if (cfg.problem == "heat2d") return gen_heat2d(p, cfg.n, cfg.frames, cfg.dt, s);
    if (cfg.problem == "burgers1d") return gen_burgers1d(p, cfg.n, cfg.frames, cfg.dt, s, cfg.substeps);
    VorticityOptions opt;
    opt.substeps = cfg.substeps;
    return gen_vorticity2d(p, cfg.n, cfg.frames, cfg.dt, cfg.forcing_mode, s, opt);
  };

  parallel_for(total, [&](std::size_t i) { ds.trajectories[i] = make(i); });
  ds.compute_normalization();
  return ds;
}

}  // namespace lfm::pde
