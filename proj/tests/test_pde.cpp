#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "lfm/fft.hpp"
#include "lfm/pde.hpp"
#include "lfm/serialize.hpp"

using namespace lfm;
using namespace lfm::pde;

namespace {

std::filesystem::path tmp(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lfm_test_pde";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

double energy(std::span<const double> f) {
  double s = 0;
  for (double v : f) s += v * v;
  return s;
}

double mean(std::span<const double> f) {
  double s = 0;
  for (double v : f) s += v;
  return s / double(f.size());
}

}  // namespace

TEST_CASE("heat: every mode decays analytically") {
  const double nu = 0.02, dt = 0.1;
  const std::size_t n = 32;
  auto t = gen_heat2d(nu, n, 6, dt, 3);
  t.validate(4);
  CHECK(t.extents == std::vector<std::size_t>{32, 32});
  double worst = 0;
  for (std::size_t m = 0; m + 1 < t.frames; ++m) {
    auto a = fft::forward_real2d(t.frame(m), n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double kx = fft::wavenumber(i, n), ky = fft::wavenumber(j, n);
        a[i * n + j] *= std::exp(-nu * (kx * kx + ky * ky) * dt);
      }
    const auto expect = fft::inverse_real2d(a, n, n);
    for (std::size_t q = 0; q < n * n; ++q) worst = std::max(worst, std::abs(expect[q] - t.frame(m + 1)[q]));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("heat: planted single mode, mean and energy") {
  // Amplitude of a single mode after one step through the generator's own spectral decay.
  const std::size_t n = 16;
  const double nu = 0.05, dt = 0.3;
  const double expect = std::exp(-9 * nu * dt);
  std::vector<double> f(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) f[i * n + j] = std::cos(3 * 2 * std::numbers::pi * double(i) / n);
  auto s = fft::forward_real2d(f, n, n);
  CHECK(std::abs(s[3 * n]) == doctest::Approx(n * n / 2.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double kx = fft::wavenumber(i, n), ky = fft::wavenumber(j, n);
      s[i * n + j] *= std::exp(-nu * (kx * kx + ky * ky) * dt);
    }
  auto g = fft::inverse_real2d(s, n, n);
  CHECK(g[0] == doctest::Approx(expect).epsilon(1e-13));

  auto t = gen_heat2d(0.01, 32, 40, 0.2, 9);
  const double m0 = mean(t.frame(0));
  for (std::size_t m = 1; m < t.frames; ++m) {
    CHECK(std::abs(mean(t.frame(m)) - m0) <= 1e-13);
    CHECK(energy(t.frame(m)) <= energy(t.frame(m - 1)) * (1 + 1e-14));
  }
  CHECK_THROWS_AS(gen_heat2d(-0.1, 32, 4, 0.1, 0), std::invalid_argument);
  CHECK_THROWS_AS(gen_heat2d(0.1, 24, 4, 0.1, 0), std::invalid_argument);
}

TEST_CASE("burgers: momentum, decay, convergence, CFL") {
  auto t = gen_burgers1d(0.03, 64, 201, 0.05, 4, 10);
  t.validate();
  const double m0 = mean(t.frame(0));
  const double scale = std::sqrt(energy(t.frame(0)) / 64.0);
  double drift = 0;
  for (std::size_t m = 0; m < t.frames; ++m) drift = std::max(drift, std::abs(mean(t.frame(m)) - m0));
  CHECK(drift / scale <= 1e-8);

  auto v = gen_burgers1d(1.0, 64, 50, 0.01, 5, 4);
  const double vm = mean(v.frame(0));
  double prev = INFINITY;
  for (std::size_t m = 0; m < v.frames; ++m) {
    double dev = 0;
    for (double x : v.frame(m)) dev += (x - vm) * (x - vm);
    CHECK(dev < prev);
    prev = dev;
  }

  // Step halving: RK4 errors shrink about 16x per halving.
  auto a = gen_burgers1d(0.05, 64, 3, 0.1, 6, 4);
  auto b = gen_burgers1d(0.05, 64, 3, 0.1, 6, 8);
  auto c = gen_burgers1d(0.05, 64, 3, 0.1, 6, 16);
  double eab = 0, ebc = 0;
  for (std::size_t q = 0; q < 64; ++q) {
    eab = std::max(eab, std::abs(a.frame(2)[q] - b.frame(2)[q]));
    ebc = std::max(ebc, std::abs(b.frame(2)[q] - c.frame(2)[q]));
  }
  CAPTURE(eab);
  CAPTURE(ebc);
  CHECK(eab / ebc > 12.0);
  CHECK(eab / ebc < 20.0);

  try {
    gen_burgers1d(0.01, 64, 3, 1.0, 6, 1);
    FAIL("expected CflError");
  } catch (const CflError& e) {
    CHECK(std::string(e.what()).find("smaller dt") != std::string::npos);
  }
}

TEST_CASE("vorticity: divergence-free, enstrophy, determinism") {
  auto t = gen_vorticity2d(200, 32, 6, 0.2, 4, 11, {0.1, 0.1, 4});
  t.validate();
  std::vector<double> u, v;
  for (std::size_t m = 0; m < t.frames; ++m) {
    velocity_from_vorticity(t.frame(m), 32, u, v);
    double worst = 0;
    for (double d : divergence(u, v, 32)) worst = std::max(worst, std::abs(d));
    CHECK(worst <= 1e-8);
  }
  // Velocity recovers the vorticity through the curl.
  {
    const std::size_t n = 32;
    auto su = fft::forward_real2d(u, n, n), sv = fft::forward_real2d(v, n, n);
    std::vector<fft::Complex> curl(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double kx = fft::wavenumber(i, n), ky = fft::wavenumber(j, n);
        curl[i * n + j] = fft::Complex(0, kx) * sv[i * n + j] - fft::Complex(0, ky) * su[i * n + j];
      }
    auto w = fft::inverse_real2d(curl, n, n);
    const double wm = mean(t.frame(t.frames - 1));
    double worst = 0;
    for (std::size_t q = 0; q < n * n; ++q) worst = std::max(worst, std::abs(w[q] - (t.frame(t.frames - 1)[q] - wm)));
    CHECK(worst <= 1e-10);
  }

  VorticityOptions free{0.0, 0.0, 8};
  auto f = gen_vorticity2d(100, 32, 30, 0.2, 0, 12, free);
  for (std::size_t m = 1; m < f.frames; ++m) CHECK(energy(f.frame(m)) <= energy(f.frame(m - 1)));

  auto again = gen_vorticity2d(200, 32, 6, 0.2, 4, 11, {0.1, 0.1, 4});
  CHECK(again.data == t.data);
  auto other = gen_vorticity2d(200, 32, 6, 0.2, 4, 12, {0.1, 0.1, 4});
  CHECK(other.data != t.data);
  CHECK_THROWS_AS(gen_vorticity2d(200, 32, 3, 50.0, 4, 11, {0.1, 0.1, 1}), CflError);
}

TEST_CASE("scatter sampling") {
  auto t = gen_heat2d(0.01, 16, 3, 0.1, 1);
  // Grid nodes reproduce the stored values.
  auto nodes = codec::grid_points(t.extents, t.domain);
  auto vals = interpolate(t, 1, nodes);
  double worst = 0;
  for (std::size_t q = 0; q < vals.size(); ++q) worst = std::max(worst, std::abs(vals[q] - t.frame(1)[q]));
  CHECK(worst <= 1e-12);

  Trajectory c = t;
  std::fill(c.data.begin(), c.data.end(), 2.5);
  auto sc = sample_scatter(c, 100, 3);
  CHECK(sc.values.size() == 3 * 100);
  for (double v : sc.values) CHECK(v == doctest::Approx(2.5).epsilon(1e-14));
  CHECK(sc.weights[0] == doctest::Approx(c.domain.measure() / 100));

  auto s1 = sample_scatter(t, 64, 1), s2 = sample_scatter(t, 64, 2);
  CHECK(s1.points.coords != s2.points.coords);
  CHECK(sample_scatter(t, 64, 1).points.coords == s1.points.coords);
  CHECK_THROWS_AS(sample_scatter(t, 8, 1), std::invalid_argument);

  // Linear fields are reproduced exactly by bilinear interpolation away from the seam.
  Trajectory lin = t;
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      for (std::size_t m = 0; m < 3; ++m) lin.data[(m * 16 + i) * 16 + j] = 2.0 * i - 3.0 * j;
  codec::PointSet p{2, {1.3, 2.1}};
  const double h = lin.domain.length / 16;
  CHECK(interpolate(lin, 0, p)[0] == doctest::Approx(2.0 * 1.3 / h - 3.0 * 2.1 / h));
}

TEST_CASE("dataset round trip, normalization and integrity") {
  GenConfig cfg = GenConfig::defaults("heat2d");
  cfg.n = 16;
  cfg.frames = 5;
  cfg.n_train = 3;
  cfg.n_valid = 1;
  cfg.n_test = 1;
  cfg.seed = 5;
  auto ds = generate_dataset(cfg);
  CHECK(ds.trajectories.size() == 5);
  CHECK(ds.indices(Split::Train) == std::vector<std::size_t>{0, 1, 2});
  CHECK(ds.indices(Split::Test) == std::vector<std::size_t>{4});

  // Statistics from the train split only.
  double s = 0, cnt = 0;
  for (auto i : ds.indices(Split::Train))
    for (double v : ds.trajectories[i].data) {
      s += v;
      cnt += 1;
    }
  CHECK(ds.mean[0] == doctest::Approx(s / cnt).epsilon(1e-12));
  auto z = ds.normalize(ds.trajectories[0].frame(0));
  auto back = ds.denormalize(z);
  for (std::size_t q = 0; q < back.size(); ++q) CHECK(back[q] == doctest::Approx(ds.trajectories[0].frame(0)[q]));
  const auto xi = ds.normalize_xi(ds.trajectories[0].xi);
  CHECK(xi[0] >= 0.0);
  CHECK(xi[0] <= 1.0);

  // Parallel generation is deterministic and independent of worker count.
  setenv("LFM_THREADS", "3", 1);
  auto par = generate_dataset(cfg);
  setenv("LFM_THREADS", "1", 1);
  auto ser = generate_dataset(cfg);
  unsetenv("LFM_THREADS");
  for (std::size_t i = 0; i < 5; ++i) CHECK(par.trajectories[i].data == ser.trajectories[i].data);

  const auto p1 = tmp("a.lfmd"), p2 = tmp("b.lfmd");
  write_dataset(ds, p1);
  auto rd = read_dataset(p1);
  write_dataset(rd, p2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(rd.mean == ds.mean);
  CHECK(rd.splits == ds.splits);
  CHECK(rd.trajectories[2].xi == ds.trajectories[2].xi);
  for (std::size_t q = 0; q < rd.trajectories[1].data.size(); ++q)
    CHECK(rd.trajectories[1].data[q] == double(float(ds.trajectories[1].data[q])));

  {
    auto bytes = slurp(p1);
    bytes.back() ^= 0x40;
    std::ofstream(p2, std::ios::binary) << bytes;
    CHECK_THROWS_AS(read_dataset(p2), DigestError);
    std::ofstream(p2, std::ios::binary) << bytes.substr(0, bytes.size() - 10);
    CHECK_THROWS_AS(read_dataset(p2), FormatError);
    auto v = slurp(p1);
    v.replace(v.find("\"version\":1"), 11, "\"version\":9");
    std::ofstream(p2, std::ios::binary) << v;
    CHECK_THROWS_AS(read_dataset(p2), FormatError);
  }

  Dataset empty;
  empty.problem = "heat2d";
  write_dataset(empty, p1);
  auto e = read_dataset(p1);
  CHECK(e.trajectories.empty());
  write_dataset(e, p2);
  CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("generation config json") {
  auto c = GenConfig::defaults("vorticity2d");
  nlohmann::json j = c;
  auto d = j.get<GenConfig>();
  CHECK(nlohmann::json(d) == j);
  CHECK_THROWS_AS(GenConfig::defaults("wave"), std::invalid_argument);
  j["n"] = 48;
  CHECK_THROWS_AS(j.get<GenConfig>(), std::invalid_argument);
}
