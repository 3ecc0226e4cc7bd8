#include <doctest.h>

#include <cmath>

#include "lfm/ops.hpp"
#include "lfm/schedules.hpp"

using namespace lfm;

TEST_CASE("flow path endpoints, lambda, drift and diffusion") {
  const auto p = DiffusionPath::flow_linear();
  auto a0 = alpha_sigma(p, 0.0);
  CHECK(a0.alpha == 1.0);
  CHECK(a0.sigma == 0.0);
  auto a1 = alpha_sigma(p, 1.0);
  CHECK(a1.alpha == 0.0);
  CHECK(a1.sigma == 1.0);
  CHECK_THROWS_AS(alpha_sigma(p, 1.5), std::domain_error);
  CHECK_THROWS_AS(alpha_sigma(p, -0.1), std::domain_error);

  auto fg = drift_diffusion(p, 0.5);
  CHECK(fg.f == doctest::Approx(-2.0).epsilon(1e-14));
  CHECK(fg.g2 == doctest::Approx(2.0).epsilon(1e-14));
  CHECK_THROWS_AS(drift_diffusion(p, 1.0), std::domain_error);

  CHECK(lambda_of(p, 0.5) == doctest::Approx(1.0));
  CHECK(lambda_of(p, 1e-9) < 1e-8);
  CHECK_THROWS_AS(lambda_of(p, 1.0), std::domain_error);
}

TEST_CASE("exponential path noise levels") {
  // Variance-exploding frame: sigma(t) = sigma_min^(1 - t), so sigma(0.5) = sigma_min^0.5.
  const auto ve = DiffusionPath::exponential(1e-2, false);
  const auto grid = make_grid(ve, 10, GridSpacing::UniformT);
  CHECK(alpha_sigma(ve, grid.knots[5]).sigma == doctest::Approx(1e-1).epsilon(1e-12));
  CHECK(alpha_sigma(ve, 1.0).sigma == doctest::Approx(1.0));

  // Variance-preserving frame scales by the terminal noise level so alpha(1) > 0.
  const auto vp = DiffusionPath::exponential(1e-2);
  const double sb = vp.terminal_sigma;
  CHECK(alpha_sigma(vp, 0.5).sigma == doctest::Approx(sb * 1e-1).epsilon(1e-12));
  CHECK(alpha_sigma(vp, 1.0).alpha == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(alpha_sigma(vp, 0.0).alpha == 1.0);
  CHECK(alpha_sigma(vp, 0.0).sigma == 0.0);

  for (double smin : {1e-1, 1e-2, 1e-3, 1e-6}) {
    for (bool frame : {true, false}) {
      const auto p = DiffusionPath::exponential(smin, frame);
      const double scale = frame ? p.terminal_sigma : 1.0;
      // Smallest non-zero noise level is reached as t -> 0+.
      CHECK(alpha_sigma(p, 1e-12).sigma == doctest::Approx(scale * smin).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(DiffusionPath::exponential(0.0), std::invalid_argument);
  CHECK_THROWS_AS(DiffusionPath::exponential(1.0), std::invalid_argument);
}

TEST_CASE("path invariants on a dense sweep") {
  const std::vector<DiffusionPath> paths = {DiffusionPath::flow_linear(), DiffusionPath::exponential(1e-1),
                                            DiffusionPath::exponential(1e-6), DiffusionPath::exponential(1e-3, false),
                                            DiffusionPath::vpddpm()};
  for (const auto& p : paths) {
    CAPTURE(to_string(p.kind));
    double prev_a = 2.0, prev_s = -1.0, prev_l = -1.0;
    for (int i = 0; i <= 1000; ++i) {
      const double t = i / 1000.0;
      const auto [a, s] = alpha_sigma(p, t);
      CHECK(a <= prev_a);
      CHECK(s >= prev_s);
      prev_a = a;
      prev_s = s;
      if (a > 0.0) {
        const double l = lambda_of(p, t);
        if (i > 0) CHECK(l > prev_l);
        prev_l = l;
      }
    }
  }
}

TEST_CASE("VP-DDPM diffusion coefficient is non-negative and rates match differences") {
  const auto p = DiffusionPath::vpddpm();
  for (int i = 1; i < 1000; ++i) {
    const double t = i / 1000.0;
    CHECK(drift_diffusion(p, t).g2 >= 0.0);
  }
  for (const auto& q : {p, DiffusionPath::exponential(1e-2), DiffusionPath::flow_linear()}) {
    for (double t : {0.2, 0.5, 0.8}) {
      const double h = 1e-6;
      const auto up = alpha_sigma(q, t + h), dn = alpha_sigma(q, t - h);
      const auto r = alpha_sigma_rates(q, t);
      CHECK(r.alpha == doctest::Approx((up.alpha - dn.alpha) / (2 * h)).epsilon(1e-6));
      CHECK(r.sigma == doctest::Approx((up.sigma - dn.sigma) / (2 * h)).epsilon(1e-6));
      // f = d log alpha / dt
      const auto fg = drift_diffusion(q, t);
      CHECK(fg.f == doctest::Approx((std::log(up.alpha) - std::log(dn.alpha)) / (2 * h)).epsilon(1e-6));
    }
  }
}

TEST_CASE("perturb endpoints and linearity") {
  Rng rng(3);
  auto x0 = Tensor<double>::randn({4, 3}, rng);
  auto eps = Tensor<double>::randn({4, 3}, rng);
  auto zero = Tensor<double>::zeros({4, 3});
  for (const auto& p : {DiffusionPath::flow_linear(), DiffusionPath::exponential(1e-2), DiffusionPath::vpddpm()}) {
    auto at0 = perturb(p, x0, 0.0, eps);
    for (std::size_t i = 0; i < x0.numel(); ++i) CHECK(at0.at(i) == x0.at(i));
    for (double t : {0.0, 0.3, 0.7, 1.0}) {
      const auto [a, s] = alpha_sigma(p, t);
      auto clean = perturb(p, x0, t, zero);
      auto pure = perturb(p, zero, t, eps);
      for (std::size_t i = 0; i < x0.numel(); ++i) {
        CHECK(clean.at(i) == a * x0.at(i));
        CHECK(pure.at(i) == s * eps.at(i));
      }
    }
  }
  auto at1 = perturb(DiffusionPath::flow_linear(), x0, 1.0, eps);
  for (std::size_t i = 0; i < x0.numel(); ++i) CHECK(at1.at(i) == eps.at(i));
  CHECK_THROWS_AS(perturb(DiffusionPath::flow_linear(), x0, 0.5, Tensor<double>::zeros({3})), ShapeError);
}

TEST_CASE("time grids") {
  const auto p = DiffusionPath::flow_linear();
  auto g = make_grid(p, 10, GridSpacing::UniformT);
  REQUIRE(g.knots.size() == 11);
  for (int i = 0; i <= 10; ++i) CHECK(g.knots[i] == doctest::Approx(i / 10.0).epsilon(1e-15));
  CHECK(g.knots.front() == 0.0);
  CHECK(g.knots.back() == 1.0);

  auto g1 = make_grid(p, 1, GridSpacing::UniformT);
  CHECK(g1.knots == std::vector<double>{0.0, 1.0});

  auto dense = make_grid(p, 1000, GridSpacing::UniformT);
  CHECK(dense.steps() == 1000);
  for (std::size_t i = 0; i < 1000; ++i) CHECK(dense.knots[i] < dense.knots[i + 1]);

  CHECK_THROWS_AS(make_grid(p, 0, GridSpacing::UniformT), std::invalid_argument);

  for (const auto& q : {p, DiffusionPath::exponential(1e-3), DiffusionPath::vpddpm()}) {
    auto lg = make_grid(q, 10, GridSpacing::UniformLogLambda);
    CHECK(lg.knots.front() == 0.0);
    CHECK(lg.knots.back() == 1.0);
    for (std::size_t i = 0; i < 10; ++i) CHECK(lg.knots[i] < lg.knots[i + 1]);
    // Interior knots are equally spaced in log lambda.
    const double d0 = std::log(lambda_of(q, lg.knots[2])) - std::log(lambda_of(q, lg.knots[1]));
    for (std::size_t i = 2; i < 9; ++i) {
      const double d = std::log(lambda_of(q, lg.knots[i + 1])) - std::log(lambda_of(q, lg.knots[i]));
      CHECK(d == doctest::Approx(d0).epsilon(1e-6));
    }
  }
}

TEST_CASE("path json round trip") {
  for (const auto& p : {DiffusionPath::flow_linear(), DiffusionPath::exponential(1e-6, false),
                        DiffusionPath::vpddpm(2e-4, 3e-2)}) {
    nlohmann::json j = p;
    auto q = j.get<DiffusionPath>();
    CHECK(q.kind == p.kind);
    CHECK(q.sigma_min == p.sigma_min);
    CHECK(q.terminal_sigma == p.terminal_sigma);
    CHECK(q.variance_preserving == p.variance_preserving);
    CHECK(q.beta_min == p.beta_min);
    CHECK(q.beta_max == p.beta_max);
  }
  CHECK_THROWS_AS(path_kind_from_string("cosine"), std::invalid_argument);
}

namespace {
// Probability-flow ODE dx/dt = f x - g^2 score / 2 for x0 ~ N(m, s^2) on the flow path,
// integrated forward from t = 0 with explicit Euler.
double pf_ode_error(std::size_t steps, double x0) {
  const auto p = DiffusionPath::flow_linear();
  const double m = 0.3, s = 0.7, t_end = 0.8;
  auto var = [&](double t) { return (1 - t) * (1 - t) * s * s + t * t; };
  double x = x0;
  const double dt = t_end / double(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = i * dt;
    const auto fg = drift_diffusion(p, t);
    const double score = -(x - (1 - t) * m) / var(t);
    x += dt * (fg.f * x - 0.5 * fg.g2 * score);
  }
  const double exact = (1 - t_end) * m + std::sqrt(var(t_end)) / s * (x0 - m);
  return std::abs(x - exact);
}
}  // namespace

TEST_CASE("probability-flow ODE on the flow path converges at first order") {
  for (double x0 : {-1.0, 0.5, 2.0}) {
    const double e1 = pf_ode_error(200, x0);
    const double e2 = pf_ode_error(400, x0);
    CHECK(e1 < 1e-2);
    CHECK(e1 / e2 == doctest::Approx(2.0).epsilon(0.1));
  }
}
