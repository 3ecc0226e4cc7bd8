#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>

#include "gradcheck.hpp"
#include "lfm/fft.hpp"
#include "lfm/ops.hpp"
#include "lfm/serialize.hpp"

using namespace lfm;
using lfm::testing::gradcheck;
using lfm::testing::weighted_sum;

namespace {
Tensor<double> rand_unit(Shape s, Rng& rng) { return Tensor<double>::uniform(std::move(s), rng, -1.0, 1.0); }

std::vector<std::complex<double>> naive_dft(const std::vector<double>& x, bool inverse = false) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double ang = (inverse ? 2.0 : -2.0) * std::numbers::pi * double(k * j) / double(n);
      acc += x[j] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}
}  // namespace

TEST_CASE("elementwise add, identity multiply, and broadcast errors") {
  Tensor<double> a({2}, {1, 2}), b({2}, {3, 4});
  auto c = a + b;
  CHECK(c.at(0) == 4);
  CHECK(c.at(1) == 6);

  Rng rng(1);
  auto x = rand_unit({3, 4}, rng);
  auto y = x * 1.0;
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  Tensor<double> p({2, 3}), q({4});
  try {
    (void)(p + q);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(4,)") != std::string::npos);
  }
}

TEST_CASE("broadcast shape computation is associative") {
  const std::vector<Shape> shapes = {{3, 1, 5}, {4, 1}, {1, 5}, {5}, {3, 4, 5}, {1}, {}};
  for (const auto& a : shapes)
    for (const auto& b : shapes)
      for (const auto& c : shapes) {
        Shape left, right;
        bool left_ok = true, right_ok = true;
        try { left = broadcast_shape(a, broadcast_shape(b, c)); } catch (const ShapeError&) { left_ok = false; }
        try { right = broadcast_shape(broadcast_shape(a, b), c); } catch (const ShapeError&) { right_ok = false; }
        CHECK(left_ok == right_ok);
        if (left_ok && right_ok) CHECK(left == right);
      }
}

TEST_CASE("matmul identity and hand-computed product") {
  Rng rng(2);
  auto x = rand_unit({3, 2}, rng);
  Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = matmul(eye, x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  Tensor<double> a({2, 2}, {1, 2, 3, 4}), b({2, 1}, {1, 1});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.at(0) == 3);
  CHECK(c.at(1) == 7);

  CHECK_THROWS_AS(matmul(Tensor<double>({2, 3}), Tensor<double>({4, 2})), ShapeError);
}

TEST_CASE("matmul backward matches finite differences") {
  Rng rng(3);
  auto a = rand_unit({5, 7}, rng), b = rand_unit({7, 3}, rng), w = rand_unit({5, 3}, rng);
  auto r = gradcheck([&] { return weighted_sum(matmul(a, b), w); }, {a, b});
  CHECK(r.max_rel_error <= 1e-4);

  auto ab = rand_unit({2, 4, 3}, rng), bb = rand_unit({2, 3, 5}, rng), wb = rand_unit({2, 4, 5}, rng);
  auto rb = gradcheck([&] { return weighted_sum(matmul(ab, bb), wb); }, {ab, bb});
  CHECK(rb.max_rel_error <= 1e-4);
}

TEST_CASE("softmax: uniform, stabilised, row-stochastic") {
  auto u = softmax(Tensor<double>({3}, {0, 0, 0}), 0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(u.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto big = softmax(Tensor<double>({2}, {1000, 0}), 0);
  CHECK(std::abs(big.at(0) - 1.0) <= 1e-12);
  CHECK(std::abs(big.at(1)) <= 1e-12);

  Rng rng(4);
  auto x = Tensor<double>::randn({4, 6}, rng, 3.0);
  auto s = softmax(x, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < 6; ++c) acc += s.at(r * 6 + c);
    CHECK(std::abs(acc - 1.0) <= 1e-6);
  }
  auto s0 = softmax(x, 0);
  for (std::size_t c = 0; c < 6; ++c) {
    double acc = 0;
    for (std::size_t r = 0; r < 4; ++r) acc += s0.at(r * 6 + c);
    CHECK(std::abs(acc - 1.0) <= 1e-6);
  }
}

TEST_CASE("conv: 1x1 identity and delta response") {
  Rng rng(5);
  auto x = rand_unit({2, 5, 6, 1}, rng);
  Tensor<double> one({1, 1, 1, 1}, {1.0});
  auto y = conv(x, one, {{1, 1}, {0, 0}, Padding::Zero});
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  // Cross-correlation of a delta reproduces the flipped kernel around the delta.
  Tensor<double> delta({1, 7, 7, 1});
  delta.mutable_data()[3 * 7 + 3] = 1.0;
  auto k = rand_unit({3, 3, 1, 1}, rng);
  auto r = conv(delta, k, {{1, 1}, {1, 1}, Padding::Zero});
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      CHECK(r.at((2 + a) * 7 + (2 + b)) == k.at((2 - a) * 3 + (2 - b)));
}

TEST_CASE("conv output extents and errors") {
  ConvGeometry g{{2}, {1}, Padding::Zero};
  CHECK(conv_output_extents({16}, {3}, g) == std::vector<std::size_t>{8});
  CHECK(conv_output_extents({15}, {4}, ConvGeometry{{3}, {0}, Padding::Zero}) ==
        std::vector<std::size_t>{4});
  CHECK_THROWS_AS(conv(Tensor<double>({1, 2, 1}), Tensor<double>({5, 1, 1}), ConvGeometry{{1}, {1}, Padding::Zero}),
                  ShapeError);
}

TEST_CASE("conv and conv_transpose gradients, zero and periodic padding") {
  Rng rng(6);
  for (auto mode : {Padding::Zero, Padding::Periodic}) {
    ConvGeometry g{{2, 1}, {1, 1}, mode};
    auto x = rand_unit({2, 6, 5, 3}, rng);
    auto w = rand_unit({3, 3, 3, 2}, rng);
    auto out = conv(x, w, g);
    auto wo = rand_unit(out.shape(), rng);
    auto r = gradcheck([&] { return weighted_sum(conv(x, w, g), wo); }, {x, w});
    CHECK(r.max_rel_error <= 1e-4);

    auto xt = rand_unit(out.shape(), rng);
    auto wt = rand_unit({3, 3, 4, 2}, rng);
    auto yt = conv_transpose(xt, wt, g, {6, 5});
    CHECK(yt.shape() == Shape{2, 6, 5, 4});
    auto wy = rand_unit(yt.shape(), rng);
    auto rt = gradcheck([&] { return weighted_sum(conv_transpose(xt, wt, g, {6, 5}), wy); }, {xt, wt});
    CHECK(rt.max_rel_error <= 1e-4);
  }
  ConvGeometry g1{{2}, {1}, Padding::Periodic};
  auto x1 = rand_unit({2, 8, 2}, rng), w1 = rand_unit({4, 2, 3}, rng);
  auto w1o = rand_unit(conv(x1, w1, g1).shape(), rng);
  CHECK(gradcheck([&] { return weighted_sum(conv(x1, w1, g1), w1o); }, {x1, w1}).max_rel_error <= 1e-4);
}

TEST_CASE("conv_transpose is the adjoint of conv") {
  Rng rng(7);
  ConvGeometry g{{2, 2}, {1, 1}, Padding::Periodic};
  auto x = rand_unit({1, 8, 8, 2}, rng);
  auto w = rand_unit({4, 4, 2, 3}, rng);
  auto y = rand_unit({1, 4, 4, 3}, rng);
  const double lhs = sum(conv(x, w, g) * y).item();
  const double rhs = sum(x * conv_transpose(y, w, g, {8, 8})).item();
  CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
}

TEST_CASE("elementwise, unary, reduction and layout gradients") {
  Rng rng(8);
  auto a = rand_unit({3, 4}, rng), b = rand_unit({4}, rng), c = rand_unit({3, 1}, rng);
  auto w = rand_unit({3, 4}, rng);
  CHECK(gradcheck([&] { return weighted_sum((a + b) * c - a / (b * b + 2.0), w); }, {a, b, c}).max_rel_error <= 1e-4);
  for (auto op : {UnaryOp::Exp, UnaryOp::Tanh, UnaryOp::Sigmoid, UnaryOp::Silu, UnaryOp::Gelu,
                  UnaryOp::Square, UnaryOp::Neg}) {
    CHECK(gradcheck([&] { return weighted_sum(unary(op, a), w); }, {a}).max_rel_error <= 1e-4);
  }
  auto pos = Tensor<double>::uniform({3, 4}, rng, 0.5, 2.0);
  CHECK(gradcheck([&] { return weighted_sum(log(pos) + unary(UnaryOp::Sqrt, pos), w); }, {pos}).max_rel_error <= 1e-4);

  auto x = rand_unit({2, 3, 4}, rng);
  auto w1 = rand_unit({2, 4}, rng);
  CHECK(gradcheck([&] { return weighted_sum(sum(x, 1), w1); }, {x}).max_rel_error <= 1e-4);
  auto w2 = rand_unit({2, 3, 1}, rng);
  CHECK(gradcheck([&] { return weighted_sum(mean(x, 2, true), w2); }, {x}).max_rel_error <= 1e-4);
  auto wp = rand_unit({4, 2, 3}, rng);
  CHECK(gradcheck([&] { return weighted_sum(permute(x, {2, 0, 1}), wp); }, {x}).max_rel_error <= 1e-4);
  auto ws = rand_unit({2, 3, 4}, rng);
  CHECK(gradcheck([&] { return weighted_sum(softmax(x * 2.0, 1), ws); }, {x}).max_rel_error <= 1e-4);
  CHECK(gradcheck([&] { return weighted_sum(layer_norm(x), ws); }, {x}).max_rel_error <= 1e-4);
  auto y = rand_unit({2, 2, 4}, rng);
  auto wc = rand_unit({2, 5, 4}, rng);
  CHECK(gradcheck([&] { return weighted_sum(concat<double>({x, y}, 1), wc); }, {x, y}).max_rel_error <= 1e-4);
  auto wsl = rand_unit({2, 3, 2}, rng);
  CHECK(gradcheck([&] { return weighted_sum(slice(x, 2, 1, 3), wsl); }, {x}).max_rel_error <= 1e-4);
  auto wr = rand_unit({6, 4}, rng);
  CHECK(gradcheck([&] { return weighted_sum(reshape(x, {6, 4}), wr); }, {x}).max_rel_error <= 1e-4);
}

TEST_CASE("segment softmax and aggregate") {
  Csr csr;
  csr.offsets = {0, 2, 3, 6};
  csr.index = {0, 3, 1, 2, 3, 0};
  Rng rng(9);
  auto logits = rand_unit({6, 2}, rng);
  auto s = segment_softmax(logits, csr);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t h = 0; h < 2; ++h) {
      double acc = 0;
      for (std::size_t q = csr.offsets[r]; q < csr.offsets[r + 1]; ++q) acc += s.at(q * 2 + h);
      CHECK(std::abs(acc - 1.0) <= 1e-12);
    }
  auto vals = rand_unit({2, 4, 3}, rng);
  auto w = rand_unit({2, 3, 6}, rng);
  auto r = gradcheck([&] { return weighted_sum(segment_aggregate(segment_softmax(logits, csr), csr, vals), w); },
                     {logits, vals});
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("backward: analytic derivative, outer product, disconnected leaf, accumulation") {
  Rng rng(10);
  auto x = rand_unit({5}, rng).set_requires_grad(true);
  sum(square(x)).backward();
  auto g = x.grad();
  for (std::size_t i = 0; i < 5; ++i) CHECK(g[i] == doctest::Approx(2 * x.at(i)));

  // A second backward without zeroing accumulates.
  sum(square(x)).backward();
  g = x.grad();
  for (std::size_t i = 0; i < 5; ++i) CHECK(g[i] == doctest::Approx(4 * x.at(i)));
  x.zero_grad();
  for (double v : x.grad()) CHECK(v == 0.0);

  auto W = rand_unit({3, 4}, rng), v = rand_unit({4, 1}, rng);
  CHECK(gradcheck([&] { return sum(matmul(W, v)); }, {W}).max_rel_error <= 1e-4);
  W.zero_grad();
  sum(matmul(W, v)).backward();
  const auto gw = W.grad();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(gw[i * 4 + j] == doctest::Approx(v.at(j)));

  auto lone = rand_unit({3}, rng).set_requires_grad(true);
  sum(square(x)).backward();
  for (double gv : lone.grad()) CHECK(gv == 0.0);

  CHECK_THROWS_AS(square(x).backward(), ShapeError);
}

TEST_CASE("backward visits a diamond-shaped graph once per node") {
  Tensor<double> x({1}, {3.0});
  x.set_requires_grad(true);
  auto y = x * 2.0;
  auto z = y * y + y;  // dz/dx = (2y + 1) * 2 = 26
  sum(z).backward();
  CHECK(x.grad()[0] == doctest::Approx(26.0));
}

TEST_CASE("no-grad guard suppresses recording") {
  Tensor<double> x({2}, {1, 2});
  x.set_requires_grad(true);
  NoGradGuard guard;
  auto y = x * 3.0;
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("fft: DC, single mode, round trip and Parseval") {
  std::vector<double> c(16, 2.5);
  auto spec = fft::forward_real(c);
  CHECK(std::abs(spec[0] - std::complex<double>(40.0, 0.0)) <= 1e-12);
  for (std::size_t k = 1; k < spec.size(); ++k) CHECK(std::abs(spec[k]) <= 1e-12);

  const std::size_t n = 32;
  std::vector<double> cosv(n);
  for (std::size_t i = 0; i < n; ++i) cosv[i] = std::cos(2 * std::numbers::pi * 3 * double(i) / double(n));
  auto cs = fft::forward_real(cosv);
  for (std::size_t k = 0; k < cs.size(); ++k) {
    if (k == 3) CHECK(std::abs(cs[k]) == doctest::Approx(n / 2.0));
    else CHECK(std::abs(cs[k]) <= 1e-10);
  }

  Rng rng(11);
  std::vector<double> x(64);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : x) v = u(rng);
  auto X = fft::forward_real(x);
  auto naive = naive_dft(x);
  for (std::size_t k = 0; k < X.size(); ++k) CHECK(std::abs(X[k] - naive[k]) <= 1e-10);
  auto back = fft::inverse_real(X, 64);
  double err = 0;
  for (std::size_t i = 0; i < 64; ++i) err = std::max(err, std::abs(back[i] - x[i]));
  CHECK(err <= 1e-10);

  double e_time = 0, e_freq = 0;
  for (double v : x) e_time += v * v;
  for (auto z : naive) e_freq += std::norm(z);
  CHECK(std::abs(e_time - e_freq / 64.0) <= 1e-9 * e_time);

  std::vector<double> bad(12, 0.0);
  CHECK_THROWS_AS(fft::forward_real(bad), std::invalid_argument);
}

TEST_CASE("fft2d round trip") {
  Rng rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> f(16 * 8);
  for (auto& v : f) v = u(rng);
  auto s = fft::forward_real2d(f, 16, 8);
  auto b = fft::inverse_real2d(s, 16, 8);
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(std::abs(b[i] - f[i]) <= 1e-12);
}

TEST_CASE("tensor block serialization is little-endian rank/extents/float32") {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  std::ostringstream os;
  write_tensor(os, t);
  const std::string bytes = os.str();
  CHECK(bytes.size() == 8 + 2 * 8 + 6 * 4);
  CHECK(static_cast<unsigned char>(bytes[0]) == 2);
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(static_cast<unsigned char>(bytes[16]) == 3);
  std::istringstream is(bytes);
  auto r = read_tensor(is);
  CHECK(r.shape() == t.shape());
  for (std::size_t i = 0; i < 6; ++i) CHECK(r.at(i) == t.at(i));
}

TEST_CASE("check_finite reports non-finite values") {
  Tensor<double> t({3}, {1.0, std::nan(""), 2.0});
  CHECK_THROWS_AS(check_finite(t, "probe"), std::domain_error);
  CHECK_FALSE(all_finite(t));
}
