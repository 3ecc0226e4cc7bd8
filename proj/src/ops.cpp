#include "lfm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace lfm {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// Per-output-axis strides into an input, zero along broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> s(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    s[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return s;
}

// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  if (out.empty()) {
    f(0, 0, 0);
    return;
  }
  const std::size_t r = out.size();
  const std::size_t inner = out[r - 1];
  const std::size_t ia_step = sa[r - 1], ib_step = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    std::size_t a = oa, b = ob;
    for (std::size_t j = 0; j < inner; ++j, a += ia_step, b += ib_step) f(o + j, a, b);
    // advance the outer multi-index
    for (std::size_t k = r - 1; k-- > 0;) {
      ++idx[k];
      oa += sa[k];
      ob += sb[k];
      if (idx[k] < out[k]) break;
      oa -= sa[k] * out[k];
      ob -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

template <typename T>
inline T gelu_value(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<T> out(numel(out_shape));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data();
  const bool same = a.shape() == b.shape();
  switch (op) {
    case BinaryOp::Add:
      if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
      } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] + pb[j]; });
      }
      break;
    case BinaryOp::Sub:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] - pb[j]; });
      break;
    case BinaryOp::Mul:
      if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
      } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] * pb[j]; });
      }
      break;
    case BinaryOp::Div:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] / pb[j]; });
      break;
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(out_shape, std::move(out), {&a, &b},
                        [an, bn, op, out_shape, sa, sb](detail::Node<T>& self) {
    const T* g = self.grad.data();
    const T* va = an->data.data();
    const T* vb = bn->data.data();
    T* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
    T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      switch (op) {
        case BinaryOp::Add:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] += g[o];
          break;
        case BinaryOp::Sub:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] -= g[o];
          break;
        case BinaryOp::Mul:
          if (ga) ga[i] += g[o] * vb[j];
          if (gb) gb[j] += g[o] * va[i];
          break;
        case BinaryOp::Div:
          if (ga) ga[i] += g[o] / vb[j];
          if (gb) gb[j] -= g[o] * va[i] / (vb[j] * vb[j]);
          break;
      }
    });
  });
}

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, T b) {
  std::vector<T> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (op) {
      case BinaryOp::Add: out[i] = d[i] + b; break;
      case BinaryOp::Sub: out[i] = d[i] - b; break;
      case BinaryOp::Mul: out[i] = d[i] * b; break;
      case BinaryOp::Div: out[i] = d[i] / b; break;
    }
  }
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), {&a}, [an, op, b](detail::Node<T>& self) {
    auto& ga = an->ensure_grad();
    const T scale = op == BinaryOp::Mul ? b : op == BinaryOp::Div ? T(1) / b : T(1);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * scale;
  });
}

template <typename T>
Tensor<T> unary(UnaryOp op, const Tensor<T>& x) {
  const auto d = x.data();
  std::vector<T> out(d.size());
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Eigen::Index n = Eigen::Index(d.size());
  if (op == UnaryOp::Gelu) {
    // Vectorized tanh; the scalar loop below is several times slower.
    Eigen::Map<const Arr> xv(d.data(), n);
    Eigen::Map<Arr> ov(out.data(), n);
    const T c = T(0.7978845608028654);
    ov = (c * (xv + T(0.044715) * xv.cube())).tanh();
    ov = T(0.5) * xv * (T(1) + ov);
  }
  for (std::size_t i = 0; i < d.size() && op != UnaryOp::Gelu; ++i) {
    const T v = d[i];
    switch (op) {
      case UnaryOp::Neg: out[i] = -v; break;
      case UnaryOp::Exp: out[i] = std::exp(v); break;
      case UnaryOp::Log: out[i] = std::log(v); break;
      case UnaryOp::Tanh: out[i] = std::tanh(v); break;
      case UnaryOp::Sigmoid: out[i] = T(1) / (T(1) + std::exp(-v)); break;
      case UnaryOp::Silu: out[i] = v / (T(1) + std::exp(-v)); break;
      case UnaryOp::Gelu: out[i] = gelu_value(v); break;
      case UnaryOp::Relu: out[i] = v > T(0) ? v : T(0); break;
      case UnaryOp::Square: out[i] = v * v; break;
      case UnaryOp::Sqrt: out[i] = std::sqrt(v); break;
    }
  }
  auto xn = x.node();
  auto result = make_result<T>(x.shape(), std::move(out), {&x}, nullptr);
  if (!result.requires_grad()) return result;
  result.node()->backward = [xn, op](detail::Node<T>& self) {
    auto& gx = xn->ensure_grad();
    const auto& v = xn->data;
    const auto& y = self.data;
    if (op == UnaryOp::Gelu) {
      using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
      const Eigen::Index n = Eigen::Index(gx.size());
      Eigen::Map<const Arr> xv(v.data(), n), gy(self.grad.data(), n);
      Eigen::Map<Arr> g(gx.data(), n);
      const T c = T(0.7978845608028654);
      const Arr th = (c * (xv + T(0.044715) * xv.cube())).tanh();
      const Arr du = c * (T(1) + T(3 * 0.044715) * xv.square());
      g += gy * (T(0.5) * (T(1) + th) + T(0.5) * xv * (T(1) - th.square()) * du);
      return;
    }
    for (std::size_t i = 0; i < gx.size(); ++i) {
      T dy;
      switch (op) {
        case UnaryOp::Neg: dy = T(-1); break;
        case UnaryOp::Exp: dy = y[i]; break;
        case UnaryOp::Log: dy = T(1) / v[i]; break;
        case UnaryOp::Tanh: dy = T(1) - y[i] * y[i]; break;
        case UnaryOp::Sigmoid: dy = y[i] * (T(1) - y[i]); break;
        case UnaryOp::Silu: {
          const T s = T(1) / (T(1) + std::exp(-v[i]));
          dy = s * (T(1) + v[i] * (T(1) - s));
          break;
        }
        case UnaryOp::Gelu: dy = gelu_grad(v[i]); break;
        case UnaryOp::Relu: dy = v[i] > T(0) ? T(1) : T(0); break;
        case UnaryOp::Square: dy = T(2) * v[i]; break;
        case UnaryOp::Sqrt: dy = T(0.5) / y[i]; break;
        default: dy = T(0);
      }
      gx[i] += self.grad[i] * dy;
    }
  };
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto xn = x.node();
  return make_result<T>(Shape{}, {acc}, {&x}, [xn](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return sum(x) / static_cast<T>(std::max<std::size_t>(1, x.numel()));
}

namespace {
struct AxisSplit {
  std::size_t outer, n, inner;
};
AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  const auto sp = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const T* d = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k) {
      const T* row = d + (o * sp.n + k) * sp.inner;
      T* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += row[i];
    }
  auto xn = x.node();
  return make_result<T>(out_shape, std::move(out), {&x}, [xn, sp](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k) {
        T* row = g.data() + (o * sp.n + k) * sp.inner;
        const T* src = self.grad.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) row[i] += src[i];
      }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim) {
  return sum(x, axis, keepdim) / static_cast<T>(x.shape().at(axis));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  const bool shared_b = b.rank() == 2;
  std::size_t batch = numel(out_shape);
  if (!shared_b) {
    Shape bl(b.shape().begin(), b.shape().end() - 2);
    if (bl != out_shape) {
      throw ShapeError("matmul batch dimensions differ: " + to_string(a.shape()) + " x " +
                       to_string(b.shape()));
    }
  }
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n);
  if (shared_b) {
    ConstMatMap<T> A(a.data().data(), Eigen::Index(batch * m), Eigen::Index(k));
    ConstMatMap<T> B(b.data().data(), Eigen::Index(k), Eigen::Index(n));
    MatMap<T> C(out.data(), Eigen::Index(batch * m), Eigen::Index(n));
    C.noalias() = A * B;
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap<T> A(a.data().data() + i * m * k, Eigen::Index(m), Eigen::Index(k));
      ConstMatMap<T> B(b.data().data() + i * k * n, Eigen::Index(k), Eigen::Index(n));
      MatMap<T> C(out.data() + i * m * n, Eigen::Index(m), Eigen::Index(n));
      C.noalias() = A * B;
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(out_shape, std::move(out), {&a, &b},
                        [an, bn, batch, m, k, n, shared_b](detail::Node<T>& self) {
    const Eigen::Index M = Eigen::Index(m), K = Eigen::Index(k), N = Eigen::Index(n);
    if (shared_b) {
      const Eigen::Index BM = Eigen::Index(batch * m);
      ConstMatMap<T> G(self.grad.data(), BM, N);
      if (an->requires_grad) {
        MatMap<T> GA(an->ensure_grad().data(), BM, K);
        ConstMatMap<T> B(bn->data.data(), K, N);
        GA.noalias() += G * B.transpose();
      }
      if (bn->requires_grad) {
        MatMap<T> GB(bn->ensure_grad().data(), K, N);
        ConstMatMap<T> A(an->data.data(), BM, K);
        GB.noalias() += A.transpose() * G;
      }
      return;
    }
    T* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
    T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap<T> G(self.grad.data() + i * m * n, M, N);
      if (ga) {
        MatMap<T> GA(ga + i * m * k, M, K);
        ConstMatMap<T> B(bn->data.data() + i * k * n, K, N);
        GA.noalias() += G * B.transpose();
      }
      if (gb) {
        MatMap<T> GB(gb + i * k * n, K, N);
        ConstMatMap<T> A(an->data.data() + i * m * k, M, K);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return make_result<T>(std::move(shape), std::move(out), {&x}, [xn](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace {
// Maps each output flat index to its input flat index under an axis permutation.
std::vector<std::size_t> permutation_index(const Shape& in, const std::vector<std::size_t>& order) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(r);
  std::vector<std::size_t> st(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[order[i]];
    st[i] = in_strides[order[i]];
  }
  std::vector<std::size_t> map(numel(in));
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < map.size(); ++o) {
    map[o] = src;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      src += st[k];
      if (idx[k] < out[k]) break;
      src -= st[k] * out[k];
      idx[k] = 0;
    }
  }
  return map;
}
}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  if (order.size() != r) throw ShapeError("permute: order length does not match rank");
  std::vector<bool> used(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (order[i] >= r || used[order[i]]) throw ShapeError("permute: invalid axis order");
    used[order[i]] = true;
    out_shape[i] = x.dim(order[i]);
  }
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_index(x.shape(), order));
  std::vector<T> out(x.numel());
  const T* d = x.data().data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = d[(*map)[o]];
  auto xn = x.node();
  return make_result<T>(out_shape, std::move(out), {&x}, [xn, map](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*map)[o]] += self.grad[o];
  });
}

template <typename T>
Tensor<T> transpose_last(const Tensor<T>& x) {
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x.rank() - 1], order[x.rank() - 2]);
  return permute(x, order);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  const T* d = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = d[base];
      for (std::size_t k = 1; k < sp.n; ++k) mx = std::max(mx, d[base + k * sp.inner]);
      T z = T(0);
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T e = std::exp(d[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= z;
    }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, sp](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    const T* y = self.data.data();
    const T* gy = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T dot = T(0);
        for (std::size_t k = 0; k < sp.n; ++k) dot += y[base + k * sp.inner] * gy[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t q = base + k * sp.inner;
          g[q] += y[q] * (gy[q] - dot);
        }
      }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const T* d = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = d + r * n;
    T mu = T(0);
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= T(n);
    T var = T(0);
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (row[i] - mu) * is;
  }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, [xn, inv_std, n, rows](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xh = self.data.data() + r * n;
      const T* gy = self.grad.data() + r * n;
      T mg = T(0), mgx = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        mg += gy[i];
        mgx += gy[i] * xh[i];
      }
      mg /= T(n);
      mgx /= T(n);
      const T is = (*inv_std)[r];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += is * (gy[i] - mg - xh[i] * mgx);
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) {
        throw ShapeError("concat: shapes " + to_string(parts[0].shape()) + " and " +
                         to_string(s) + " differ off the concat axis");
      }
    }
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto sp = split_axis(out_shape, axis);
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> widths, starts;
  std::size_t start = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * sp.inner;
    widths.push_back(w);
    starts.push_back(start);
    const T* src = p.data().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(src + o * w, src + (o + 1) * w, out.data() + o * total * sp.inner + start);
    start += w;
  }
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  const std::size_t row = total * sp.inner;
  return make_result<T>(out_shape, std::move(out), parts,
                        [nodes, widths, starts, sp, row](detail::Node<T>& self) {
    for (std::size_t q = 0; q < nodes.size(); ++q) {
      if (!nodes[q]->requires_grad) continue;
      auto& g = nodes[q]->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* src = self.grad.data() + o * row + starts[q];
        T* dst = g.data() + o * widths[q];
        for (std::size_t i = 0; i < widths[q]; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = split_axis(x.shape(), axis);
  if (begin > end || end > sp.n) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for axis of extent " + std::to_string(sp.n));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t w = (end - begin) * sp.inner;
  std::vector<T> out(sp.outer * w);
  const T* d = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy(d + (o * sp.n + begin) * sp.inner, d + (o * sp.n + begin) * sp.inner + w,
              out.data() + o * w);
  auto xn = x.node();
  return make_result<T>(out_shape, std::move(out), {&x}, [xn, sp, begin, w](detail::Node<T>& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      T* dst = g.data() + (o * sp.n + begin) * sp.inner;
      const T* src = self.grad.data() + o * w;
      for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ");
  }
  return mean(square(a - b));
}

template <typename T>
Tensor<T> segment_softmax(const Tensor<T>& logits, const Csr& csr) {
  if (logits.rank() != 2 || logits.dim(0) != csr.nnz()) {
    throw ShapeError("segment_softmax: logits " + to_string(logits.shape()) +
                     " do not match " + std::to_string(csr.nnz()) + " edges");
  }
  const std::size_t H = logits.dim(1);
  std::vector<T> out(logits.numel());
  const T* d = logits.data().data();
  for (std::size_t r = 0; r < csr.rows(); ++r) {
    const std::size_t b = csr.offsets[r], e = csr.offsets[r + 1];
    if (b == e) continue;
    for (std::size_t h = 0; h < H; ++h) {
      T mx = d[b * H + h];
      for (std::size_t q = b + 1; q < e; ++q) mx = std::max(mx, d[q * H + h]);
      T z = T(0);
      for (std::size_t q = b; q < e; ++q) {
        out[q * H + h] = std::exp(d[q * H + h] - mx);
        z += out[q * H + h];
      }
      for (std::size_t q = b; q < e; ++q) out[q * H + h] /= z;
    }
  }
  auto ln = logits.node();
  auto offsets = std::make_shared<std::vector<std::size_t>>(csr.offsets);
  return make_result<T>(logits.shape(), std::move(out), {&logits},
                        [ln, offsets, H](detail::Node<T>& self) {
    auto& g = ln->ensure_grad();
    const auto& off = *offsets;
    for (std::size_t r = 0; r + 1 < off.size(); ++r) {
      for (std::size_t h = 0; h < H; ++h) {
        T dot = T(0);
        for (std::size_t q = off[r]; q < off[r + 1]; ++q) dot += self.data[q * H + h] * self.grad[q * H + h];
        for (std::size_t q = off[r]; q < off[r + 1]; ++q)
          g[q * H + h] += self.data[q * H + h] * (self.grad[q * H + h] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> segment_aggregate(const Tensor<T>& weights, const Csr& csr, const Tensor<T>& values) {
  if (weights.rank() != 2 || weights.dim(0) != csr.nnz()) {
    throw ShapeError("segment_aggregate: weights " + to_string(weights.shape()) +
                     " do not match " + std::to_string(csr.nnz()) + " edges");
  }
  if (values.rank() != 3) {
    throw ShapeError("segment_aggregate: values must be (B, P, C), got " + to_string(values.shape()));
  }
  const std::size_t H = weights.dim(1);
  const std::size_t B = values.dim(0), P = values.dim(1), C = values.dim(2);
  for (auto j : csr.index) {
    if (j >= P) throw ShapeError("segment_aggregate: neighbour index out of range");
  }
  const std::size_t R = csr.rows();
  std::vector<T> out(B * R * H * C, T(0));
  const T* w = weights.data().data();
  const T* v = values.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < R; ++r) {
      T* __restrict dst = out.data() + (b * R + r) * H * C;
      for (std::size_t q = csr.offsets[r]; q < csr.offsets[r + 1]; ++q) {
        const T* __restrict src = v + (b * P + csr.index[q]) * C;
        const T* wq = w + q * H;
        if (C == 1) {
          for (std::size_t h = 0; h < H; ++h) dst[h] += wq[h] * src[0];
          continue;
        }
        for (std::size_t h = 0; h < H; ++h) {
          const T a = wq[h];
          T* __restrict dh = dst + h * C;
          for (std::size_t c = 0; c < C; ++c) dh[c] += a * src[c];
        }
      }
    }
  auto wn = weights.node();
  auto vn = values.node();
  auto shared = std::make_shared<Csr>(csr);
  return make_result<T>(Shape{B, R, H * C}, std::move(out), {&weights, &values},
                        [wn, vn, shared, B, P, C, H, R](detail::Node<T>& self) {
    const Csr& g = *shared;
    T* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
    T* gv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
    const T* w = wn->data.data();
    const T* v = vn->data.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r < R; ++r) {
        const T* __restrict go = self.grad.data() + (b * R + r) * H * C;
        for (std::size_t q = g.offsets[r]; q < g.offsets[r + 1]; ++q) {
          const std::size_t src = (b * P + g.index[q]) * C;
          const T* __restrict vs = v + src;
          if (gw) {
            T* __restrict gq = gw + q * H;
            if (C == 1) {
              for (std::size_t h = 0; h < H; ++h) gq[h] += go[h] * vs[0];
            } else {
              for (std::size_t h = 0; h < H; ++h) {
                const T* gh = go + h * C;
                T acc = T(0);
                for (std::size_t c = 0; c < C; ++c) acc += gh[c] * vs[c];
                gq[h] += acc;
              }
            }
          }
          if (gv) {
            T* __restrict gs = gv + src;
            const T* wq = w + q * H;
            if (C == 1) {
              T acc = T(0);
              for (std::size_t h = 0; h < H; ++h) acc += wq[h] * go[h];
              gs[0] += acc;
            } else {
              for (std::size_t h = 0; h < H; ++h) {
                const T a = wq[h];
                const T* gh = go + h * C;
                for (std::size_t c = 0; c < C; ++c) gs[c] += a * gh[c];
              }
            }
          }
        }
      }
  });
}

#define LFM_INSTANTIATE(T)                                                                  \
  template Tensor<T> elementwise<T>(BinaryOp, const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> elementwise<T>(BinaryOp, const Tensor<T>&, T);                        \
  template Tensor<T> unary<T>(UnaryOp, const Tensor<T>&);                                  \
  template Tensor<T> sum<T>(const Tensor<T>&);                                             \
  template Tensor<T> mean<T>(const Tensor<T>&);                                            \
  template Tensor<T> sum<T>(const Tensor<T>&, std::size_t, bool);                          \
  template Tensor<T> mean<T>(const Tensor<T>&, std::size_t, bool);                         \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                  \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);        \
  template Tensor<T> transpose_last<T>(const Tensor<T>&);                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, T);                                   \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);    \
  template Tensor<T> mse<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> segment_softmax<T>(const Tensor<T>&, const Csr&);                     \
  template Tensor<T> segment_aggregate<T>(const Tensor<T>&, const Csr&, const Tensor<T>&);

LFM_INSTANTIATE(float)
LFM_INSTANTIATE(double)
#undef LFM_INSTANTIATE

}  // namespace lfm
