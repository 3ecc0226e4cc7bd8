#include <Eigen/Core>
#include <algorithm>

#include "lfm/ops.hpp"

namespace lfm {

namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// 1-D problems are folded into 2-D with a unit second axis.
struct Plan {
  std::size_t batch = 0, channels = 0;
  std::size_t s1 = 1, s2 = 1;  // input extents
  std::size_t k1 = 1, k2 = 1;
  std::size_t o1 = 1, o2 = 1;
  std::size_t st1 = 1, st2 = 1;
  std::size_t p1 = 0, p2 = 0;
  Padding mode = Padding::Zero;

  std::size_t rows() const { return batch * o1 * o2; }
  std::size_t cols() const { return k1 * k2 * channels; }
};

std::size_t out_extent(std::size_t s, std::size_t k, std::size_t stride, std::size_t pad) {
  if (s + 2 * pad < k) {
    throw ShapeError("conv: kernel extent " + std::to_string(k) + " exceeds padded input extent " +
                     std::to_string(s + 2 * pad));
  }
  return (s + 2 * pad - k) / stride + 1;
}

Plan make_plan(std::size_t batch, const std::vector<std::size_t>& spatial,
               const std::vector<std::size_t>& kernel, std::size_t channels,
               const ConvGeometry& g) {
  const std::size_t nd = spatial.size();
  if (nd < 1 || nd > 2 || kernel.size() != nd) {
    throw ShapeError("conv: only 1-D and 2-D spatial layouts are supported");
  }
  auto stride = [&](std::size_t i) { return g.stride.empty() ? std::size_t(1) : g.stride.at(i); };
  auto pad = [&](std::size_t i) { return g.pad.empty() ? std::size_t(0) : g.pad.at(i); };
  Plan p;
  p.batch = batch;
  p.channels = channels;
  p.mode = g.mode;
  p.s1 = spatial[0];
  p.k1 = kernel[0];
  p.st1 = stride(0);
  p.p1 = pad(0);
  if (nd == 2) {
    p.s2 = spatial[1];
    p.k2 = kernel[1];
    p.st2 = stride(1);
    p.p2 = pad(1);
  }
  if (p.st1 == 0 || p.st2 == 0) throw ShapeError("conv: stride must be positive");
  if (p.mode == Padding::Periodic && (p.p1 > p.s1 || p.p2 > p.s2)) {
    throw ShapeError("conv: periodic padding wider than the input");
  }
  p.o1 = out_extent(p.s1, p.k1, p.st1, p.p1);
  p.o2 = out_extent(p.s2, p.k2, p.st2, p.p2);
  return p;
}

// Source spatial index for (output, tap), or -1 when it falls in zero padding.
inline long source_index(std::size_t o, std::size_t k, std::size_t stride, std::size_t pad,
                         std::size_t s, Padding mode) {
  long i = static_cast<long>(o * stride + k) - static_cast<long>(pad);
  const long n = static_cast<long>(s);
  if (mode == Padding::Periodic) {
    i %= n;
    if (i < 0) i += n;
    return i;
  }
  return (i < 0 || i >= n) ? -1 : i;
}

template <typename T>
std::vector<T> im2col(const T* x, const Plan& p) {
  std::vector<T> cols(p.rows() * p.cols(), T(0));
  const std::size_t C = p.channels;
  T* dst = cols.data();
  for (std::size_t b = 0; b < p.batch; ++b)
    for (std::size_t a = 0; a < p.o1; ++a)
      for (std::size_t c2 = 0; c2 < p.o2; ++c2) {
        for (std::size_t u = 0; u < p.k1; ++u) {
          const long i1 = source_index(a, u, p.st1, p.p1, p.s1, p.mode);
          for (std::size_t v = 0; v < p.k2; ++v, dst += C) {
            const long i2 = source_index(c2, v, p.st2, p.p2, p.s2, p.mode);
            if (i1 < 0 || i2 < 0) continue;
            const T* src = x + ((b * p.s1 + std::size_t(i1)) * p.s2 + std::size_t(i2)) * C;
            std::copy(src, src + C, dst);
          }
        }
      }
  return cols;
}

template <typename T>
void col2im_add(const T* cols, const Plan& p, T* x) {
  const std::size_t C = p.channels;
  const T* src = cols;
  for (std::size_t b = 0; b < p.batch; ++b)
    for (std::size_t a = 0; a < p.o1; ++a)
      for (std::size_t c2 = 0; c2 < p.o2; ++c2) {
        for (std::size_t u = 0; u < p.k1; ++u) {
          const long i1 = source_index(a, u, p.st1, p.p1, p.s1, p.mode);
          for (std::size_t v = 0; v < p.k2; ++v, src += C) {
            const long i2 = source_index(c2, v, p.st2, p.p2, p.s2, p.mode);
            if (i1 < 0 || i2 < 0) continue;
            T* dst = x + ((b * p.s1 + std::size_t(i1)) * p.s2 + std::size_t(i2)) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
          }
        }
      }
}

}  // namespace

std::vector<std::size_t> conv_output_extents(const std::vector<std::size_t>& in,
                                             const std::vector<std::size_t>& kernel,
                                             const ConvGeometry& geom) {
  const Plan p = make_plan(1, in, kernel, 1, geom);
  if (in.size() == 1) return {p.o1};
  return {p.o1, p.o2};
}

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& geom) {
  const std::size_t nd = x.rank() - 2;
  if (x.rank() < 3 || w.rank() != nd + 2) {
    throw ShapeError("conv: input " + to_string(x.shape()) + " and weight " +
                     to_string(w.shape()) + " ranks are incompatible");
  }
  const std::size_t cin = x.shape().back();
  if (w.dim(nd) != cin) {
    throw ShapeError("conv: weight " + to_string(w.shape()) + " expects " +
                     std::to_string(w.dim(nd)) + " input channels, input has " +
                     std::to_string(cin));
  }
  const std::size_t cout = w.dim(nd + 1);
  std::vector<std::size_t> spatial(x.shape().begin() + 1, x.shape().end() - 1);
  std::vector<std::size_t> kernel(w.shape().begin(), w.shape().begin() + long(nd));
  const Plan p = make_plan(x.dim(0), spatial, kernel, cin, geom);

  auto cols = std::make_shared<std::vector<T>>(im2col(x.data().data(), p));
  std::vector<T> out(p.rows() * cout);
  {
    ConstMatMap<T> A(cols->data(), Eigen::Index(p.rows()), Eigen::Index(p.cols()));
    ConstMatMap<T> W(w.data().data(), Eigen::Index(p.cols()), Eigen::Index(cout));
    MatMap<T> Y(out.data(), Eigen::Index(p.rows()), Eigen::Index(cout));
    Y.noalias() = A * W;
  }
  Shape out_shape{x.dim(0), p.o1};
  if (nd == 2) out_shape.push_back(p.o2);
  out_shape.push_back(cout);

  auto xn = x.node();
  auto wn = w.node();
  return make_result<T>(out_shape, std::move(out), {&x, &w},
                        [xn, wn, cols, p, cout](detail::Node<T>& self) {
    const auto R = Eigen::Index(p.rows()), K = Eigen::Index(p.cols()), N = Eigen::Index(cout);
    ConstMatMap<T> G(self.grad.data(), R, N);
    if (wn->requires_grad) {
      MatMap<T> GW(wn->ensure_grad().data(), K, N);
      ConstMatMap<T> A(cols->data(), R, K);
      GW.noalias() += A.transpose() * G;
    }
    if (xn->requires_grad) {
      std::vector<T> dcols(p.rows() * p.cols());
      MatMap<T> DC(dcols.data(), R, K);
      ConstMatMap<T> W(wn->data.data(), K, N);
      DC.noalias() = G * W.transpose();
      col2im_add(dcols.data(), p, xn->ensure_grad().data());
    }
  });
}

template <typename T>
Tensor<T> conv_transpose(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& geom,
                         const std::vector<std::size_t>& out_extents) {
  const std::size_t nd = x.rank() - 2;
  if (x.rank() < 3 || w.rank() != nd + 2 || out_extents.size() != nd) {
    throw ShapeError("conv_transpose: input " + to_string(x.shape()) + " and weight " +
                     to_string(w.shape()) + " ranks are incompatible");
  }
  const std::size_t cin = x.shape().back();
  if (w.dim(nd + 1) != cin) {
    throw ShapeError("conv_transpose: weight " + to_string(w.shape()) + " expects " +
                     std::to_string(w.dim(nd + 1)) + " input channels, input has " +
                     std::to_string(cin));
  }
  const std::size_t cout = w.dim(nd);
  std::vector<std::size_t> kernel(w.shape().begin(), w.shape().begin() + long(nd));
  // Plan of the forward conv this op is the adjoint of: out_extents x cout -> O x cin.
  const Plan p = make_plan(x.dim(0), out_extents, kernel, cout, geom);
  std::vector<std::size_t> in_sp(x.shape().begin() + 1, x.shape().end() - 1);
  if (in_sp[0] != p.o1 || (nd == 2 && in_sp[1] != p.o2)) {
    throw ShapeError("conv_transpose: input extents " + to_string(x.shape()) +
                     " do not match the adjoint geometry");
  }
  const auto R = Eigen::Index(p.rows()), K = Eigen::Index(p.cols()), N = Eigen::Index(cin);
  std::vector<T> cols(p.rows() * p.cols());
  {
    ConstMatMap<T> X(x.data().data(), R, N);
    ConstMatMap<T> W(w.data().data(), K, N);
    MatMap<T> Cm(cols.data(), R, K);
    Cm.noalias() = X * W.transpose();
  }
  Shape out_shape{x.dim(0)};
  for (auto e : out_extents) out_shape.push_back(e);
  out_shape.push_back(cout);
  std::vector<T> out(numel(out_shape), T(0));
  col2im_add(cols.data(), p, out.data());

  auto xn = x.node();
  auto wn = w.node();
  return make_result<T>(out_shape, std::move(out), {&x, &w}, [xn, wn, p, R, K, N](detail::Node<T>& self) {
    const std::vector<T> gcols = im2col(self.grad.data(), p);
    ConstMatMap<T> GC(gcols.data(), R, K);
    if (xn->requires_grad) {
      MatMap<T> GX(xn->ensure_grad().data(), R, N);
      ConstMatMap<T> W(wn->data.data(), K, N);
      GX.noalias() += GC * W;
    }
    if (wn->requires_grad) {
      MatMap<T> GW(wn->ensure_grad().data(), K, N);
      ConstMatMap<T> X(xn->data.data(), R, N);
      GW.noalias() += GC.transpose() * X;
    }
  });
}

template Tensor<float> conv<float>(const Tensor<float>&, const Tensor<float>&, const ConvGeometry&);
template Tensor<double> conv<double>(const Tensor<double>&, const Tensor<double>&, const ConvGeometry&);
template Tensor<float> conv_transpose<float>(const Tensor<float>&, const Tensor<float>&,
                                             const ConvGeometry&, const std::vector<std::size_t>&);
template Tensor<double> conv_transpose<double>(const Tensor<double>&, const Tensor<double>&,
                                               const ConvGeometry&, const std::vector<std::size_t>&);

}  // namespace lfm
