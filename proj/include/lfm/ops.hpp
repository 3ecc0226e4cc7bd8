#pragma once

#include <cstdint>
#include <vector>

#include "lfm/tensor.hpp"

namespace lfm {

enum class BinaryOp { Add, Sub, Mul, Div };
enum class UnaryOp { Neg, Exp, Log, Tanh, Sigmoid, Silu, Gelu, Relu, Square, Sqrt };

/// Shape of a numpy-style broadcast (trailing axes aligned). Throws ShapeError.
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, T b);
template <typename T>
Tensor<T> unary(UnaryOp op, const Tensor<T>& x);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Add, a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(BinaryOp::Div, a, b); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Add, a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, T b) { return elementwise(BinaryOp::Div, a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return unary(UnaryOp::Neg, a); }

template <typename T> Tensor<T> exp(const Tensor<T>& x) { return unary(UnaryOp::Exp, x); }
template <typename T> Tensor<T> log(const Tensor<T>& x) { return unary(UnaryOp::Log, x); }
template <typename T> Tensor<T> tanh(const Tensor<T>& x) { return unary(UnaryOp::Tanh, x); }
template <typename T> Tensor<T> silu(const Tensor<T>& x) { return unary(UnaryOp::Silu, x); }
template <typename T> Tensor<T> gelu(const Tensor<T>& x) { return unary(UnaryOp::Gelu, x); }
template <typename T> Tensor<T> square(const Tensor<T>& x) { return unary(UnaryOp::Square, x); }

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis, bool keepdim = false);

/// (..., m, k) x (..., k, n). `b` may be 2-D, in which case it is shared across
/// all leading dims of `a`; otherwise leading dims must match exactly.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
/// Normalizes over the last axis to zero mean / unit variance (no affine).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5));

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

enum class Padding { Zero, Periodic };

struct ConvGeometry {
  std::vector<std::size_t> stride;
  std::vector<std::size_t> pad;
  Padding mode = Padding::Zero;
};

/// Channels-last convolution (cross-correlation), 1-D or 2-D.
/// x: (B, S..., Cin), w: (K..., Cin, Cout) -> (B, O..., Cout) with
/// O = floor((S + 2p - K) / stride) + 1.
template <typename T>
Tensor<T> conv(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& geom);

/// Adjoint of `conv` with respect to its input.
/// x: (B, O..., Cin), w: (K..., Cout, Cin) -> (B, out_extents..., Cout).
template <typename T>
Tensor<T> conv_transpose(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& geom,
                         const std::vector<std::size_t>& out_extents);

std::vector<std::size_t> conv_output_extents(const std::vector<std::size_t>& in,
                                             const std::vector<std::size_t>& kernel,
                                             const ConvGeometry& geom);

/// CSR neighbourhood layout: row r owns entries [offsets[r], offsets[r+1]).
struct Csr {
  std::vector<std::size_t> offsets;
  std::vector<std::uint32_t> index;
  std::size_t rows() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t nnz() const { return index.size(); }
};

/// Softmax of logits (nnz, H) within each CSR row, per column.
template <typename T>
Tensor<T> segment_softmax(const Tensor<T>& logits, const Csr& csr);

/// out[b, r, h*C + c] = sum_{e in row r} w[e, h] * values[b, index[e], c].
/// weights: (nnz, H), values: (B, P, C) -> (B, rows, H*C).
template <typename T>
Tensor<T> segment_aggregate(const Tensor<T>& weights, const Csr& csr, const Tensor<T>& values);

}  // namespace lfm
