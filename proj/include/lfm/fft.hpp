#pragma once

// Radix-2 FFTs on complex<double>. Lengths must be powers of two.

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace lfm::fft {

using Complex = std::complex<double>;

bool is_power_of_two(std::size_t n);

/// In-place transform. The inverse includes the 1/N factor.
void transform(std::span<Complex> data, bool inverse);

/// In-place 2-D transform of a row-major n1 x n2 array.
void transform2d(std::span<Complex> data, std::size_t n1, std::size_t n2, bool inverse);

/// Half spectrum X_0 .. X_{N/2} of a real signal.
std::vector<Complex> forward_real(std::span<const double> x);
/// Inverse of forward_real for a signal of length n.
std::vector<double> inverse_real(std::span<const Complex> half, std::size_t n);

/// Full 2-D spectrum of a real n1 x n2 field.
std::vector<Complex> forward_real2d(std::span<const double> x, std::size_t n1, std::size_t n2);
/// Real part of the inverse 2-D transform.
std::vector<double> inverse_real2d(std::span<const Complex> spec, std::size_t n1, std::size_t n2);

/// Signed integer wavenumber of bin i in a length-n transform.
inline long wavenumber(std::size_t i, std::size_t n) {
  return i <= n / 2 ? static_cast<long>(i) : static_cast<long>(i) - static_cast<long>(n);
}

}  // namespace lfm::fft
