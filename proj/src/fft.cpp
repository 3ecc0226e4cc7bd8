#include "lfm/fft.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>

namespace lfm::fft {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

namespace {
void require_pow2(std::size_t n) {
  if (!is_power_of_two(n)) {
    throw std::invalid_argument("fft: length " + std::to_string(n) + " is not a power of two");
  }
}
}  // namespace

void transform(std::span<Complex> a, bool inverse) {
  const std::size_t n = a.size();
  require_pow2(n);
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  // Twiddle table e^{-2 pi i k / n}, evaluated directly per entry.
  thread_local std::map<std::size_t, std::vector<Complex>> tables;
  auto& table = tables[n];
  if (table.size() != n / 2) {
    table.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double ang = -2.0 * std::numbers::pi * double(k) / double(n);
      table[k] = Complex(std::cos(ang), std::sin(ang));
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const Complex w = inverse ? std::conj(table[k * step]) : table[k * step];
        const Complex u = a[i + k];
        const Complex v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
  if (inverse) {
    const double s = 1.0 / double(n);
    for (auto& v : a) v *= s;
  }
}

void transform2d(std::span<Complex> data, std::size_t n1, std::size_t n2, bool inverse) {
  if (data.size() != n1 * n2) throw std::invalid_argument("fft2d: size mismatch");
  require_pow2(n1);
  require_pow2(n2);
  for (std::size_t r = 0; r < n1; ++r) transform(data.subspan(r * n2, n2), inverse);
  std::vector<Complex> col(n1);
  for (std::size_t c = 0; c < n2; ++c) {
    for (std::size_t r = 0; r < n1; ++r) col[r] = data[r * n2 + c];
    transform(col, inverse);
    for (std::size_t r = 0; r < n1; ++r) data[r * n2 + c] = col[r];
  }
}

std::vector<Complex> forward_real(std::span<const double> x) {
  require_pow2(x.size());
  std::vector<Complex> a(x.begin(), x.end());
  transform(a, false);
  a.resize(x.size() / 2 + 1);
  return a;
}

std::vector<double> inverse_real(std::span<const Complex> half, std::size_t n) {
  require_pow2(n);
  if (half.size() != n / 2 + 1) throw std::invalid_argument("inverse_real: half spectrum length mismatch");
  std::vector<Complex> a(n);
  for (std::size_t i = 0; i <= n / 2; ++i) a[i] = half[i];
  for (std::size_t i = n / 2 + 1; i < n; ++i) a[i] = std::conj(half[n - i]);
  transform(a, true);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i].real();
  return out;
}

std::vector<Complex> forward_real2d(std::span<const double> x, std::size_t n1, std::size_t n2) {
  std::vector<Complex> a(x.begin(), x.end());
  transform2d(a, n1, n2, false);
  return a;
}

std::vector<double> inverse_real2d(std::span<const Complex> spec, std::size_t n1, std::size_t n2) {
  std::vector<Complex> a(spec.begin(), spec.end());
  transform2d(a, n1, n2, true);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i].real();
  return out;
}

}  // namespace lfm::fft
