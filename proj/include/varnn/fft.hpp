// Copyright 2026 The varnn authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <complex>
#include <vector>

#include "varnn/tensor.hpp"

namespace varnn {

/// In-place complex FFT, any length. Radix-2 Cooley-Tukey for powers of
/// two, Bluestein's chirp-z otherwise. sign = -1 forward, +1 inverse
/// (inverse is unscaled; divide by n yourself when you need the inverse
/// transform rather than the adjoint).
template <typename T>
void fft_inplace(std::vector<std::complex<T>>& x, int sign);

namespace detail {

inline bool is_pow2(size_t n) { return n && (n & (n - 1)) == 0; }

template <typename T>
void fft_radix2(std::complex<T>* x, size_t n, int sign) {
  // bit reversal
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u(x[i + k]);
        std::complex<double> v = std::complex<double>(x[i + k + len / 2]) * w;
        x[i + k] = std::complex<T>(u + v);
        x[i + k + len / 2] = std::complex<T>(u - v);
        w *= wl;
      }
    }
  }
}

template <typename T>
void fft_bluestein(std::vector<std::complex<T>>& x, int sign) {
  const size_t n = x.size();
  size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  // chirp in double regardless of T; the quadratic phase wraps fast
  std::vector<std::complex<double>> chirp(n);
  for (size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the phase argument small for large n
    const size_t k2 = (k * k) % (2 * n);
    const double ang = sign * M_PI * static_cast<double>(k2) / static_cast<double>(n);
    chirp[k] = {std::cos(ang), std::sin(ang)};
  }
  std::vector<std::complex<double>> a(m, {0.0, 0.0}), b(m, {0.0, 0.0});
  for (size_t k = 0; k < n; ++k) a[k] = std::complex<double>(x[k]) * chirp[k];
  b[0] = std::conj(chirp[0]);
  for (size_t k = 1; k < n; ++k) b[k] = b[m - k] = std::conj(chirp[k]);
  fft_radix2(a.data(), m, -1);
  fft_radix2(b.data(), m, -1);
  for (size_t k = 0; k < m; ++k) a[k] *= b[k];
  fft_radix2(a.data(), m, +1);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (size_t k = 0; k < n; ++k) x[k] = std::complex<T>(a[k] * inv_m * chirp[k]);
}

}  // namespace detail

template <typename T>
void fft_inplace(std::vector<std::complex<T>>& x, int sign) {
  const size_t n = x.size();
  if (n <= 1) return;
  if (detail::is_pow2(n)) {
    detail::fft_radix2(x.data(), n, sign);
  } else {
    detail::fft_bluestein(x, sign);
  }
}

/// Real-input forward FFT: returns bins 0..n/2 (n even) as interleaved
/// (re, im) pairs appended to `out`. n = x length.
template <typename T>
void rfft(const T* x, size_t n, T* out_interleaved) {
  std::vector<std::complex<T>> buf(n);
  for (size_t i = 0; i < n; ++i) buf[i] = {x[i], T(0)};
  fft_inplace(buf, -1);
  const size_t nb = n / 2 + 1;
  for (size_t k = 0; k < nb; ++k) {
    out_interleaved[2 * k] = buf[k].real();
    out_interleaved[2 * k + 1] = buf[k].imag();
  }
}

/// Adjoint of rfft as a linear map R^n -> R^{2(n/2+1)}: given the loss
/// gradient w.r.t. the interleaved bins, produce the gradient w.r.t. the
/// real input. No conjugate-symmetric double counting: bins beyond n/2
/// were never produced, so their adjoint contribution is zero.
template <typename T>
void rfft_adjoint(const T* gbins_interleaved, size_t n, T* gx) {
  std::vector<std::complex<T>> buf(n, std::complex<T>(T(0), T(0)));
  const size_t nb = n / 2 + 1;
  for (size_t k = 0; k < nb; ++k) buf[k] = {gbins_interleaved[2 * k], gbins_interleaved[2 * k + 1]};
  fft_inplace(buf, +1);
  for (size_t i = 0; i < n; ++i) gx[i] = buf[i].real();
}

}  // namespace varnn
