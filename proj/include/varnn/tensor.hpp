// Copyright 2026 The varnn authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace varnn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/length disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (bad FFT size, unknown cell kind, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse (backward on a non-scalar, empty tape, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major tensor. Rank 1 and 2 are the only ranks the ops use.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(numel_of(t.shape), T(0));
    return t;
  }
  static Tensor full(std::vector<int> s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<T> d) {
    Tensor t;
    t.shape = {static_cast<int>(d.size())};
    t.data = std::move(d);
    return t;
  }
  static Tensor matrix(int r, int c, std::vector<T> d) {
    Tensor t;
    t.shape = {r, c};
    t.data = std::move(d);
    if (t.data.size() != static_cast<size_t>(r) * c) throw DimensionError("matrix data does not fill " + std::to_string(r) + "x" + std::to_string(c));
    return t;
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
  }

  size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  // 2-D accessors; rank-1 tensors count as a single row.
  int rows() const { return rank() == 2 ? shape[0] : 1; }
  int cols() const { return rank() == 2 ? shape[1] : (shape.empty() ? 0 : shape[0]); }
  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool is_scalar() const { return data.size() == 1; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
std::string shape_str(const Tensor<T>& t) {
  return shape_str(t.shape);
}

}  // namespace varnn
