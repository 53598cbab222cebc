#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace nestnet {

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor. float for training, double for verification runs.
template <class S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp, S fill = S(0)) : shape(std::move(shp)) {
    size_t n = 1;
    for (int d : shape) {
      if (d < 1) throw std::invalid_argument("tensor dims must be >= 1, got " + shape_str(shape));
      n *= static_cast<size_t>(d);
    }
    data.assign(n, fill);
  }

  size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  S& operator[](size_t i) { return data[i]; }
  const S& operator[](size_t i) const { return data[i]; }

  size_t idx2(int r, int c) const {
    return static_cast<size_t>(r) * static_cast<size_t>(shape[1]) + static_cast<size_t>(c);
  }
  size_t idx4(int b, int c, int y, int x) const {
    return ((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x;
  }
  S& at2(int r, int c) { return data[idx2(r, c)]; }
  const S& at2(int r, int c) const { return data[idx2(r, c)]; }
  S& at4(int b, int c, int y, int x) { return data[idx4(b, c, y, x)]; }
  const S& at4(int b, int c, int y, int x) const { return data[idx4(b, c, y, x)]; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

// Bit-level equality: same shape and same scalar bit patterns.
template <class S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) return false;
  if (a.data.empty()) return b.data.empty();
  return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(S)) == 0;
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("max_abs_diff: shapes differ, " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

template <class To, class From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  Tensor<To> out;
  out.shape = t.shape;
  out.data.resize(t.data.size());
  for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

}  // namespace nestnet
