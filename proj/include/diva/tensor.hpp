#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "diva/common.hpp"

namespace diva {

// Dense row-major float32 tensor. Layout for images is NHWC.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }
  Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(numel_of(shape)))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape product " + std::to_string(numel_of(shape)));
  }

  static long long numel_of(const std::vector<int>& s) {
    long long n = 1;
    for (int e : s) {
      if (e < 0) throw ShapeError("negative extent in shape");
      n *= e;
    }
    return n;
  }

  size_t numel() const { return data.size(); }
  int dim(size_t i) const { return shape.at(i); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline size_t numel_of(const std::vector<int>& s) {
  return static_cast<size_t>(Tensor::numel_of(s));
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.same_shape(b); }

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

inline bool all_finite(const Tensor& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline void ensure_finite(const Tensor& t, const std::string& what) {
  if (!all_finite(t)) throw NumericalError(what + ": non-finite value");
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  float m = 0.0f;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

inline float linf_dist(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b); }

inline float l1_norm(const Tensor& t) {
  float s = 0.0f;
  for (float v : t.data) s += std::fabs(v);
  return s;
}

inline void axpy(float a, const Tensor& x, Tensor& y) {
  if (!x.same_shape(y)) throw ShapeError("axpy: shape mismatch");
  for (size_t i = 0; i < x.numel(); ++i) y.data[i] += a * x.data[i];
}

inline void scale(Tensor& t, float a) {
  for (float& v : t.data) v *= a;
}

inline Tensor uniform_tensor(std::vector<int> shape, float lo, float hi, Rng& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline uint64_t tensor_hash(const Tensor& t, uint64_t h = 0xcbf29ce484222325ull) {
  h = fnv1a(t.shape.data(), t.shape.size() * sizeof(int), h);
  return fnv1a(t.data.data(), t.data.size() * sizeof(float), h);
}

}  // namespace diva
