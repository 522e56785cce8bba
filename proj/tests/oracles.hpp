#pragma once

// Naive reference implementations used as independent oracles. Plain loops
// over std::vector, written straight from the formulas; they share no code
// with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "geonorm/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major list of rows

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), Vec(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Vec rmsnorm(const Vec& v) {
  const double n = std::max(norm(v), 1e-12);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n * std::sqrt(double(v.size()));
  return out;
}

inline Vec softmax(const Vec& z) {
  const double m = *std::max_element(z.begin(), z.end());
  Vec e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (e[i] = std::exp(z[i] - m));
  for (double& x : e) x /= s;
  return e;
}

inline double cross_entropy(const Vec& logits, int target) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - m);
  return std::log(s) + m - logits[target];
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double schedule(int kind, int k, int T) {  // 0 harmonic, 1 sqrt, 2 linear
  if (kind == 0) return 1.0 / (k + 1.0);
  if (kind == 1) return 1.0 / std::sqrt(k + 1.0);
  return double(T - k) / T;
}

// One GeoNorm row, following the layer's published reference code.
inline Vec geonorm_row(const Vec& x, const Vec& g, double scale, double bias, double clamp, double factor) {
  const double xg = dot(x, g), xx = dot(x, x);
  Vec grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) grad[i] = g[i] - xg / xx * x[i];
  const double tn = std::max(norm(grad), 1e-8);
  const double r = std::max(norm(x), 1e-6);
  double theta = std::min(tn / r, clamp);
  theta = std::min((theta * scale + bias) * factor, clamp);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * std::cos(theta) + grad[i] / tn * r * std::sin(theta);
  return out;
}

// Single causal attention head over rows q, k, v (seq, d).
inline Mat causal_head(const Mat& q, const Mat& k, const Mat& v) {
  const std::size_t s = q.size(), d = q[0].size();
  Mat out(s, Vec(v[0].size(), 0.0));
  for (std::size_t t = 0; t < s; ++t) {
    Vec scores(t + 1);
    for (std::size_t j = 0; j <= t; ++j) scores[j] = dot(q[t], k[j]) / std::sqrt(double(d));
    const Vec p = softmax(scores);
    for (std::size_t j = 0; j <= t; ++j)
      for (std::size_t c = 0; c < out[t].size(); ++c) out[t][c] += p[j] * v[j][c];
  }
  return out;
}

inline Mat rows_of(const geonorm::DenseTensor& t) {
  Mat m(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) m[r].assign(t.row(r).begin(), t.row(r).end());
  return m;
}

inline geonorm::DenseTensor tensor_of(const Mat& m) {
  std::vector<double> v;
  for (const Vec& row : m) v.insert(v.end(), row.begin(), row.end());
  return geonorm::DenseTensor({m.size(), m[0].size()}, std::move(v));
}

inline geonorm::DenseTensor randn(geonorm::Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  geonorm::DenseTensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, stddev);
  for (double& x : t.values()) x = d(rng);
  return t;
}

}  // namespace oracle
