#include "cfp/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cassert>
#include <cmath>

namespace cfp {

// Eight interleaved partial sums combined in a fixed tree: vectorizable and
// still deterministic.
float dot(std::span<const float> a, std::span<const float> b) {
  assert(a.size() == b.size());
  const std::size_t n = a.size();
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  for (std::size_t k = 0; i < n; ++i, ++k) acc[k] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

float norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

Vec subtract(std::span<const float> a, std::span<const float> b) {
  assert(a.size() == b.size());
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vec scaled(std::span<const float> a, float s) {
  Vec out(a.begin(), a.end());
  for (float& x : out) x *= s;
  return out;
}

void add_scaled(std::span<float> a, std::span<const float> b, float s) {
  assert(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

namespace kernels {
namespace {

constexpr std::size_t kColumnBlock = 256;
constexpr std::size_t kRowBlock = 4;
// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 16;

// y[c0:c1) = bias + Σ_i x[i] w[i][c0:c1), accumulated in increasing i.
void linear_columns(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> y,
                    std::size_t c0, std::size_t c1) {
  if (bias.empty()) {
    std::fill(y.begin() + c0, y.begin() + c1, 0.0f);
  } else {
    std::copy(bias.begin() + c0, bias.begin() + c1, y.begin() + c0);
  }
  float* out = y.data();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const float xi = x[i];
    const float* wr = w.row(i).data();
    for (std::size_t c = c0; c < c1; ++c) out[c] += xi * wr[c];
  }
}

// Same per-element order as linear_columns, but streams each weight row once
// for a block of input rows.
void linear_row_block(const Matrix& x, std::size_t r0, std::size_t r1, const Matrix& w,
                      std::span<const float> bias, Matrix& y) {
  const std::size_t out = w.cols();
  for (std::size_t r = r0; r < r1; ++r) {
    auto yr = y.row(r);
    if (bias.empty()) {
      std::fill(yr.begin(), yr.end(), 0.0f);
    } else {
      std::copy(bias.begin(), bias.end(), yr.begin());
    }
  }
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const float* wr = w.row(i).data();
    for (std::size_t r = r0; r < r1; ++r) {
      const float xi = x(r, i);
      float* yr = y.row(r).data();
      for (std::size_t c = 0; c < out; ++c) yr[c] += xi * wr[c];
    }
  }
}

}  // namespace

void linear_row(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> y) {
  assert(x.size() == w.rows());
  assert(y.size() == w.cols());
  assert(bias.empty() || bias.size() == w.cols());
  const std::size_t out = w.cols();
  const std::size_t blocks = (out + kColumnBlock - 1) / kColumnBlock;
  const bool parallel = !omp_in_parallel() && blocks > 1 && w.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t b = 0; b < blocks; ++b) {
    linear_columns(x, w, bias, y, b * kColumnBlock, std::min(out, (b + 1) * kColumnBlock));
  }
}

void linear(const Matrix& x, const Matrix& w, std::span<const float> bias, Matrix& y) {
  assert(x.cols() == w.rows());
  if (y.rows() != x.rows() || y.cols() != w.cols()) y = Matrix(x.rows(), w.cols());
  const std::size_t blocks = (x.rows() + kRowBlock - 1) / kRowBlock;
  const bool parallel = !omp_in_parallel() && blocks > 1 && x.rows() * w.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t b = 0; b < blocks; ++b) {
    linear_row_block(x, b * kRowBlock, std::min(x.rows(), (b + 1) * kRowBlock), w, bias, y);
  }
}

void linear_transposed_row(std::span<const float> x, const Matrix& e, std::span<float> y) {
  assert(x.size() == e.cols());
  assert(y.size() == e.rows());
  const std::size_t n = e.rows();
  const bool parallel = !omp_in_parallel() && e.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t v = 0; v < n; ++v) y[v] = dot(x, e.row(v));
}

void linear_transposed(const Matrix& x, const Matrix& e, Matrix& y) {
  assert(x.cols() == e.cols());
  if (y.rows() != x.rows() || y.cols() != e.rows()) y = Matrix(x.rows(), e.rows());
  const std::size_t n = e.rows();
  const bool parallel = !omp_in_parallel() && x.rows() * e.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t v = 0; v < n; ++v) {
    const auto ev = e.row(v);
    for (std::size_t r = 0; r < x.rows(); ++r) y(r, v) = dot(x.row(r), ev);
  }
}

void layer_norm_row(std::span<const float> x, std::span<const float> scale, std::span<const float> bias, float eps,
                    std::span<float> y) {
  const std::size_t n = x.size();
  float mean = 0.0f;
  for (float v : x) mean += v;
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mean) * inv * scale[i] + bias[i];
}

void layer_norm(const Matrix& x, std::span<const float> scale, std::span<const float> bias, float eps, Matrix& y) {
  if (y.rows() != x.rows() || y.cols() != x.cols()) y = Matrix(x.rows(), x.cols());
  const bool parallel = !omp_in_parallel() && x.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t r = 0; r < x.rows(); ++r) layer_norm_row(x.row(r), scale, bias, eps, y.row(r));
}

void gelu(std::span<float> x) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  constexpr float kCoef = 0.044715f;
  const bool parallel = !omp_in_parallel() && x.size() >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float v = x[i];
    x[i] = 0.5f * v * (1.0f + std::tanh(kSqrt2OverPi * (v + kCoef * v * v * v)));
  }
}

void attend_row(std::span<const float> q, const Matrix& keys, const Matrix& values, std::size_t n_keys,
                std::span<float> weights, std::span<float> z) {
  assert(n_keys >= 1 && n_keys <= keys.rows() && n_keys <= values.rows());
  assert(weights.size() >= n_keys);
  const float denom = std::sqrt(static_cast<float>(q.size()));
  float max_score = -INFINITY;
  for (std::size_t u = 0; u < n_keys; ++u) {
    weights[u] = dot(q, keys.row(u)) / denom;
    max_score = std::max(max_score, weights[u]);
  }
  float total = 0.0f;
  for (std::size_t u = 0; u < n_keys; ++u) {
    weights[u] = std::exp(weights[u] - max_score);
    total += weights[u];
  }
  for (std::size_t u = 0; u < n_keys; ++u) weights[u] /= total;
  for (std::size_t u = n_keys; u < weights.size(); ++u) weights[u] = 0.0f;

  std::fill(z.begin(), z.end(), 0.0f);
  for (std::size_t u = 0; u < n_keys; ++u) {
    const float wu = weights[u];
    const auto vu = values.row(u);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += wu * vu[j];
  }
}

}  // namespace kernels
}  // namespace cfp
