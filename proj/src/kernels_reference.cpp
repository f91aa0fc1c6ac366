// Straightforward serial versions of the forward-pass kernels. Only tests and
// benchmarks link against these.

#include <cmath>

#include "cfp/kernels.hpp"

namespace cfp::kernels::reference {

void linear(const Matrix& x, const Matrix& w, std::span<const float> bias, Matrix& y) {
  y = Matrix(x.rows(), w.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      float acc = bias.empty() ? 0.0f : bias[c];
      for (std::size_t i = 0; i < w.rows(); ++i) acc += x(r, i) * w(i, c);
      y(r, c) = acc;
    }
  }
}

void linear_transposed(const Matrix& x, const Matrix& e, Matrix& y) {
  y = Matrix(x.rows(), e.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t v = 0; v < e.rows(); ++v) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < e.cols(); ++i) acc += x(r, i) * e(v, i);
      y(r, v) = acc;
    }
  }
}

void layer_norm(const Matrix& x, std::span<const float> scale, std::span<const float> bias, float eps, Matrix& y) {
  y = Matrix(x.rows(), x.cols());
  const auto n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.cols(); ++i) mean += x(r, i);
    mean /= n;
    double var = 0.0;
    for (std::size_t i = 0; i < x.cols(); ++i) var += (x(r, i) - mean) * (x(r, i) - mean);
    var /= n;
    for (std::size_t i = 0; i < x.cols(); ++i) {
      y(r, i) = static_cast<float>((x(r, i) - mean) / std::sqrt(var + eps) * scale[i] + bias[i]);
    }
  }
}

void gelu(std::span<float> x) {
  for (float& v : x) {
    const double d = v;
    v = static_cast<float>(0.5 * d * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (d + 0.044715 * d * d * d))));
  }
}

void causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, Matrix& pattern, Matrix& z) {
  const std::size_t seq = q.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  pattern = Matrix(seq, seq);
  z = Matrix(seq, v.cols());
  for (std::size_t t = 0; t < seq; ++t) {
    double max_score = -INFINITY;
    std::vector<double> s(t + 1);
    for (std::size_t u = 0; u <= t; ++u) {
      double acc = 0.0;
      for (std::size_t j = 0; j < q.cols(); ++j) acc += static_cast<double>(q(t, j)) * k(u, j);
      s[u] = acc * scale;
      max_score = std::max(max_score, s[u]);
    }
    double total = 0.0;
    for (double& e : s) total += (e = std::exp(e - max_score));
    for (std::size_t u = 0; u <= t; ++u) {
      pattern(t, u) = static_cast<float>(s[u] / total);
      for (std::size_t j = 0; j < v.cols(); ++j) z(t, j) += static_cast<float>(s[u] / total * v(u, j));
    }
  }
}

}  // namespace cfp::kernels::reference
