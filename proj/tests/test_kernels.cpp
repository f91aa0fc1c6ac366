#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <random>

#include "cfp/kernels.hpp"
#include "test_support.hpp"

using namespace cfp;
using cfp::test::bit_equal;
using cfp::test::max_abs_diff;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Matrix m(r, c);
  for (float& x : m.data()) x = n(rng);
  return m;
}

Vec random_vec(std::size_t n, std::uint64_t seed) {
  const Matrix m = random_matrix(1, n, seed);
  return {m.data().begin(), m.data().end()};
}

// Thread count is restored when the guard leaves scope.
struct Threads {
  int saved = omp_get_max_threads();
  explicit Threads(int n) { omp_set_num_threads(n); }
  ~Threads() { omp_set_num_threads(saved); }
};

}  // namespace

TEST_CASE("dot and norm agree with double-precision sums") {
  for (std::size_t n : {0u, 1u, 7u, 8u, 9u, 33u, 768u, 1001u}) {
    const Vec a = random_vec(n, n + 1);
    const Vec b = random_vec(n, n + 2);
    double want = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      want += double(a[i]) * b[i];
      sq += double(a[i]) * a[i];
    }
    CHECK(dot(a, b) == doctest::Approx(want).epsilon(1e-5));
    CHECK(norm(a) == doctest::Approx(std::sqrt(sq)).epsilon(1e-5));
  }
}

TEST_CASE("vector helpers") {
  const Vec a{1, 2, 3};
  const Vec b{0.5f, -1, 4};
  CHECK(subtract(a, b) == Vec{0.5f, 3, -1});
  CHECK(scaled(a, 2) == Vec{2, 4, 6});
  Vec c = a;
  add_scaled(c, b, 2);
  CHECK(c == Vec{2, 0, 11});
}

TEST_CASE("linear matches the serial reference") {
  for (auto [rows, in, out] : {std::tuple{1, 3, 5}, {7, 32, 128}, {5, 128, 32}, {3, 768, 300}, {9, 40, 513}}) {
    const Matrix x = random_matrix(rows, in, 11);
    const Matrix w = random_matrix(in, out, 12);
    const Vec bias = random_vec(out, 13);
    Matrix got, want;
    kernels::linear(x, w, bias, got);
    kernels::reference::linear(x, w, bias, want);
    REQUIRE(got.rows() == want.rows());
    REQUIRE(got.cols() == want.cols());
    CHECK(max_abs_diff(got.data(), want.data()) < 1e-4);

    // A single-row call reproduces each batched row exactly.
    Vec row(out);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      kernels::linear_row(x.row(r), w, bias, row);
      CHECK(bit_equal(row, got.row(r)));
    }
  }
}

TEST_CASE("linear without bias") {
  const Matrix x = random_matrix(2, 4, 1);
  const Matrix w = random_matrix(4, 3, 2);
  Matrix got;
  kernels::linear(x, w, {}, got);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double want = 0.0;
      for (std::size_t i = 0; i < 4; ++i) want += double(x(r, i)) * w(i, c);
      CHECK(got(r, c) == doctest::Approx(want).epsilon(1e-6));
    }
  }
}

TEST_CASE("linear_transposed matches the serial reference and its row form") {
  const Matrix x = random_matrix(6, 48, 3);
  const Matrix e = random_matrix(1000, 48, 4);
  Matrix got, want;
  kernels::linear_transposed(x, e, got);
  kernels::reference::linear_transposed(x, e, want);
  CHECK(max_abs_diff(got.data(), want.data()) < 1e-4);
  Vec row(e.rows());
  kernels::linear_transposed_row(x.row(4), e, row);
  CHECK(bit_equal(row, got.row(4)));
}

TEST_CASE("layer_norm matches the serial reference") {
  const Matrix x = random_matrix(5, 64, 5);
  const Vec scale = random_vec(64, 6);
  const Vec bias = random_vec(64, 7);
  Matrix got, want;
  kernels::layer_norm(x, scale, bias, 1e-5f, got);
  kernels::reference::layer_norm(x, scale, bias, 1e-5f, want);
  CHECK(max_abs_diff(got.data(), want.data()) < 1e-5);
  Vec row(64);
  kernels::layer_norm_row(x.row(2), scale, bias, 1e-5f, row);
  CHECK(bit_equal(row, got.row(2)));
}

TEST_CASE("layer_norm of a constant row returns the bias") {
  Matrix x(1, 8);
  for (float& v : x.data()) v = 3.0f;
  const Vec scale(8, 2.0f);
  const Vec bias{1, 2, 3, 4, 5, 6, 7, 8};
  Matrix y;
  kernels::layer_norm(x, scale, bias, 1e-5f, y);
  CHECK(max_abs_diff(y.row(0), bias) < 1e-6);
}

TEST_CASE("gelu follows the tanh approximation") {
  const Vec input{-6.0f, -3.0f, -1.0f, -0.1f, 0.0f, 0.1f, 0.5f, 1.0f, 2.0f, 6.0f};
  Vec x = input;
  Vec ref = input;
  kernels::gelu(x);
  kernels::reference::gelu(ref);
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double u = input[i];
    const double want = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)));
    CHECK(std::abs(x[i] - want) < 1e-6);
    CHECK(std::abs(ref[i] - want) < 1e-6);
  }
  CHECK(x[4] == 0.0f);
}

TEST_CASE("attend_row matches full causal attention") {
  const std::size_t seq = 9, dh = 16;
  const Matrix q = random_matrix(seq, dh, 21);
  const Matrix k = random_matrix(seq, dh, 22);
  const Matrix v = random_matrix(seq, dh, 23);
  Matrix pattern, z;
  kernels::reference::causal_attention(q, k, v, pattern, z);
  Vec weights(seq), zr(dh);
  for (std::size_t t = 0; t < seq; ++t) {
    kernels::attend_row(q.row(t), k, v, t + 1, weights, zr);
    CHECK(max_abs_diff(weights, pattern.row(t)) < 1e-6);
    CHECK(max_abs_diff(zr, z.row(t)) < 1e-5);
    double total = 0.0;
    for (std::size_t u = 0; u <= t; ++u) total += weights[u];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    for (std::size_t u = t + 1; u < seq; ++u) CHECK(weights[u] == 0.0f);
  }
}

TEST_CASE("attention is stable for large scores") {
  Matrix q(1, 4), k(2, 4), v(2, 4);
  for (float& x : q.data()) x = 1e4f;
  for (float& x : k.data()) x = 1e4f;
  k(1, 0) = -1e4f;
  v(0, 0) = 1.0f;
  v(1, 0) = 2.0f;
  Vec w(2), z(4);
  kernels::attend_row(q.row(0), k, v, 2, w, z);
  CHECK(std::isfinite(z[0]));
  CHECK(w[0] == doctest::Approx(1.0));
}

TEST_CASE("results do not depend on the thread count") {
  const Matrix x = random_matrix(16, 96, 31);
  const Matrix w = random_matrix(96, 700, 32);
  const Vec bias = random_vec(700, 33);
  Matrix one, many;
  {
    Threads t(1);
    kernels::linear(x, w, bias, one);
  }
  {
    Threads t(4);
    kernels::linear(x, w, bias, many);
  }
  CHECK(bit_equal(one.data(), many.data()));
}
