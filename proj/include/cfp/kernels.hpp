#pragma once

#include <span>

#include "cfp/tensor.hpp"

// Numeric kernels behind the transformer forward pass.
//
// The kernels in `cfp::kernels` are OpenMP-parallel. Every output element is
// accumulated in the same fixed order regardless of how the work is split
// across threads, so results are bitwise reproducible and a single-row call
// (`linear_row`) matches the corresponding row of a batched call (`linear`)
// exactly. Activation patching and coalition recomputation rely on that.
//
// `cfp::kernels::reference` holds plain serial loops with no blocking or
// threading. They exist for tests and benchmarks only.
namespace cfp::kernels {

// y = x · w + bias, where x has w.rows() entries. An empty bias means zero.
void linear_row(std::span<const float> x, const Matrix& w, std::span<const float> bias, std::span<float> y);

// Row-wise linear map over all rows of x. y is resized.
void linear(const Matrix& x, const Matrix& w, std::span<const float> bias, Matrix& y);

// y[v] = <x, e.row(v)>; used by the tied unembedding.
void linear_transposed_row(std::span<const float> x, const Matrix& e, std::span<float> y);
void linear_transposed(const Matrix& x, const Matrix& e, Matrix& y);

void layer_norm_row(std::span<const float> x, std::span<const float> scale, std::span<const float> bias,
                    float eps, std::span<float> y);
void layer_norm(const Matrix& x, std::span<const float> scale, std::span<const float> bias, float eps, Matrix& y);

// GPT-2's tanh-approximated GELU, in place.
void gelu(std::span<float> x);

// One causal attention row: query `q` attends over the first `n_keys` rows of
// `keys`/`values`. Writes the softmax weights (first n_keys entries of
// `weights`) and the weighted value sum `z`.
void attend_row(std::span<const float> q, const Matrix& keys, const Matrix& values, std::size_t n_keys,
                std::span<float> weights, std::span<float> z);

namespace reference {

void linear(const Matrix& x, const Matrix& w, std::span<const float> bias, Matrix& y);
void linear_transposed(const Matrix& x, const Matrix& e, Matrix& y);
void layer_norm(const Matrix& x, std::span<const float> scale, std::span<const float> bias, float eps, Matrix& y);
void gelu(std::span<float> x);
// Full causal attention for one head: pattern is seq×seq, z is seq×d_head.
void causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, Matrix& pattern, Matrix& z);

}  // namespace reference

}  // namespace cfp::kernels
