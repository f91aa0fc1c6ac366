#include <benchmark/benchmark.h>

#include <random>

#include "cfp/edges.hpp"
#include "cfp/fingerprint.hpp"
#include "cfp/kernels.hpp"
#include "cfp/model.hpp"

namespace {

cfp::Matrix random_matrix(std::size_t rows, std::size_t cols, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> dist(0.0f, 0.1f);
  cfp::Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto& x : m.row(r)) x = dist(rng);
  }
  return m;
}

// GPT-2 small shapes: seq × 768 against 768 × 3072.
void BM_Linear(benchmark::State& state) {
  const auto x = random_matrix(static_cast<std::size_t>(state.range(0)), 768, 1);
  const auto w = random_matrix(768, 3072, 2);
  cfp::Matrix y;
  for (auto _ : state) {
    cfp::kernels::linear(x, w, {}, y);
    benchmark::DoNotOptimize(y.row(0).data());
  }
}
BENCHMARK(BM_Linear)->Arg(16)->Arg(64);

void BM_LinearReference(benchmark::State& state) {
  const auto x = random_matrix(static_cast<std::size_t>(state.range(0)), 768, 1);
  const auto w = random_matrix(768, 3072, 2);
  cfp::Matrix y;
  for (auto _ : state) {
    cfp::kernels::reference::linear(x, w, {}, y);
    benchmark::DoNotOptimize(y.row(0).data());
  }
}
BENCHMARK(BM_LinearReference)->Arg(16)->Arg(64);

// Unembedding: seq × 768 against a 50257-row embedding.
void BM_Unembed(benchmark::State& state) {
  const auto x = random_matrix(4, 768, 3);
  const auto e = random_matrix(50257, 768, 4);
  cfp::Matrix y;
  for (auto _ : state) {
    if (state.range(0) == 0) {
      cfp::kernels::reference::linear_transposed(x, e, y);
    } else {
      cfp::kernels::linear_transposed(x, e, y);
    }
    benchmark::DoNotOptimize(y.row(0).data());
  }
  state.SetLabel(state.range(0) == 0 ? "reference" : "parallel");
}
BENCHMARK(BM_Unembed)->Arg(0)->Arg(1);

void BM_LayerNorm(benchmark::State& state) {
  const auto x = random_matrix(64, 768, 5);
  const std::vector<float> scale(768, 1.0f), bias(768, 0.0f);
  cfp::Matrix y;
  for (auto _ : state) {
    if (state.range(0) == 0) {
      cfp::kernels::reference::layer_norm(x, scale, bias, 1e-5f, y);
    } else {
      cfp::kernels::layer_norm(x, scale, bias, 1e-5f, y);
    }
    benchmark::DoNotOptimize(y.row(0).data());
  }
  state.SetLabel(state.range(0) == 0 ? "reference" : "parallel");
}
BENCHMARK(BM_LayerNorm)->Arg(0)->Arg(1);

cfp::ModelConfig small_config() {
  cfp::ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 8;
  c.d_model = 256;
  c.d_head = 32;
  c.d_mlp = 1024;
  c.vocab_size = 4096;
  c.max_positions = 128;
  return c;
}

void BM_ForwardCached(benchmark::State& state) {
  const auto model = cfp::make_random_model(small_config(), 7);
  std::vector<cfp::TokenId> tokens(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<cfp::TokenId>((i * 37) % 4096);
  for (auto _ : state) {
    auto r = cfp::forward_cached(model, tokens);
    benchmark::DoNotOptimize(r.logits.row(0).data());
  }
}
BENCHMARK(BM_ForwardCached)->Arg(16)->Arg(64);

void BM_TotalImportance(benchmark::State& state) {
  const auto model = cfp::make_random_model(small_config(), 8);
  cfp::EncodedPair pair;
  for (int i = 0; i < 16; ++i) {
    pair.clean.push_back(static_cast<cfp::TokenId>(100 + i));
    pair.corrupt.push_back(static_cast<cfp::TokenId>(i == 9 ? 300 : 100 + i));
  }
  pair.a_plus = 11;
  pair.a_minus = 12;
  const auto run = cfp::run_pair(model, pair);
  const auto target = cfp::target_direction(model, pair.a_plus, pair.a_minus, 0);
  for (auto _ : state) {
    auto g = cfp::total_importance(model, run, target);
    benchmark::DoNotOptimize(g.total.data());
  }
}
BENCHMARK(BM_TotalImportance)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
