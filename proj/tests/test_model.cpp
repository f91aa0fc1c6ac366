#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "cfp/error.hpp"
#include "cfp/model.hpp"
#include "cfp/safetensors.hpp"
#include "test_support.hpp"

using namespace cfp;
using cfp::test::bit_equal;
using cfp::test::max_abs_diff;
using cfp::test::rel_error;
using cfp::test::toy_config;

namespace {

const std::filesystem::path kToyHf = std::filesystem::path(CFP_FIXTURE_DIR) / "toy_hf";

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cfp_test_model_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<TokenId> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> d(0, vocab - 1);
  std::vector<TokenId> t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

// Sum of every residual write: embedding, each head's out, b_O per layer and
// each MLP's out.
Vec reconstruct(const ActivationCache& cache, std::size_t pos) {
  const auto e = cache.embedding().row(pos);
  Vec acc(e.begin(), e.end());
  for (const auto& la : cache.layers) {
    for (const auto& h : la.heads) add_scaled(acc, h.out.row(pos), 1.0f);
    add_scaled(acc, la.attn_bias, 1.0f);
    add_scaled(acc, la.mlp_out.row(pos), 1.0f);
  }
  return acc;
}

}  // namespace

TEST_CASE("loads the Hugging Face fused layout and matches its logits") {
  const Model model = load_model(kToyHf);
  CHECK(model.config().n_layers == 2);
  CHECK(model.config().n_heads == 4);
  CHECK(model.config().d_head == 8);
  CHECK(model.config().d_mlp == 128);

  std::ifstream in(kToyHf / "reference.json");
  const auto ref = nlohmann::json::parse(in);
  for (const auto& c : ref.at("cases")) {
    const auto tokens = c.at("tokens").get<std::vector<TokenId>>();
    const auto result = forward_cached(model, tokens);
    const auto logits = c.at("logits").get<std::vector<std::vector<float>>>();
    REQUIRE(result.logits.rows() == tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) CHECK(max_abs_diff(result.logits.row(t), logits[t]) < 1e-4);
    const auto pre = c.at("residual_pre").get<std::vector<std::vector<std::vector<float>>>>();
    for (std::size_t l = 0; l < pre.size(); ++l) {
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        CHECK(max_abs_diff(result.cache.layers[l].residual_pre.row(t), pre[l][t]) < 1e-4);
      }
    }
  }
}

TEST_CASE("save and reload is tensor-identical") {
  const Model model = make_random_model(toy_config(), 7);
  const auto dir = scratch_dir("roundtrip");
  save_model(model, dir);
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  const Model back = load_model(dir);
  CHECK(back.config() == model.config());
  CHECK(back.weights().token_embedding == model.weights().token_embedding);
  for (int l = 0; l < model.config().n_layers; ++l) {
    CHECK(back.layer(l).W_Q == model.layer(l).W_Q);
    CHECK(back.layer(l).W_O == model.layer(l).W_O);
    CHECK(back.layer(l).b_V == model.layer(l).b_V);
    CHECK(back.layer(l).W_out == model.layer(l).W_out);
  }
  const auto tokens = random_tokens(10, 256, 1);
  CHECK(bit_equal(forward(back, tokens).data(), forward(model, tokens).data()));

  // Fused export converted to split layout gives the same model.
  const Model hf = load_model(kToyHf);
  const auto dir2 = scratch_dir("hf_roundtrip");
  save_model(hf, dir2);
  CHECK(bit_equal(forward(load_model(dir2), tokens).data(), forward(hf, tokens).data()));
}

TEST_CASE("load errors name the problem") {
  CHECK_THROWS_WITH_AS(load_model(std::filesystem::path("/nonexistent/cfp")), doctest::Contains("/nonexistent/cfp"),
                       LoadError);

  const Model model = make_random_model(toy_config(), 7);
  const auto dir = scratch_dir("errors");
  save_model(model, dir);

  SUBCASE("manifest shape mismatch") {
    std::ifstream in(dir / "manifest.json");
    auto manifest = nlohmann::json::parse(in);
    in.close();
    for (auto& t : manifest["tensors"]) {
      if (t["name"] == "h.1.attn.W_K") t["shape"] = {4, 32, 9};
    }
    std::ofstream(dir / "manifest.json") << manifest.dump();
    CHECK_THROWS_WITH_AS(load_model(dir), doctest::Contains("h.1.attn.W_K"), LoadError);
  }
  SUBCASE("missing tensor") {
    std::filesystem::remove(dir / "manifest.json");
    const auto archive = safetensors::Archive::read(dir / "model.safetensors");
    std::vector<std::vector<float>> keep;
    std::vector<safetensors::TensorView> views;
    for (const auto& name : archive.names()) {
      if (name == "h.0.mlp.b_in") continue;
      keep.push_back(archive.to_f32(name));
      views.push_back({name, archive.info(name).shape, keep.back()});
    }
    safetensors::write(dir / "model.safetensors", views);
    CHECK_THROWS_WITH_AS(load_model(dir), doctest::Contains("missing tensor 'h.0.mlp.b_in'"), LoadError);
  }
  SUBCASE("missing final LayerNorm scale") {
    const auto archive = safetensors::Archive::read(dir / "model.safetensors");
    std::vector<std::vector<float>> keep;
    std::vector<safetensors::TensorView> views;
    keep.reserve(archive.names().size());
    for (const auto& name : archive.names()) {
      if (name == "ln_f.weight") continue;
      keep.push_back(archive.to_f32(name));
      views.push_back({name, archive.info(name).shape, keep.back()});
    }
    safetensors::write(dir / "model.safetensors", views);
    CHECK_THROWS_WITH_AS(load_model(dir), doctest::Contains("ln_f.weight"), LoadError);
    std::filesystem::remove(dir / "manifest.json");
    CHECK_THROWS_WITH_AS(load_model(dir), doctest::Contains("ln_f.weight"), LoadError);
  }
  SUBCASE("truncated archive") {
    std::filesystem::remove(dir / "manifest.json");
    const auto size = std::filesystem::file_size(dir / "model.safetensors");
    std::filesystem::resize_file(dir / "model.safetensors", size / 2);
    CHECK_THROWS_AS(load_model(dir), LoadError);
  }
  SUBCASE("config inconsistent with weights") {
    std::filesystem::remove(dir / "manifest.json");
    auto cfg = toy_config();
    cfg.d_mlp = 64;
    std::ofstream(dir / "config.json") << cfg.to_json().dump();
    CHECK_THROWS_WITH_AS(load_model(dir), doctest::Contains("h.0.mlp.W_in"), LoadError);
  }
}

TEST_CASE("config validation") {
  auto cfg = toy_config();
  cfg.d_head = 7;
  CHECK_THROWS_AS(cfg.validate(), LoadError);
  const auto hf = ModelConfig::from_json(
      {{"n_layer", 12}, {"n_head", 12}, {"n_embd", 768}, {"vocab_size", 50257}, {"n_positions", 1024}});
  CHECK(hf.d_head == 64);
  CHECK(hf.d_mlp == 3072);
  CHECK(ModelConfig::from_json(hf.to_json()) == hf);
}

TEST_CASE("random models are reproducible from their seed") {
  const auto tokens = random_tokens(6, 256, 3);
  CHECK(bit_equal(forward(make_random_model(toy_config(), 5), tokens).data(),
                  forward(make_random_model(toy_config(), 5), tokens).data()));
  CHECK_FALSE(bit_equal(forward(make_random_model(toy_config(), 5), tokens).data(),
                        forward(make_random_model(toy_config(), 6), tokens).data()));
}

TEST_CASE("the final residual is the sum of all component writes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Model model = make_random_model(toy_config(), seed);
    const auto tokens = random_tokens(1 + seed % 12, 256, seed + 100);
    const auto cache = forward_cached(model, tokens).cache;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      CHECK(rel_error(reconstruct(cache, t), cache.residual_final().row(t)) < 1e-5);
    }
    // Block-level bookkeeping.
    for (std::size_t l = 0; l + 1 < cache.layers.size(); ++l) {
      CHECK(cache.layers[l].residual_post == cache.layers[l + 1].residual_pre);
    }
  }
}

TEST_CASE("forward is deterministic and causal") {
  const Model model = make_random_model(toy_config(), 11);
  auto tokens = random_tokens(12, 256, 4);
  const Matrix a = forward(model, tokens);
  CHECK(bit_equal(a.data(), forward(model, tokens).data()));
  tokens[8] = (tokens[8] + 1) % 256;
  const Matrix b = forward(model, tokens);
  for (std::size_t t = 0; t < 8; ++t) CHECK(bit_equal(a.row(t), b.row(t)));
  CHECK_FALSE(bit_equal(a.row(8), b.row(8)));
}

TEST_CASE("attention patterns are causal distributions") {
  const Model model = make_random_model(toy_config(), 12);
  const auto cache = forward_cached(model, random_tokens(7, 256, 5)).cache;
  for (const auto& la : cache.layers) {
    for (const auto& h : la.heads) {
      for (std::size_t t = 0; t < 7; ++t) {
        double s = 0.0;
        for (std::size_t u = 0; u < 7; ++u) {
          if (u > t) CHECK(h.pattern(t, u) == 0.0f);
          s += h.pattern(t, u);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("token validation") {
  const Model model = make_random_model(toy_config(), 1);
  CHECK_THROWS_AS(forward(model, std::vector<TokenId>{}), InputError);
  CHECK_THROWS_AS(forward(model, std::vector<TokenId>{1, 256}), InputError);
  CHECK_THROWS_AS(forward(model, std::vector<TokenId>(65, 1)), InputError);
}

TEST_CASE("neutral interventions leave logits bit-identical") {
  const Model model = make_random_model(toy_config(), 13);
  const auto tokens = random_tokens(9, 256, 6);
  const auto clean = forward_cached(model, tokens);
  const auto site = ComponentId::attention_head(1, 2);

  Intervention zero{InterventionKind::AddNative, site, 0, -1, Vec(8, 0.0f), 1.0f};
  Intervention scaled_out{InterventionKind::AddNative, site, 0, -1, Vec(8, 3.0f), 0.0f};
  const auto own_z = clean.cache.native_output(site, 8);
  Intervention same{InterventionKind::ReplaceNative, site, 0, -1, Vec(own_z.begin(), own_z.end()), 1.0f};
  const auto own_hidden = clean.cache.native_output(ComponentId::mlp(0), 8);
  Intervention same_mlp{InterventionKind::ReplaceNative, ComponentId::mlp(0), 0, 8,
                        Vec(own_hidden.begin(), own_hidden.end()), 1.0f};
  for (const auto& iv : {zero, scaled_out, same, same_mlp}) {
    const std::vector<Intervention> ivs{iv};
    CHECK(bit_equal(forward_intervened(model, tokens, ivs).logits.data(), clean.logits.data()));
    CHECK(bit_equal(forward_last(model, clean.cache, ivs), clean.logits.row(8)));
  }
}

TEST_CASE("forward_last matches the full intervened pass bit for bit") {
  const Model model = make_random_model(toy_config(), 14);
  const auto tokens = random_tokens(10, 256, 7);
  const auto clean = forward_cached(model, tokens);
  CHECK(bit_equal(forward_last(model, clean.cache, {}), clean.logits.row(9)));

  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0f, 1.0f);
  auto noise = [&](std::size_t k) {
    Vec v(k);
    for (float& x : v) x = n(rng);
    return v;
  };
  const std::vector<Intervention> ivs{
      {InterventionKind::AddNative, ComponentId::attention_head(0, 1), 0, 9, noise(8), 0.5f},
      {InterventionKind::ReplaceNative, ComponentId::attention_head(1, 3), 0, -1, noise(8), 1.0f},
      {InterventionKind::ReplaceNative, ComponentId::mlp(1), 0, -1, noise(128), 0.25f},
      {InterventionKind::AddResidual, {}, 1, -1, noise(32), 1.0f},
      {InterventionKind::ReplaceResidual, {}, 2, -1, noise(32), 0.5f},
  };
  const auto full = forward_intervened(model, tokens, ivs);
  const Vec last = forward_last(model, clean.cache, ivs);
  CHECK(bit_equal(last, full.logits.row(9)));
  CHECK_FALSE(bit_equal(last, clean.logits.row(9)));
  // Earlier positions are untouched by last-position interventions.
  for (std::size_t t = 0; t < 9; ++t) CHECK(bit_equal(full.logits.row(t), clean.logits.row(t)));

  // One intervention at a time, so the pass starts at each layer in turn.
  for (const auto& iv : ivs) {
    const std::vector<Intervention> one{iv};
    CHECK(bit_equal(forward_last(model, clean.cache, one), forward_intervened(model, tokens, one).logits.row(9)));
  }
  const std::vector<Intervention> final_res{{InterventionKind::AddResidual, {}, 2, -1, noise(32), 1.0f}};
  CHECK(bit_equal(forward_last(model, clean.cache, final_res),
                  forward_intervened(model, tokens, final_res).logits.row(9)));

  const std::vector<TokenId> picks{7, 0, 255, 7};
  const Vec some = forward_last_logits(model, clean.cache, ivs, picks);
  for (std::size_t i = 0; i < picks.size(); ++i) CHECK(std::bit_cast<std::uint32_t>(some[i]) == std::bit_cast<std::uint32_t>(last[static_cast<std::size_t>(picks[i])]));
  CHECK_THROWS_AS(forward_last_logits(model, clean.cache, ivs, std::vector<TokenId>{256}), InputError);

  const std::vector<Intervention> early{
      {InterventionKind::AddNative, ComponentId::attention_head(0, 0), 0, 3, noise(8), 1.0f}};
  CHECK_THROWS_AS(forward_last(model, clean.cache, early), InputError);
}

TEST_CASE("intervention validation") {
  const Model model = make_random_model(toy_config(), 15);
  const auto tokens = random_tokens(4, 256, 8);
  auto run = [&](Intervention iv) { return forward_intervened(model, tokens, std::vector<Intervention>{iv}); };
  CHECK_THROWS_WITH_AS(run({InterventionKind::AddNative, ComponentId::attention_head(1, 4), 0, {}, Vec(8), 1.0f}),
                       doctest::Contains("a1.h4"), InputError);
  CHECK_THROWS_WITH_AS(run({InterventionKind::AddNative, ComponentId::attention_head(0, 0), 0, {}, Vec(9), 1.0f}),
                       doctest::Contains("payload"), InputError);
  CHECK_THROWS_AS(run({InterventionKind::AddNative, ComponentId::attention_head(0, 0), 0, 4, Vec(8), 1.0f}),
                  InputError);
  CHECK_THROWS_AS(run({InterventionKind::AddResidual, {}, 3, {}, Vec(32), 1.0f}), InputError);
  CHECK_THROWS_AS(run({InterventionKind::AddNative, ComponentId::embedding(), 0, {}, Vec(32), 1.0f}), InputError);
}

TEST_CASE("native replacement at a head equals replacing its residual write") {
  const Model model = make_random_model(toy_config(), 16);
  const auto tokens = random_tokens(6, 256, 9);
  const auto clean = forward_cached(model, tokens);
  const auto corrupt = forward_cached(model, random_tokens(6, 256, 10));
  const auto site = ComponentId::attention_head(0, 3);
  const auto z = corrupt.cache.native_output(site, 5);
  const std::vector<Intervention> ivs{{InterventionKind::ReplaceNative, site, 0, 5, Vec(z.begin(), z.end()), 1.0f}};
  const auto patched = forward_intervened(model, tokens, ivs);
  CHECK(bit_equal(patched.cache.residual_output(site, 5), corrupt.cache.residual_output(site, 5)));
}

TEST_CASE("coalition recomputation") {
  const Model model = make_random_model(toy_config(), 17);
  const auto clean = forward_cached(model, random_tokens(8, 256, 11)).cache;
  const auto corrupt = forward_cached(model, random_tokens(8, 256, 12)).cache;
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 4; ++h) {
      const auto all = head_coalition_output(model, l, h, clean, corrupt, Coalition::from_mask(7), 7);
      const auto none = head_coalition_output(model, l, h, clean, corrupt, Coalition::from_mask(0), 7);
      CHECK(bit_equal(all, clean.layers[l].heads[h].z.row(7)));
      CHECK(bit_equal(none, corrupt.layers[l].heads[h].z.row(7)));
    }
  }
  // Identical caches make every coalition identical.
  for (unsigned m = 0; m < 8; ++m) {
    CHECK(bit_equal(head_coalition_output(model, 1, 1, clean, clean, Coalition::from_mask(m), 7),
                    clean.layers[1].heads[1].z.row(7)));
    CHECK(Coalition::from_mask(m).mask() == m);
  }
  // Coalition {Q}: clean query against corrupt keys and values, recomputed
  // here as one softmax attention row in double precision.
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 4; ++h) {
      for (std::size_t pos : {0u, 3u, 7u}) {
        const auto& ch = clean.layers[l].heads[h];
        const auto& xh = corrupt.layers[l].heads[h];
        const auto q = ch.q.row(pos);
        const double scale = 1.0 / std::sqrt(8.0);
        std::vector<double> w(pos + 1);
        double mx = -1e300;
        for (std::size_t t = 0; t <= pos; ++t) {
          double dot = 0.0;
          for (std::size_t i = 0; i < q.size(); ++i) dot += double(q[i]) * xh.k.row(t)[i];
          w[t] = dot * scale;
          mx = std::max(mx, w[t]);
        }
        double z = 0.0;
        for (auto& x : w) z += (x = std::exp(x - mx));
        std::vector<double> expected(q.size(), 0.0);
        for (std::size_t t = 0; t <= pos; ++t) {
          for (std::size_t i = 0; i < q.size(); ++i) expected[i] += w[t] / z * xh.v.row(t)[i];
        }
        const auto got = head_coalition_output(model, l, h, clean, corrupt, Coalition{true, false, false}, pos);
        const Vec want(expected.begin(), expected.end());
        CHECK(max_abs_diff(got, want) < 1e-5);
      }
    }
  }

  const auto shorter = forward_cached(model, random_tokens(5, 256, 13)).cache;
  CHECK_THROWS_AS(head_coalition_output(model, 0, 0, clean, shorter, Coalition{}, 4), InputError);
}

TEST_CASE("cache accessors") {
  const Model model = make_random_model(toy_config(), 18);
  const auto cache = forward_cached(model, random_tokens(3, 256, 14)).cache;
  CHECK(bit_equal(cache.residual(0, 1), cache.embedding().row(1)));
  CHECK(bit_equal(cache.residual(2, 1), cache.residual_final().row(1)));
  CHECK(cache.native_output(ComponentId::mlp(1), 0).size() == 128);
  CHECK(cache.residual_output(ComponentId::mlp(1), 0).size() == 32);
  CHECK_THROWS_AS(cache.native_output(ComponentId::embedding(), 0), InputError);
  CHECK(&model.output_projection(ComponentId::attention_head(1, 2)) == &model.layer(1).W_O[2]);
  CHECK(&model.output_projection(ComponentId::mlp(0)) == &model.layer(0).W_out);
}
