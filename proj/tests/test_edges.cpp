#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "cfp/edges.hpp"
#include "cfp/error.hpp"
#include "test_support.hpp"

using namespace cfp;
using cfp::test::toy_config;

namespace {

constexpr TokenId kBos = 255;

EncodedPair random_pair(std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> tok(0, 254);
  std::uniform_int_distribution<std::size_t> len(3, 10);
  const std::size_t n = len(rng);
  EncodedPair p;
  for (std::size_t i = 0; i < n; ++i) p.clean.push_back(tok(rng));
  p.corrupt = p.clean;
  p.corrupt[n / 2] = tok(rng);
  p.corrupt[n - 1] = tok(rng);
  p.a_plus = tok(rng);
  do p.a_minus = tok(rng);
  while (p.a_minus == p.a_plus);
  return p;
}

struct Setup {
  Model model;
  EncodedPair pair;
  TargetDirection target;
  PairRun run;
};

Setup make_setup(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed * 7 + 1);
  Model model = make_random_model(cfg, seed);
  EncodedPair pair = random_pair(rng);
  TargetDirection target = target_direction(model, pair.a_plus, pair.a_minus, kBos);
  PairRun run = run_pair(model, pair);
  return {std::move(model), std::move(pair), std::move(target), std::move(run)};
}

// Average marginal contribution over all 6 orderings of {Q, K, V}.
std::array<double, 3> enumerate_shapley(const std::array<double, 8>& S) {
  std::array<unsigned, 3> players{1, 2, 4};
  std::array<double, 3> phi{};
  std::sort(players.begin(), players.end());
  int orderings = 0;
  do {
    unsigned coalition = 0;
    for (unsigned p : players) {
      const int slot = p == 1 ? 0 : p == 2 ? 1 : 2;
      phi[slot] += S[coalition | p] - S[coalition];
      coalition |= p;
    }
    ++orderings;
  } while (std::next_permutation(players.begin(), players.end()));
  for (double& v : phi) v /= orderings;
  return phi;
}

std::size_t position_of(const std::vector<ComponentId>& v, const ComponentId& id) {
  return static_cast<std::size_t>(std::find(v.begin(), v.end(), id) - v.begin());
}

}  // namespace

TEST_CASE("a head fed only by the embedding gets ratio one") {
  auto cfg = toy_config();
  cfg.n_layers = 1;
  const auto s = make_setup(cfg, 1);
  for (Channel ch : {Channel::Q, Channel::K, Channel::V}) {
    const auto r = channel_edge_ratios(s.model, s.run, ComponentId::attention_head(0, 2), ch, s.target);
    REQUIRE(r.sources.size() == 1);
    CHECK(r.sources[0] == ComponentId::embedding());
    if (!r.degenerate) CHECK(r.ratios[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto m = mlp_edge_ratios(s.model, s.run, 0, s.target);
  CHECK(m.sources.size() == 5);
  CHECK_FALSE(m.degenerate);
  CHECK(m.sum() == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("channel ratios sum to one on random toy heads") {
  int checked = 0, degenerate = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = make_setup(toy_config(), 100 + seed);
    const auto head = ComponentId::attention_head(1, static_cast<int>(seed % 4));
    for (Channel ch : {Channel::Q, Channel::K, Channel::V}) {
      const auto r = channel_edge_ratios(s.model, s.run, head, ch, s.target);
      CHECK(r.sources.size() == 6);
      if (r.degenerate) {
        ++degenerate;
        CHECK(std::all_of(r.ratios.begin(), r.ratios.end(), [](double x) { return x == 0.0; }));
        continue;
      }
      ++checked;
      worst = std::max(worst, std::abs(r.sum() - 1.0));
      CHECK(r.sum() == doctest::Approx(1.0).epsilon(1e-3));
    }
    const auto m = mlp_edge_ratios(s.model, s.run, 1, s.target);
    if (!m.degenerate) CHECK(m.sum() == doctest::Approx(1.0).epsilon(1e-3));
  }
  MESSAGE(checked << " channels checked, " << degenerate << " degenerate, worst |sum-1| " << worst);
  CHECK(checked > 100);
}

TEST_CASE("identical upstream writers receive equal ratios") {
  const Model base = make_random_model(toy_config(), 9);
  WeightSet ws = base.weights();
  auto& l0 = ws.layers[0];
  l0.W_Q[1] = l0.W_Q[0];
  l0.W_K[1] = l0.W_K[0];
  l0.W_V[1] = l0.W_V[0];
  l0.b_Q[1] = l0.b_Q[0];
  l0.b_K[1] = l0.b_K[0];
  l0.b_V[1] = l0.b_V[0];
  l0.W_O[1] = l0.W_O[0];
  const Model model(base.config(), ws);
  std::mt19937_64 rng(9);
  const auto pair = random_pair(rng);
  const auto target = target_direction(model, pair.a_plus, pair.a_minus, kBos);
  const auto run = run_pair(model, pair);
  const auto r = channel_edge_ratios(model, run, ComponentId::attention_head(1, 0), Channel::V, target);
  const auto a = position_of(r.sources, ComponentId::attention_head(0, 0));
  const auto b = position_of(r.sources, ComponentId::attention_head(0, 1));
  CHECK(r.ratios[a] == r.ratios[b]);
}

TEST_CASE("identical prompts make every channel degenerate") {
  auto s = make_setup(toy_config(), 10);
  const PairRun same{s.run.clean, s.run.clean};
  const auto m = mlp_edge_ratios(s.model, same, 1, s.target);
  CHECK(m.degenerate);
  CHECK(m.denominator == 0.0);
  CHECK(m.sum() == 0.0);
  CHECK(edge_importance(2.0, 1.0, m) == std::vector<double>(m.ratios.size(), 0.0));
  CHECK_THROWS_AS(channel_edge_ratios(s.model, s.run, ComponentId::mlp(0), Channel::Q, s.target), InputError);
  CHECK_THROWS_AS(channel_edge_ratios(s.model, s.run, ComponentId::attention_head(0, 0), Channel::Input, s.target),
                  InputError);
}

TEST_CASE("closed-form Shapley values equal the ordering enumeration") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<double, 8> S{};
    for (double& v : S) v = n(rng);
    const auto w = shapley_from_values(S);
    const auto e = enumerate_shapley(S);
    CHECK(w.phi_q == doctest::Approx(e[0]).epsilon(1e-12));
    CHECK(w.phi_k == doctest::Approx(e[1]).epsilon(1e-12));
    CHECK(w.phi_v == doctest::Approx(e[2]).epsilon(1e-12));
    CHECK(w.sum() == doctest::Approx(S[7] - S[0]).epsilon(1e-12));
  }
}

TEST_CASE("Shapley weights on toy heads: efficiency, enumeration, endpoints") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = make_setup(toy_config(), 200 + seed);
    const auto head = ComponentId::attention_head(static_cast<int>(seed % 2), static_cast<int>(seed % 4));
    const auto w = shapley_qkv(s.model, head, s.run, s.target);
    const auto& S = w.coalition_values;
    CHECK(S[0] == 0.0);
    const auto scores = node_scores(s.model, s.run, s.target);
    CHECK(S[7] == doctest::Approx(scores[head]).epsilon(1e-6));
    CHECK(std::abs(w.sum() - (S[7] - S[0])) < 1e-5);
    const auto e = enumerate_shapley(S);
    worst = std::max({worst, std::abs(w.phi_q - e[0]), std::abs(w.phi_k - e[1]), std::abs(w.phi_v - e[2])});
    CHECK(std::abs(w.phi_q - e[0]) < 1e-6);
    CHECK(std::abs(w.phi_k - e[1]) < 1e-6);
    CHECK(std::abs(w.phi_v - e[2]) < 1e-6);
  }
  MESSAGE("worst closed-form vs enumeration gap " << worst);
}

TEST_CASE("a channel with identical clean and corrupted inputs is a null player") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = make_setup(toy_config(), 300 + seed);
    const int l = static_cast<int>(seed % 2), h = static_cast<int>(seed % 4);
    const auto head = ComponentId::attention_head(l, h);
    for (Channel ch : {Channel::Q, Channel::K, Channel::V}) {
      PairRun run = s.run;
      auto& src = run.clean.cache.layers[static_cast<std::size_t>(l)].heads[static_cast<std::size_t>(h)];
      auto& dst = run.corrupt.cache.layers[static_cast<std::size_t>(l)].heads[static_cast<std::size_t>(h)];
      if (ch == Channel::Q) dst.q = src.q;
      if (ch == Channel::K) dst.k = src.k;
      if (ch == Channel::V) dst.v = src.v;
      const auto w = shapley_qkv(s.model, head, run, s.target);
      const double phi = ch == Channel::Q ? w.phi_q : ch == Channel::K ? w.phi_k : w.phi_v;
      CHECK(std::abs(phi) < 1e-5);
    }
  }
}

TEST_CASE("Shapley normalization") {
  ShapleyWeights w;
  w.phi_q = 2.0;
  w.phi_k = -1.0;
  w.phi_v = 1.0;
  const auto n = w.normalized();
  CHECK(n[0] == doctest::Approx(1.0));
  CHECK(n[1] == doctest::Approx(-0.5));
  CHECK(n[2] == doctest::Approx(0.5));
  w.phi_k = -3.0;
  const auto u = w.normalized();
  CHECK(u[0] == doctest::Approx(1.0 / 3.0));
  CHECK(u[1] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("edge importance") {
  ChannelRatios r;
  r.sources = {ComponentId::embedding(), ComponentId::attention_head(0, 0), ComponentId::mlp(0)};
  r.ratios = {0.0, 1.0, 0.0};
  r.denominator = 1.0;
  CHECK(edge_importance(2.5, 1.0, r) == std::vector<double>{0.0, 2.5, 0.0});
  CHECK(edge_importance(0.0, 0.4, r) == std::vector<double>{0.0, 0.0, 0.0});
  r.ratios = {0.2, 0.5, 0.3};
  const auto e = edge_importance(3.0, 1.0, r);
  CHECK(e[0] + e[1] + e[2] == doctest::Approx(3.0));
}

TEST_CASE("edges into a target sum to its total importance") {
  const auto s = make_setup(toy_config(), 12);
  const auto g = total_importance(s.model, s.run, s.target);
  std::map<ComponentId, double> incoming;
  std::map<ComponentId, bool> degenerate;
  for (const auto& e : g.edges) {
    incoming[e.target] += e.value;
    degenerate[e.target] = degenerate[e.target] || e.degenerate;
  }
  for (std::size_t i = 1; i < g.components.size(); ++i) {
    const auto& id = g.components[i];
    if (degenerate[id]) continue;
    CHECK(incoming[id] == doctest::Approx(g.total[i]).epsilon(1e-3));
  }
}

TEST_CASE("one-layer backward pass") {
  auto cfg = toy_config();
  cfg.n_layers = 1;
  const auto s = make_setup(cfg, 13);
  const auto g = total_importance(s.model, s.run, s.target);
  const ComponentIndex index(cfg);
  const auto mlp = ComponentId::mlp(0);
  CHECK(g.total_of(mlp) == g.direct[index.mlp_index(0)]);
  const auto r = mlp_edge_ratios(s.model, s.run, 0, s.target);
  const double t_m = g.direct[index.mlp_index(0)];
  for (int h = 0; h < 4; ++h) {
    const auto id = ComponentId::attention_head(0, h);
    const double want = g.direct[index.head_index(0, h)] + t_m * r.ratios[position_of(r.sources, id)];
    CHECK(g.total_of(id) == doctest::Approx(want).epsilon(1e-12));
  }
  const auto lit = total_importance(s.model, s.run, s.target, Alg1Mode::Literal);
  const auto id = ComponentId::attention_head(0, 1);
  CHECK(lit.total_of(id) ==
        doctest::Approx(g.direct[index.head_index(0, 1)] + t_m * t_m * r.ratios[position_of(r.sources, id)]));
}

TEST_CASE("two-layer backward pass matches a hand unroll") {
  const auto s = make_setup(toy_config(), 14);
  const auto g = total_importance(s.model, s.run, s.target);
  const ComponentIndex index(s.model.config());
  std::vector<double> T = g.direct;
  auto ratio = [&](const ChannelRatios& r, const ComponentId& src) {
    const auto p = position_of(r.sources, src);
    return p < r.sources.size() ? r.ratios[p] : 0.0;
  };
  // Layer 1: MLP first, then heads; then layer 0 likewise.
  for (int l = 1; l >= 0; --l) {
    const auto mr = mlp_edge_ratios(s.model, s.run, l, s.target);
    const double t_m = T[index.mlp_index(l)];
    for (const auto& src : mr.sources) T[index.index_of(src)] += t_m * ratio(mr, src);
    for (int h = 0; h < 4; ++h) {
      const auto head = ComponentId::attention_head(l, h);
      const double t_h = T[index.head_index(l, h)];
      const auto w = shapley_qkv(s.model, head, s.run, s.target).normalized();
      const ChannelRatios rq = channel_edge_ratios(s.model, s.run, head, Channel::Q, s.target);
      const ChannelRatios rk = channel_edge_ratios(s.model, s.run, head, Channel::K, s.target);
      const ChannelRatios rv = channel_edge_ratios(s.model, s.run, head, Channel::V, s.target);
      for (const auto& src : rq.sources) {
        T[index.index_of(src)] += t_h * (w[0] * ratio(rq, src) + w[1] * ratio(rk, src) + w[2] * ratio(rv, src));
      }
    }
  }
  for (std::size_t i = 0; i < T.size(); ++i) CHECK(g.total[i] == doctest::Approx(T[i]).epsilon(1e-9));
}

TEST_CASE("graph structure") {
  const auto s = make_setup(toy_config(), 15);
  const auto g = total_importance(s.model, s.run, s.target);
  // logits 11, layer-0 heads 4*3*1, layer-1 heads 4*3*6, m0 5, m1 10.
  CHECK(g.edges.size() == 11 + 12 + 72 + 5 + 10);
  const ComponentIndex index(s.model.config());
  for (const auto& e : g.edges) {
    CHECK(std::isfinite(e.value));
    const std::size_t t = e.target.kind == ComponentKind::Logits ? index.size() : index.index_of(e.target);
    CHECK(index.index_of(e.source) < t);
  }
  for (const auto& e : g.edges) {
    if (e.target.kind == ComponentKind::Logits) CHECK(e.value == g.direct[index.index_of(e.source)]);
  }
}

TEST_CASE("pruning keeps the largest edges with a deterministic tie-break") {
  const auto s = make_setup(toy_config(), 16);
  const auto g = total_importance(s.model, s.run, s.target);
  CHECK(prune_circuit(g, g.edges.size()).size() == g.edges.size());
  CHECK_THROWS_AS(prune_circuit(g, 0), InputError);
  CHECK_THROWS_AS(prune_circuit(g, g.edges.size() + 1), InputError);

  const auto one = prune_circuit(g, 1);
  const auto biggest = *std::max_element(g.edges.begin(), g.edges.end(), [](const Edge& a, const Edge& b) {
    return std::abs(a.value) < std::abs(b.value);
  });
  CHECK(one.contains(key_of(biggest)));
  CHECK(one.nodes.count(biggest.source) == 1);
  CHECK(one.nodes.count(biggest.target) == 1);

  // Sorting oracle on (|E| desc, target order, channel, source order).
  const ComponentIndex index(s.model.config());
  auto order = [&](const ComponentId& id) {
    return id.kind == ComponentKind::Logits ? index.size() : index.index_of(id);
  };
  std::vector<Edge> sorted = g.edges;
  std::sort(sorted.begin(), sorted.end(), [&](const Edge& a, const Edge& b) {
    return std::make_tuple(-std::abs(a.value), order(a.target), static_cast<int>(a.channel), order(a.source)) <
           std::make_tuple(-std::abs(b.value), order(b.target), static_cast<int>(b.channel), order(b.source));
  });
  const auto five = prune_circuit(g, 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(five.contains(key_of(sorted[i])));

  // Zero-valued edges (e.g. degenerate channels) tie and fall back to the
  // structural order.
  const auto ranked = rank_edges(g);
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    CHECK(key_of(ranked[i]) == key_of(sorted[i]));
  }
}

TEST_CASE("averaging graphs") {
  const auto s = make_setup(toy_config(), 17);
  const auto g = total_importance(s.model, s.run, s.target);
  const std::vector<EdgeGraph> two{g, g};
  const auto avg = average_graphs(two);
  for (std::size_t i = 0; i < g.edges.size(); ++i) CHECK(avg.edges[i].value == doctest::Approx(g.edges[i].value));
  CHECK(avg.total == g.total);
}

TEST_CASE("exports are deterministic and well formed") {
  const auto s = make_setup(toy_config(), 18);
  const auto g1 = total_importance(s.model, s.run, s.target);
  const auto g2 = total_importance(s.model, s.run, s.target);
  CHECK(graph_to_json(g1).dump() == graph_to_json(g2).dump());
  const auto j = graph_to_json(g1);
  CHECK(j["nodes"].size() == 11);
  CHECK(j["edges"].size() == g1.edges.size());
  CHECK(j["shapley"].size() == 8);

  std::ostringstream dot;
  const auto circuit = prune_circuit(g1, 20);
  write_dot(dot, g1, &circuit);
  const std::string text = dot.str();
  CHECK(text.rfind("digraph circuit {", 0) == 0);
  CHECK(text.back() == '\n');
  // Every edge line points from an earlier to a later component, so the
  // drawn graph is acyclic.
  const ComponentIndex index(s.model.config());
  std::istringstream lines(text);
  std::string line;
  int edge_lines = 0;
  while (std::getline(lines, line)) {
    const auto arrow = line.find(" -> ");
    if (arrow == std::string::npos) continue;
    ++edge_lines;
    const auto a = parse_component(line.substr(3, arrow - 4));
    const auto rest = line.substr(arrow + 5);
    const auto b = parse_component(rest.substr(0, rest.find('"')));
    REQUIRE(a);
    REQUIRE(b);
    const std::size_t tb = b->kind == ComponentKind::Logits ? index.size() : index.index_of(*b);
    CHECK(index.index_of(*a) < tb);
  }
  CHECK(edge_lines == 20);

  std::ostringstream csv;
  write_shapley_csv(csv, g1);
  std::istringstream rows(csv.str());
  int n = 0;
  while (std::getline(rows, line)) ++n;
  CHECK(n == 9);
}

TEST_CASE("mode names") {
  CHECK(parse_alg1_mode("literal") == Alg1Mode::Literal);
  CHECK(to_string(parse_alg1_mode("single-factor")) == "single-factor");
  CHECK_THROWS_AS(parse_alg1_mode("quadratic"), InputError);
  CHECK(parse_channel(to_string(Channel::K)) == Channel::K);
}
