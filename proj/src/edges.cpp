#include "cfp/edges.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "cfp/error.hpp"
#include "cfp/kernels.hpp"

namespace cfp {
namespace {

// ⟨a − b, u⟩ accumulated in double from the exact float differences.
double diff_dot(std::span<const float> a, std::span<const float> b, std::span<const double> u) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += (double(a[i]) - double(b[i])) * u[i];
  return s;
}

// W · Δ for W stored rows = d_model, cols = native width, in double.
std::vector<double> input_direction(const Matrix& w, std::span<const float> delta) {
  std::vector<double> u(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += double(row[c]) * delta[c];
    u[r] = s;
  }
  return u;
}

ChannelRatios ratios_along(const Model& model, const PairRun& run, const ComponentId& target_id,
                           std::span<const float> clean_in, std::span<const float> corrupt_in,
                           const std::vector<double>& u) {
  const std::size_t pos = run.last();
  const ComponentIndex index(model.config());
  ChannelRatios out;
  out.sources = index.upstream_of(target_id);
  out.denominator = diff_dot(clean_in, corrupt_in, u);
  out.ratios.assign(out.sources.size(), 0.0);
  if (!(std::abs(out.denominator) > kRatioEpsilon)) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < out.sources.size(); ++i) {
    const auto& src = out.sources[i];
    out.ratios[i] = diff_dot(run.clean.cache.residual_output(src, pos), run.corrupt.cache.residual_output(src, pos), u) /
                    out.denominator;
  }
  return out;
}

void check_head(const Model& model, const ComponentId& head) {
  const auto& cfg = model.config();
  if (!head.is_head() || head.layer < 0 || head.layer >= cfg.n_layers || head.head < 0 || head.head >= cfg.n_heads) {
    throw InputError(to_string(head) + " is not an attention head of this model");
  }
}

}  // namespace

std::string to_string(Channel c) {
  switch (c) {
    case Channel::Q:
      return "q";
    case Channel::K:
      return "k";
    case Channel::V:
      return "v";
    case Channel::Input:
      return "in";
  }
  return "?";
}

Channel parse_channel(const std::string& s) {
  if (s == "q") return Channel::Q;
  if (s == "k") return Channel::K;
  if (s == "v") return Channel::V;
  if (s == "in") return Channel::Input;
  throw InputError("unknown channel '" + s + "'");
}

std::string to_string(Alg1Mode m) { return m == Alg1Mode::SingleFactor ? "single-factor" : "literal"; }

Alg1Mode parse_alg1_mode(const std::string& s) {
  if (s == "single-factor") return Alg1Mode::SingleFactor;
  if (s == "literal") return Alg1Mode::Literal;
  throw InputError("unknown backward-pass mode '" + s + "' (expected single-factor or literal)");
}

double ChannelRatios::sum() const {
  double s = 0.0;
  for (double r : ratios) s += r;
  return s;
}

ChannelRatios channel_edge_ratios(const Model& model, const PairRun& run, const ComponentId& head, Channel channel,
                                  const TargetDirection& target) {
  check_head(model, head);
  const auto l = static_cast<std::size_t>(head.layer);
  const auto h = static_cast<std::size_t>(head.head);
  const auto& lw = model.layer(head.layer);
  const Matrix* w = nullptr;
  const Vec* delta = nullptr;
  switch (channel) {
    case Channel::Q:
      w = &lw.W_Q[h];
      delta = &target.delta_q[l][h];
      break;
    case Channel::K:
      w = &lw.W_K[h];
      delta = &target.delta_k[l][h];
      break;
    case Channel::V:
      w = &lw.W_V[h];
      delta = &target.delta_v[l][h];
      break;
    case Channel::Input:
      throw InputError("attention heads have Q, K and V channels only");
  }
  const std::size_t pos = run.last();
  return ratios_along(model, run, head, run.clean.cache.layers[l].residual_pre.row(pos),
                      run.corrupt.cache.layers[l].residual_pre.row(pos), input_direction(*w, *delta));
}

ChannelRatios mlp_edge_ratios(const Model& model, const PairRun& run, int layer, const TargetDirection& target) {
  if (layer < 0 || layer >= model.config().n_layers) throw InputError("no MLP at layer " + std::to_string(layer));
  const auto l = static_cast<std::size_t>(layer);
  const std::size_t pos = run.last();
  return ratios_along(model, run, ComponentId::mlp(layer), run.clean.cache.layers[l].residual_mid.row(pos),
                      run.corrupt.cache.layers[l].residual_mid.row(pos),
                      input_direction(model.layer(layer).W_in, target.delta_mlp_pre[l]));
}

std::array<double, 3> ShapleyWeights::normalized() const {
  const double s = sum();
  if (!(std::abs(s) > kShapleyNormFloor)) return {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  return {phi_q / s, phi_k / s, phi_v / s};
}

ShapleyWeights shapley_from_values(const std::array<double, 8>& S) {
  constexpr unsigned Q = 1, K = 2, V = 4;
  // A player's value: 1/3 for joining alone, 1/6 for joining each single
  // other player, 1/3 for joining last.
  auto phi = [&](unsigned p, unsigned a, unsigned b) {
    return (S[p] - S[0]) / 3.0 + (S[p | a] - S[a]) / 6.0 + (S[p | b] - S[b]) / 6.0 + (S[p | a | b] - S[a | b]) / 3.0;
  };
  ShapleyWeights w;
  w.coalition_values = S;
  w.phi_q = phi(Q, K, V);
  w.phi_k = phi(K, Q, V);
  w.phi_v = phi(V, Q, K);
  return w;
}

ShapleyWeights shapley_qkv(const Model& model, const ComponentId& head, const PairRun& run,
                           const TargetDirection& target) {
  check_head(model, head);
  const Vec t_hat = native_target(model, head, target);
  const std::size_t pos = run.last();
  const auto z_corrupt = run.corrupt.cache.native_output(head, pos);
  std::array<double, 8> values{};
  for (unsigned mask = 0; mask < 8; ++mask) {
    const Vec z = head_coalition_output(model, head.layer, head.head, run.clean.cache, run.corrupt.cache,
                                        Coalition::from_mask(mask), pos);
    values[mask] = dot(subtract(z, z_corrupt), t_hat);
  }
  return shapley_from_values(values);
}

std::vector<double> edge_importance(double importance, double channel_weight, const ChannelRatios& ratios) {
  std::vector<double> e(ratios.ratios.size(), 0.0);
  if (ratios.degenerate) return e;
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = importance * channel_weight * ratios.ratios[i];
  return e;
}

double EdgeGraph::total_of(const ComponentId& id) const {
  const auto it = std::find(components.begin(), components.end(), id);
  if (it == components.end()) throw InputError("no component " + to_string(id) + " in graph");
  return total[static_cast<std::size_t>(it - components.begin())];
}

EdgeGraph total_importance(const Model& model, const PairRun& run, const TargetDirection& target, Alg1Mode mode) {
  const auto& cfg = model.config();
  const ComponentIndex index(cfg);
  const auto scores = node_scores(model, run, target);

  EdgeGraph g;
  g.components = index.ids();
  g.direct.assign(scores.values.begin(), scores.values.end());
  g.total = g.direct;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) g.heads.push_back(ComponentId::attention_head(l, h));
  }

  // Everything that does not depend on T is computed up front.
  const std::size_t n_heads = g.heads.size();
  g.shapley.resize(n_heads);
  std::vector<std::array<ChannelRatios, 3>> head_ratios(n_heads);
  std::vector<ChannelRatios> mlp_ratios(static_cast<std::size_t>(cfg.n_layers));
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n_heads; ++i) {
    g.shapley[i] = shapley_qkv(model, g.heads[i], run, target);
    head_ratios[i] = {channel_edge_ratios(model, run, g.heads[i], Channel::Q, target),
                      channel_edge_ratios(model, run, g.heads[i], Channel::K, target),
                      channel_edge_ratios(model, run, g.heads[i], Channel::V, target)};
  }
  for (int l = 0; l < cfg.n_layers; ++l) mlp_ratios[static_cast<std::size_t>(l)] = mlp_edge_ratios(model, run, l, target);

  for (std::size_t i = 0; i < index.size(); ++i) {
    g.edges.push_back({index[i], ComponentId::logits(), Channel::Input, g.direct[i], false});
  }

  auto flow = [&](const ComponentId& tgt, Channel ch, double weight, const ChannelRatios& ratios) {
    const double t_j = g.total[index.index_of(tgt)];
    const auto e = edge_importance(t_j, weight, ratios);
    for (std::size_t s = 0; s < e.size(); ++s) {
      g.edges.push_back({ratios.sources[s], tgt, ch, e[s], ratios.degenerate});
      g.total[index.index_of(ratios.sources[s])] += mode == Alg1Mode::SingleFactor ? e[s] : e[s] * t_j;
    }
  };

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    flow(ComponentId::mlp(l), Channel::Input, 1.0, mlp_ratios[static_cast<std::size_t>(l)]);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t i = static_cast<std::size_t>(l * cfg.n_heads + h);
      const auto w = g.shapley[i].normalized();
      flow(g.heads[i], Channel::Q, w[0], head_ratios[i][0]);
      flow(g.heads[i], Channel::K, w[1], head_ratios[i][1]);
      flow(g.heads[i], Channel::V, w[2], head_ratios[i][2]);
    }
  }
  return g;
}

EdgeGraph average_graphs(std::span<const EdgeGraph> graphs) {
  if (graphs.empty()) throw InputError("cannot average an empty set of graphs");
  EdgeGraph avg = graphs.front();
  const double n = static_cast<double>(graphs.size());
  for (std::size_t k = 1; k < graphs.size(); ++k) {
    const auto& g = graphs[k];
    if (g.edges.size() != avg.edges.size() || g.components != avg.components) {
      throw InputError("graphs to average have different structure");
    }
    for (std::size_t i = 0; i < avg.direct.size(); ++i) {
      avg.direct[i] += g.direct[i];
      avg.total[i] += g.total[i];
    }
    for (std::size_t e = 0; e < avg.edges.size(); ++e) {
      if (key_of(g.edges[e]) != key_of(avg.edges[e])) throw InputError("graphs to average have different edges");
      avg.edges[e].value += g.edges[e].value;
      avg.edges[e].degenerate = avg.edges[e].degenerate && g.edges[e].degenerate;
    }
    for (std::size_t h = 0; h < avg.shapley.size(); ++h) {
      auto& s = avg.shapley[h];
      s.phi_q += g.shapley[h].phi_q;
      s.phi_k += g.shapley[h].phi_k;
      s.phi_v += g.shapley[h].phi_v;
      for (std::size_t c = 0; c < 8; ++c) s.coalition_values[c] += g.shapley[h].coalition_values[c];
    }
  }
  for (double& v : avg.direct) v /= n;
  for (double& v : avg.total) v /= n;
  for (auto& e : avg.edges) e.value /= n;
  for (auto& s : avg.shapley) {
    s.phi_q /= n;
    s.phi_k /= n;
    s.phi_v /= n;
    for (double& c : s.coalition_values) c /= n;
  }
  return avg;
}

std::vector<Edge> rank_edges(const EdgeGraph& graph) {
  // Topological position of each component, with logits after everything.
  std::map<ComponentId, std::size_t> order;
  for (std::size_t i = 0; i < graph.components.size(); ++i) order[graph.components[i]] = i;
  order[ComponentId::logits()] = graph.components.size();
  std::vector<Edge> ranked = graph.edges;
  std::stable_sort(ranked.begin(), ranked.end(), [&](const Edge& a, const Edge& b) {
    const double ma = std::abs(a.value), mb = std::abs(b.value);
    if (ma != mb) return ma > mb;
    const auto ta = order.at(a.target), tb = order.at(b.target);
    if (ta != tb) return ta < tb;
    if (a.channel != b.channel) return a.channel < b.channel;
    return order.at(a.source) < order.at(b.source);
  });
  return ranked;
}

CircuitGraph circuit_from_ranking(std::span<const Edge> ranking, std::size_t n) {
  if (n > ranking.size()) {
    throw InputError("circuit of " + std::to_string(n) + " edges requested from " + std::to_string(ranking.size()));
  }
  CircuitGraph c;
  for (std::size_t i = 0; i < n; ++i) {
    c.edges.insert(key_of(ranking[i]));
    c.nodes.insert(ranking[i].source);
    c.nodes.insert(ranking[i].target);
  }
  return c;
}

CircuitGraph prune_circuit(const EdgeGraph& graph, std::size_t n_edges) {
  if (n_edges < 1 || n_edges > graph.edges.size()) {
    throw InputError("n_edges must be between 1 and " + std::to_string(graph.edges.size()) + ", got " +
                     std::to_string(n_edges));
  }
  return circuit_from_ranking(rank_edges(graph), n_edges);
}

nlohmann::json graph_to_json(const EdgeGraph& graph) {
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t i = 0; i < graph.components.size(); ++i) {
    nodes.push_back({{"id", to_string(graph.components[i])}, {"S", graph.direct[i]}, {"T", graph.total[i]}});
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : graph.edges) {
    edges.push_back({{"source", to_string(e.source)},
                     {"target", to_string(e.target)},
                     {"channel", to_string(e.channel)},
                     {"value", e.value},
                     {"degenerate", e.degenerate}});
  }
  nlohmann::json shapley = nlohmann::json::array();
  for (std::size_t h = 0; h < graph.heads.size(); ++h) {
    const auto& s = graph.shapley[h];
    shapley.push_back({{"head", to_string(graph.heads[h])},
                       {"phi_q", s.phi_q},
                       {"phi_k", s.phi_k},
                       {"phi_v", s.phi_v},
                       {"coalition_values", s.coalition_values}});
  }
  return {{"nodes", nodes}, {"edges", edges}, {"shapley", shapley}};
}

void write_dot(std::ostream& out, const EdgeGraph& graph, const CircuitGraph* circuit) {
  auto quoted = [](const ComponentId& id) { return "\"" + to_string(id) + "\""; };
  out << "digraph circuit {\n  rankdir=BT;\n";
  for (std::size_t i = 0; i < graph.components.size(); ++i) {
    const auto& id = graph.components[i];
    if (circuit && circuit->nodes.count(id) == 0) continue;
    out << "  " << quoted(id) << " [label=\"" << to_string(id) << "\\nS=" << graph.direct[i]
        << "\\nT=" << graph.total[i] << "\"];\n";
  }
  if (!circuit || circuit->nodes.count(ComponentId::logits()) != 0) out << "  \"logits\" [shape=box];\n";
  for (const auto& e : graph.edges) {
    if (circuit && !circuit->contains(key_of(e))) continue;
    out << "  " << quoted(e.source) << " -> " << quoted(e.target) << " [label=\"" << to_string(e.channel) << " "
        << e.value << "\"" << (e.value < 0 ? ", style=dashed" : "") << "];\n";
  }
  out << "}\n";
}

void write_shapley_csv(std::ostream& out, const EdgeGraph& graph) {
  out << "head,layer,index,phi_q,phi_k,phi_v,abs_q,abs_k,abs_v,total,sign\n";
  for (std::size_t h = 0; h < graph.heads.size(); ++h) {
    const auto& s = graph.shapley[h];
    const double abs_sum = std::abs(s.phi_q) + std::abs(s.phi_k) + std::abs(s.phi_v);
    auto share = [&](double v) { return abs_sum > 0.0 ? std::abs(v) / abs_sum : 1.0 / 3.0; };
    const double total = s.sum();
    out << to_string(graph.heads[h]) << ',' << graph.heads[h].layer << ',' << graph.heads[h].head << ',' << s.phi_q
        << ',' << s.phi_k << ',' << s.phi_v << ',' << share(s.phi_q) << ',' << share(s.phi_k) << ','
        << share(s.phi_v) << ',' << total << ',' << (total > 0 ? "positive" : total < 0 ? "negative" : "zero")
        << '\n';
  }
}

}  // namespace cfp
