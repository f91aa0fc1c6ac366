#pragma once

#include <array>
#include <compare>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfp/component.hpp"
#include "cfp/fingerprint.hpp"
#include "cfp/model.hpp"

namespace cfp {

// Input pathway of an edge: the query, key or value input of a head, or the
// single residual input of an MLP or of the logits.
enum class Channel { Q, K, V, Input };

std::string to_string(Channel c);
Channel parse_channel(const std::string& s);

// Denominators below this are degenerate: ratios are zeroed and flagged.
inline constexpr double kRatioEpsilon = 1e-6;

// Share of each upstream component in one input channel of a target.
struct ChannelRatios {
  std::vector<ComponentId> sources;  // ComponentIndex::upstream_of order
  std::vector<double> ratios;
  double denominator = 0.0;
  bool degenerate = false;

  double sum() const;
};

// R_i = ⟨Δo_i, W_ch Δch⟩ / ⟨Δr^(ℓ), W_ch Δch⟩ for channel Q, K or V of `head`,
// with Δch the answer-token channel difference from `target` and Δo_i, Δr^(ℓ)
// the clean-minus-corrupted values at the final position.
ChannelRatios channel_edge_ratios(const Model& model, const PairRun& run, const ComponentId& head, Channel channel,
                                  const TargetDirection& target);

// Same for the MLP of `layer`, whose input direction is W_in Δmlp_pre and
// whose denominator is the residual after that layer's attention.
ChannelRatios mlp_edge_ratios(const Model& model, const PairRun& run, int layer, const TargetDirection& target);

// Coalition values are indexed by Coalition::mask (bit 0 Q, bit 1 K, bit 2 V).
struct ShapleyWeights {
  double phi_q = 0.0;
  double phi_k = 0.0;
  double phi_v = 0.0;
  std::array<double, 8> coalition_values{};

  double sum() const { return phi_q + phi_k + phi_v; }
  // φ / Σφ, or 1/3 each when |Σφ| <= kShapleyNormFloor.
  std::array<double, 3> normalized() const;
};

inline constexpr double kShapleyNormFloor = 1e-8;

// Closed-form three-player Shapley values from the eight coalition values.
ShapleyWeights shapley_from_values(const std::array<double, 8>& values);

// Scores every coalition of the head against its native target and returns
// the Shapley decomposition. S_C = ⟨z_C − z_corrupt, t̂⟩, so S_∅ = 0 and
// S_QKV is the head's node score.
ShapleyWeights shapley_qkv(const Model& model, const ComponentId& head, const PairRun& run,
                           const TargetDirection& target);

// Per-source edge values into one channel: importance · weight · R_i, where
// weight is φ̂ of the channel (1 for MLP inputs). Degenerate channels give 0.
std::vector<double> edge_importance(double importance, double channel_weight, const ChannelRatios& ratios);

struct Edge {
  ComponentId source;
  ComponentId target;
  Channel channel = Channel::Input;
  double value = 0.0;
  bool degenerate = false;
};

struct EdgeKey {
  ComponentId source;
  ComponentId target;
  Channel channel = Channel::Input;

  auto operator<=>(const EdgeKey&) const = default;
};

inline EdgeKey key_of(const Edge& e) { return {e.source, e.target, e.channel}; }

// How downstream importance flows back. SingleFactor: T_i += E_{i→j}, with
// E already scaled by T_j. Literal: T_i += E_{i→j} · T_j.
enum class Alg1Mode { SingleFactor, Literal };

std::string to_string(Alg1Mode m);
Alg1Mode parse_alg1_mode(const std::string& s);

struct EdgeGraph {
  std::vector<ComponentId> components;  // ComponentIndex order
  std::vector<double> direct;           // S_c
  std::vector<double> total;            // T_c
  std::vector<Edge> edges;
  std::vector<ComponentId> heads;       // (layer, head) order
  std::vector<ShapleyWeights> shapley;  // parallel to heads

  double total_of(const ComponentId& id) const;
};

// Direct scores, Shapley weights and ratios for every target, then a backward
// pass from the last layer: within a layer the MLP is processed before the
// heads that feed it. Edges into the logits node carry the source's S_c.
EdgeGraph total_importance(const Model& model, const PairRun& run, const TargetDirection& target,
                           Alg1Mode mode = Alg1Mode::SingleFactor);

// Mean of graphs with identical structure (same model): edge values, S, T and
// Shapley weights are averaged; an edge is degenerate only if it is
// degenerate in every graph.
EdgeGraph average_graphs(std::span<const EdgeGraph> graphs);

// Edges ranked by |E| descending; ties broken by target (ComponentIndex
// order, logits last), then channel, then source.
std::vector<Edge> rank_edges(const EdgeGraph& graph);

struct CircuitGraph {
  std::set<EdgeKey> edges;
  std::set<ComponentId> nodes;  // endpoints of kept edges

  bool contains(const EdgeKey& key) const { return edges.count(key) != 0; }
  std::size_t size() const { return edges.size(); }
};

// The top `n_edges` of rank_edges. Throws InputError unless 1 <= n <= |E|.
CircuitGraph prune_circuit(const EdgeGraph& graph, std::size_t n_edges);
// The first `n` of an existing ranking (n may be 0 here: the empty circuit).
CircuitGraph circuit_from_ranking(std::span<const Edge> ranking, std::size_t n);

nlohmann::json graph_to_json(const EdgeGraph& graph);
// Nodes carry S/T; edges are labelled with channel and value. When `circuit`
// is given only its edges are written.
void write_dot(std::ostream& out, const EdgeGraph& graph, const CircuitGraph* circuit = nullptr);
// One row per head: signed φ, |φ| normalized to sum to 1, and the sign of Σφ.
void write_shapley_csv(std::ostream& out, const EdgeGraph& graph);

}  // namespace cfp
