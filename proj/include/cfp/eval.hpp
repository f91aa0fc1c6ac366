#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfp/edges.hpp"
#include "cfp/fingerprint.hpp"
#include "cfp/model.hpp"
#include "cfp/pair.hpp"

namespace cfp {

// logit(a⁺) − logit(a⁻) computed from a final residual (input to ln_f).
double metric_from_residual(const Model& model, std::span<const float> final_residual, TokenId a_plus,
                            TokenId a_minus);

// logit(a⁺) − logit(a⁻) at the last position of `tokens`.
double logit_diff(const Model& model, std::span<const TokenId> tokens, TokenId a_plus, TokenId a_minus);
// Same, on the clean prompt of `pair`.
double logit_diff(const Model& model, const EncodedPair& pair);

// Every edge of the model's residual graph, i.e. the circuit that ablates
// nothing.
CircuitGraph full_circuit(const ModelConfig& config);

// Throws InputError naming the first edge that is not part of the model's
// residual graph.
void validate_circuit(const ModelConfig& config, const CircuitGraph& circuit);

// Final-token recomputation under edge ablation. Each input channel of each
// component at the last position is assembled as the sum of its upstream
// sources' outputs, where a source whose edge is in `circuit` contributes its
// recomputed output and any other source its corrupted output. Keys and
// values at earlier positions are assembled the same way from the cached
// clean (kept) and corrupted (ablated) outputs. Returns the final residual.
//
// The full circuit reproduces the clean run and the empty circuit the
// corrupted run, both bitwise.
Vec ablated_final_residual(const Model& model, const PairRun& run, const CircuitGraph& circuit);

double run_ablated(const Model& model, const PairRun& run, TokenId a_plus, TokenId a_minus,
                   const CircuitGraph& circuit);
double run_ablated(const Model& model, const EncodedPair& pair, const CircuitGraph& circuit);

// Pairs whose clean and corrupted metrics differ by less than this are
// excluded from faithfulness averages.
inline constexpr double kMinMetricGap = 1e-4;

// `count` fractions spaced evenly in log between `lo` and `hi` inclusive.
std::vector<double> log_fractions(std::size_t count = 20, double lo = 0.001, double hi = 1.0);

struct FaithfulnessPoint {
  double fraction = 0.0;
  std::size_t n_edges = 0;  // round(fraction · |ranking|)
  double f = 0.0;           // mean over evaluated pairs
  double f_sd = 0.0;
  double m_clean = 0.0;
  double m_corrupt = 0.0;
  double m_circuit = 0.0;
};

struct FaithfulnessCurve {
  std::vector<FaithfulnessPoint> points;
  std::vector<std::size_t> evaluated;             // pair indices used
  std::vector<std::size_t> skipped;               // pair indices below kMinMetricGap
  std::vector<std::vector<double>> per_pair_f;    // [evaluated pair][point]
};

// Keeps the top round(fraction · |ranking|) edges of `ranking` for each
// fraction and averages f = (m_circuit − m_corrupt) / (m_clean − m_corrupt)
// over the pairs. Fractions must be strictly increasing in (0, 1].
FaithfulnessCurve faithfulness_curve(const Model& model, std::span<const EncodedPair> pairs,
                                     std::span<const Edge> ranking, std::span<const double> fractions);

struct CircuitMetrics {
  double cpr = 0.0;
  double cmd = 0.0;
};

// Trapezoidal means over log(fraction) of f and of |1 − f|.
CircuitMetrics cpr_cmd(const FaithfulnessCurve& curve);

// For each component, the drop in the clean logit difference when its
// final-position native output (the embedding row for the embedding) is
// replaced by the corrupted one.
std::vector<double> activation_patching_scores(const Model& model, const EncodedPair& pair,
                                               std::span<const ComponentId> components);

// Logit difference with all of `components` patched at once.
double patched_logit_diff(const Model& model, const EncodedPair& pair, std::span<const ComponentId> components);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

void write_curve_csv(std::ostream& out, const FaithfulnessCurve& curve);
nlohmann::json curve_to_json(const FaithfulnessCurve& curve, const CircuitMetrics& metrics);

}  // namespace cfp
