#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfp/fingerprint.hpp"
#include "cfp/model.hpp"
#include "cfp/pair.hpp"

namespace cfp {

// Orthonormal basis of the centered span of a set of representations.
struct SteeringBasis {
  Vec mean;
  std::vector<Vec> basis;

  std::size_t dim() const { return mean.size(); }
};

// Fraction of centered variance the kept singular vectors must cover.
inline constexpr double kBasisVariance = 0.99;

// Centers the representations and keeps the leading right singular vectors
// up to kBasisVariance of the variance, at most k − 1 of them. Throws
// InputError for fewer than two representations or mismatched sizes, and
// DegenerateError when they are all identical.
SteeringBasis build_basis(std::span<const Vec> reps);

// Σ_i ((rep − mean) · u_i) u_i.
Vec project_prototype(const SteeringBasis& basis, std::span<const float> rep);

// The additive change x' − x of the known-target rule at α = 1:
// ‖d_s − d_t‖ (d̂_t − d̂_s). All zeros when d_s == d_t.
Vec known_target_shift(std::span<const float> d_s, std::span<const float> d_t);
// x − α‖d_s − d_t‖ d̂_s + α‖d_s − d_t‖ d̂_t. Returns x unchanged for α = 0 or
// d_s == d_t. Throws DegenerateError for a zero-norm direction.
Vec steer_known_target(std::span<const float> x, std::span<const float> d_s, std::span<const float> d_t, float alpha);

// x' − x of the style rule: ‖d_s‖ (d̂_t − d̂_s).
Vec style_shift(std::span<const float> d_s, std::span<const float> d_t);
// x − ‖d_s‖ (d̂_s − d̂_t).
Vec steer_style(std::span<const float> x, std::span<const float> d_s, std::span<const float> d_t);

enum class SteeringMode { KnownTarget, Style };
// Where interventions are written: a head's z, or the residual stream
// entering the head's layer.
enum class SteeringSpace { HeadNative, Residual };

std::string to_string(SteeringMode m);
SteeringMode parse_steering_mode(const std::string& s);
std::string to_string(SteeringSpace s);
SteeringSpace parse_steering_space(const std::string& s);

struct SteeringSite {
  ComponentId head;
  SteeringSpace space = SteeringSpace::HeadNative;
  SteeringBasis basis;

  // The head's z or the residual entering its layer, taken from `rep`.
  std::span<const float> vector_of(const AnswerRep& rep) const;
};

// One site per head (per distinct layer in residual space), each with a
// basis built from the prototype representations.
std::vector<SteeringSite> make_sites(std::span<const ComponentId> heads, SteeringSpace space,
                                     std::span<const AnswerRep> prototypes);

// The `n` heads with the largest |score|, ties broken by (layer, head).
std::vector<ComponentId> top_heads(const ComponentScores& scores, std::size_t n);

// Interventions at the last position that move each site from the source
// prototype toward the target prototype at strength `alpha`. Sites whose
// shift is zero, and α = 0, produce no interventions.
std::vector<Intervention> steering_interventions(std::span<const SteeringSite> sites, const AnswerRep& source,
                                                 const AnswerRep& target, SteeringMode mode, float alpha);

// Activation-patching baseline: each site's last-position value is moved
// toward its value in `corrupt` by `alpha` (α = 1 replaces it).
std::vector<Intervention> patching_interventions(std::span<const SteeringSite> sites, const ActivationCache& corrupt,
                                                 float alpha);

struct SteeringConfig {
  std::vector<ComponentId> heads;
  SteeringSpace space = SteeringSpace::HeadNative;
  SteeringMode mode = SteeringMode::KnownTarget;
  // Tokens whose isolated representations span each site's basis. The
  // answers of every pair are added automatically.
  std::vector<TokenId> prototype_tokens;
  TokenId bos = 0;

  nlohmann::json to_json() const;
};

// Defaults: 25 heads and 11 strengths from 0 to 1.
inline constexpr std::size_t kDefaultSteeringHeads = 25;
std::vector<double> default_alphas();

struct SweepStat {
  double mean = 0.0;
  double sd = 0.0;
};

struct SweepRow {
  double alpha = 0.0;
  SweepStat steer_p, steer_ld, patch_p, patch_ld;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  // [pair][alpha] values behind the statistics.
  std::vector<std::vector<double>> steer_p, steer_ld, patch_p, patch_ld;
};

// For each pair and α: P(a⁺) and logit(a⁺) − logit(a⁻) at the last position
// when steering from a⁺ toward a⁻ at the configured heads, and when patching
// the same sites with the corrupted run. Alphas must be non-empty, ascending
// and non-negative.
SweepResult steering_sweep(const Model& model, std::span<const EncodedPair> pairs, const SteeringConfig& config,
                           std::span<const double> alphas);

// Greedy decoding of `max_new_tokens` tokens with the source → target
// interventions applied at the last position of every step. Returns only the
// new tokens.
std::vector<TokenId> generate_steered(const Model& model, std::span<const TokenId> prompt,
                                      std::span<const SteeringSite> sites, const AnswerRep& source,
                                      const AnswerRep& target, SteeringMode mode, float alpha,
                                      std::size_t max_new_tokens);

void write_sweep_csv(std::ostream& out, const SweepResult& result);

}  // namespace cfp
