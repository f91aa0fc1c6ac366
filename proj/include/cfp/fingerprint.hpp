#pragma once

#include <span>
#include <string>
#include <vector>

#include "cfp/component.hpp"
#include "cfp/model.hpp"
#include "cfp/pair.hpp"

namespace cfp {

class Tokenizer;

// Activations at one position of one sequence, as needed for directions.
struct AnswerRep {
  std::vector<Vec> residual;                      // n_layers + 1; last is the input to ln_f
  std::vector<std::vector<Vec>> q, k, v, z;       // [layer][head], d_head
  std::vector<Vec> mlp_pre;                       // [layer], d_mlp
};

// Reads every vector of `cache` at `position`.
AnswerRep representation_at(const ActivationCache& cache, std::size_t position);

// Runs [BOS, token] and reads the answer-token position.
AnswerRep answer_representation(const Model& model, TokenId token, TokenId bos);

// Elementwise differences of two representations.
struct TargetDirection {
  std::vector<Vec> delta_r;                         // n_layers + 1
  std::vector<std::vector<Vec>> delta_q, delta_k, delta_v;
  std::vector<Vec> delta_mlp_pre;
  float norm_L = 0.0f;                              // ||delta_r.back()||

  const Vec& final_delta() const { return delta_r.back(); }
  // delta_r.back() / norm_L. Throws DegenerateError when norm_L < kDegenerateNorm.
  Vec unit_final() const;
};

inline constexpr float kDegenerateNorm = 1e-8f;

TargetDirection direction_between(const AnswerRep& plus, const AnswerRep& minus);
TargetDirection target_direction(const Model& model, TokenId a_plus, TokenId a_minus, TokenId bos);
// Elementwise mean; norm_L is recomputed from the averaged final delta.
TargetDirection average_directions(std::span<const TargetDirection> directions);

// W_c^T Δr^(L) / ||Δr^(L)|| in the component's native space (d_head for
// heads, d_mlp for MLPs). Throws DegenerateError for a zero target.
Vec native_target(const Model& model, const ComponentId& component, const TargetDirection& target);

// Node scores indexed like ComponentIndex; values[0] is the embedding node.
struct ComponentScores {
  std::vector<ComponentId> components;
  std::vector<float> values;

  float embedding_score() const { return values.front(); }
  float operator[](const ComponentId& id) const;
  double total() const;
};

// Clean and corrupted forward passes of one pair.
struct PairRun {
  ForwardResult clean;
  ForwardResult corrupt;

  std::size_t last() const { return clean.cache.seq_len() - 1; }
};

// Throws DatasetError when the prompts differ in length.
PairRun run_pair(const Model& model, const EncodedPair& pair);

ComponentScores node_scores(const Model& model, const PairRun& run, const TargetDirection& target);
ComponentScores node_scores(const Model& model, const EncodedPair& pair, const TargetDirection& target);

// ⟨Δr_prompt^(L), Δr^(L)⟩ / ||Δr^(L)|| at the final position; the node scores
// sum to this.
double projected_prompt_difference(const PairRun& run, const TargetDirection& target);

// Per-position head scores of a single prompt: rows are positions, columns
// heads in (layer, head) order.
Matrix token_identity_map(const Model& model, std::span<const TokenId> tokens, const TargetDirection& target);

// Longest left padding inserted to align instruction-prefixed prompts.
inline constexpr std::size_t kMaxInstructionPad = 8;

// Final-token direction between "instruction_a prompt" and "instruction_b
// prompt", averaged over prompts. The shorter encoding of each prompt is
// left-padded with BOS; a gap above kMaxInstructionPad throws DatasetError.
TargetDirection instruction_direction(const Model& model, const Tokenizer& tokenizer,
                                      std::span<const std::string> base_prompts, const std::string& instruction_a,
                                      const std::string& instruction_b);

}  // namespace cfp
