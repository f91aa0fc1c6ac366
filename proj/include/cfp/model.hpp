#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfp/component.hpp"
#include "cfp/tensor.hpp"

namespace cfp {

using TokenId = std::int32_t;

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int max_positions = 0;
  float ln_epsilon = 1e-5f;

  // Throws LoadError when a count is non-positive, n_heads * d_head differs
  // from d_model, or ln_epsilon is not positive.
  void validate() const;

  // Accepts both the native field names and Hugging Face GPT-2 names
  // (n_layer, n_head, n_embd, n_positions, n_inner, layer_norm_epsilon).
  static ModelConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  bool operator==(const ModelConfig&) const = default;
};

// Per-head projections are stored split and oriented for row-vector inputs:
// q = x · W_Q[h] + b_Q[h] (W_Q[h] is d_model×d_head) and a head's residual
// write is z · W_O[h] (W_O[h] is d_head×d_model).
struct LayerWeights {
  Vec ln1_scale, ln1_bias;
  std::vector<Matrix> W_Q, W_K, W_V;
  std::vector<Vec> b_Q, b_K, b_V;
  std::vector<Matrix> W_O;
  Vec b_O;
  Vec ln2_scale, ln2_bias;
  Matrix W_in;  // d_model×d_mlp
  Vec b_in;
  Matrix W_out;  // d_mlp×d_model
  Vec b_out;
};

struct WeightSet {
  Matrix token_embedding;     // vocab×d_model
  Matrix position_embedding;  // max_positions×d_model
  std::vector<LayerWeights> layers;
  Vec lnf_scale, lnf_bias;
  std::optional<Matrix> unembedding;  // vocab×d_model; tied to token_embedding when absent
};

// Immutable after construction; share freely between threads.
class Model {
 public:
  Model(ModelConfig config, WeightSet weights);

  const ModelConfig& config() const { return config_; }
  const WeightSet& weights() const { return weights_; }
  const LayerWeights& layer(int l) const { return weights_.layers[static_cast<std::size_t>(l)]; }
  const Matrix& unembedding() const {
    return weights_.unembedding ? *weights_.unembedding : weights_.token_embedding;
  }

  // Output projection of a component: W_O[h] for heads, W_out for MLPs.
  const Matrix& output_projection(const ComponentId& id) const;

 private:
  ModelConfig config_;
  WeightSet weights_;
};

Model load_model(const std::filesystem::path& config_path, const std::filesystem::path& weights_path);
// Reads config.json and model.safetensors from `dir`, and checks them against
// manifest.json when that file exists.
Model load_model(const std::filesystem::path& dir);
// Writes config.json, model.safetensors and manifest.json in the split
// per-head layout.
void save_model(const Model& model, const std::filesystem::path& dir);

// Gaussian weights with standard deviation `scale` (LayerNorm scales around 1).
Model make_random_model(const ModelConfig& config, std::uint64_t seed, float scale = 0.2f);

// --- activations -----------------------------------------------------------

// All matrices have one row per sequence position.
struct HeadActivations {
  Matrix q, k, v;   // seq×d_head
  Matrix pattern;   // seq×seq, row t is the attention distribution of query t
  Matrix z;         // seq×d_head, attention-weighted value sum before W_O
  Matrix out;       // seq×d_model, z · W_O[h]
};

struct LayerActivations {
  Matrix residual_pre;   // input to the block
  Matrix residual_mid;   // after attention
  Matrix residual_post;  // after the MLP
  std::vector<HeadActivations> heads;
  Vec attn_bias;         // b_O, added once per position
  Matrix mlp_pre;        // seq×d_mlp, before the nonlinearity
  Matrix mlp_hidden;     // seq×d_mlp, after the nonlinearity
  Matrix mlp_out;        // seq×d_model
};

struct ActivationCache {
  std::vector<TokenId> tokens;
  std::vector<LayerActivations> layers;
  // Input to the final LayerNorm. Equals the last block's residual_post
  // unless a residual intervention targeted layer n_layers.
  Matrix final_residual;

  std::size_t seq_len() const { return tokens.size(); }
  const Matrix& embedding() const { return layers.front().residual_pre; }
  const Matrix& residual_final() const { return final_residual; }
  // Residual stream entering block `l`; l == n_layers is the final residual.
  std::span<const float> residual(int l, std::size_t pos) const;
  // Native-space output: z for heads, mlp_hidden for MLPs.
  std::span<const float> native_output(const ComponentId& id, std::size_t pos) const;
  // Residual-space write: the head's out, mlp_out, or the embedding.
  std::span<const float> residual_output(const ComponentId& id, std::size_t pos) const;
};

struct ForwardResult {
  Matrix logits;  // seq×vocab
  ActivationCache cache;
};

// --- interventions ---------------------------------------------------------

enum class InterventionKind {
  ReplaceNative,    // z of a head, hidden activation of an MLP
  AddNative,
  ReplaceResidual,  // residual stream entering a block
  AddResidual,
};

struct Intervention {
  InterventionKind kind = InterventionKind::AddNative;
  ComponentId component;           // native kinds
  int residual_layer = 0;          // residual kinds; n_layers targets the final residual
  std::optional<int> position;     // nullopt: every position; negative counts from the end
  Vec payload;
  // Add: x += scale * payload. Replace: x += scale * (payload - x), and
  // scale == 1 assigns the payload exactly.
  float scale = 1.0f;
};

// Which channels of a head read from the clean run; the rest read from the
// corrupted run.
struct Coalition {
  bool q = false;
  bool k = false;
  bool v = false;

  static Coalition from_mask(unsigned mask) { return {(mask & 1u) != 0, (mask & 2u) != 0, (mask & 4u) != 0}; }
  unsigned mask() const { return (q ? 1u : 0u) | (k ? 2u : 0u) | (v ? 4u : 0u); }
};

Matrix forward(const Model& model, std::span<const TokenId> tokens);
ForwardResult forward_cached(const Model& model, std::span<const TokenId> tokens);
ForwardResult forward_intervened(const Model& model, std::span<const TokenId> tokens,
                                 std::span<const Intervention> interventions);

// Recomputes only the last position on top of `base`, a cache of the same
// token sequence. Every intervention must resolve to the last position.
// Returns that position's logits; equals the last row of forward_intervened.
// `base` must come from a run without interventions at the last position.
Vec forward_last(const Model& model, const ActivationCache& base, std::span<const Intervention> interventions);
// Same, but only the logits of `tokens`, in order; each equals the matching
// entry of forward_last exactly.
Vec forward_last_logits(const Model& model, const ActivationCache& base, std::span<const Intervention> interventions,
                        std::span<const TokenId> tokens);

// Recomputes head (layer, head) at `position` with the query taken from the
// coalition's Q source and keys/values for positions 0..position taken from
// the K/V sources. Returns the mixed z.
Vec head_coalition_output(const Model& model, int layer, int head, const ActivationCache& clean,
                          const ActivationCache& corrupt, Coalition coalition, std::size_t position);

}  // namespace cfp
