#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace cfp {

struct ModelConfig;

enum class ComponentKind { Embedding, Head, Mlp, Logits };

// A node of the computational graph. `layer`/`head` are meaningful only for
// the kinds that have them (head is -1 for MLPs; both are -1 for the
// embedding and logits nodes).
struct ComponentId {
  ComponentKind kind = ComponentKind::Embedding;
  int layer = -1;
  int head = -1;

  static ComponentId embedding() { return {ComponentKind::Embedding, -1, -1}; }
  static ComponentId attention_head(int layer, int head) { return {ComponentKind::Head, layer, head}; }
  static ComponentId mlp(int layer) { return {ComponentKind::Mlp, layer, -1}; }
  static ComponentId logits() { return {ComponentKind::Logits, -1, -1}; }

  bool is_head() const { return kind == ComponentKind::Head; }
  bool is_mlp() const { return kind == ComponentKind::Mlp; }

  auto operator<=>(const ComponentId&) const = default;
};

// "embed", "a3.h7", "m3", "logits".
std::string to_string(const ComponentId& id);
std::optional<ComponentId> parse_component(const std::string& name);

// Dense indexing of the scoreable components of a model: the embedding node
// first, then layer by layer the heads in order followed by that layer's MLP.
// This is also a topological order of the residual-stream graph.
class ComponentIndex {
 public:
  explicit ComponentIndex(const ModelConfig& config);

  std::size_t size() const { return ids_.size(); }
  const ComponentId& operator[](std::size_t i) const { return ids_[i]; }
  const std::vector<ComponentId>& ids() const { return ids_; }
  std::size_t index_of(const ComponentId& id) const;

  std::size_t head_index(int layer, int head) const;
  std::size_t mlp_index(int layer) const;

  // Components whose outputs are summed into the input of `target`:
  // the embedding, every head and MLP of earlier layers and, for an MLP
  // target, the heads of its own layer. Logits read everything.
  std::vector<ComponentId> upstream_of(const ComponentId& target) const;

 private:
  int n_layers_;
  int n_heads_;
  std::vector<ComponentId> ids_;
};

}  // namespace cfp
