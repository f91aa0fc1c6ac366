#include "cfp/component.hpp"

#include <cstdio>
#include <stdexcept>

#include "cfp/model.hpp"

namespace cfp {

std::string to_string(const ComponentId& id) {
  switch (id.kind) {
    case ComponentKind::Embedding:
      return "embed";
    case ComponentKind::Head:
      return "a" + std::to_string(id.layer) + ".h" + std::to_string(id.head);
    case ComponentKind::Mlp:
      return "m" + std::to_string(id.layer);
    case ComponentKind::Logits:
      return "logits";
  }
  return "?";
}

std::optional<ComponentId> parse_component(const std::string& name) {
  if (name == "embed") return ComponentId::embedding();
  if (name == "logits") return ComponentId::logits();
  int layer = 0;
  int head = 0;
  char tail = 0;
  if (std::sscanf(name.c_str(), "a%d.h%d%c", &layer, &head, &tail) == 2 && layer >= 0 && head >= 0) {
    return ComponentId::attention_head(layer, head);
  }
  if (std::sscanf(name.c_str(), "m%d%c", &layer, &tail) == 1 && layer >= 0) return ComponentId::mlp(layer);
  return std::nullopt;
}

ComponentIndex::ComponentIndex(const ModelConfig& config) : n_layers_(config.n_layers), n_heads_(config.n_heads) {
  ids_.reserve(1 + static_cast<std::size_t>(n_layers_ * (n_heads_ + 1)));
  ids_.push_back(ComponentId::embedding());
  for (int l = 0; l < n_layers_; ++l) {
    for (int h = 0; h < n_heads_; ++h) ids_.push_back(ComponentId::attention_head(l, h));
    ids_.push_back(ComponentId::mlp(l));
  }
}

std::size_t ComponentIndex::head_index(int layer, int head) const {
  return 1 + static_cast<std::size_t>(layer * (n_heads_ + 1) + head);
}

std::size_t ComponentIndex::mlp_index(int layer) const {
  return 1 + static_cast<std::size_t>(layer * (n_heads_ + 1) + n_heads_);
}

std::size_t ComponentIndex::index_of(const ComponentId& id) const {
  switch (id.kind) {
    case ComponentKind::Embedding:
      return 0;
    case ComponentKind::Head:
      if (id.layer < 0 || id.layer >= n_layers_ || id.head < 0 || id.head >= n_heads_) break;
      return head_index(id.layer, id.head);
    case ComponentKind::Mlp:
      if (id.layer < 0 || id.layer >= n_layers_) break;
      return mlp_index(id.layer);
    case ComponentKind::Logits:
      break;
  }
  throw std::out_of_range("component " + to_string(id) + " is not part of this model");
}

std::vector<ComponentId> ComponentIndex::upstream_of(const ComponentId& target) const {
  std::size_t end = 0;
  switch (target.kind) {
    case ComponentKind::Embedding:
      return {};
    case ComponentKind::Head:
      end = head_index(target.layer, 0);
      break;
    case ComponentKind::Mlp:
      end = mlp_index(target.layer);
      break;
    case ComponentKind::Logits:
      end = ids_.size();
      break;
  }
  return {ids_.begin(), ids_.begin() + static_cast<std::ptrdiff_t>(end)};
}

}  // namespace cfp
