#include "cfp/fingerprint.hpp"

#include <algorithm>

#include "cfp/error.hpp"
#include "cfp/kernels.hpp"
#include "cfp/tokenizer.hpp"

namespace cfp {
namespace {

Vec copy(std::span<const float> s) { return {s.begin(), s.end()}; }

std::vector<std::vector<Vec>> head_differences(const std::vector<std::vector<Vec>>& a,
                                               const std::vector<std::vector<Vec>>& b) {
  std::vector<std::vector<Vec>> out(a.size());
  for (std::size_t l = 0; l < a.size(); ++l) {
    for (std::size_t h = 0; h < a[l].size(); ++h) out[l].push_back(subtract(a[l][h], b[l][h]));
  }
  return out;
}

std::vector<Vec> differences(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  std::vector<Vec> out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(subtract(a[i], b[i]));
  return out;
}

void accumulate(Vec& acc, const Vec& v) {
  if (acc.empty()) acc.assign(v.size(), 0.0f);
  add_scaled(acc, v, 1.0f);
}

}  // namespace

AnswerRep representation_at(const ActivationCache& cache, std::size_t position) {
  AnswerRep rep;
  const std::size_t n_layers = cache.layers.size();
  for (std::size_t l = 0; l <= n_layers; ++l) rep.residual.push_back(copy(cache.residual(static_cast<int>(l), position)));
  rep.q.resize(n_layers);
  rep.k.resize(n_layers);
  rep.v.resize(n_layers);
  rep.z.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (const auto& h : cache.layers[l].heads) {
      rep.q[l].push_back(copy(h.q.row(position)));
      rep.k[l].push_back(copy(h.k.row(position)));
      rep.v[l].push_back(copy(h.v.row(position)));
      rep.z[l].push_back(copy(h.z.row(position)));
    }
    rep.mlp_pre.push_back(copy(cache.layers[l].mlp_pre.row(position)));
  }
  return rep;
}

AnswerRep answer_representation(const Model& model, TokenId token, TokenId bos) {
  const std::vector<TokenId> tokens{bos, token};
  return representation_at(forward_cached(model, tokens).cache, 1);
}

Vec TargetDirection::unit_final() const {
  if (!(norm_L >= kDegenerateNorm)) {
    throw DegenerateError("target direction has norm " + std::to_string(norm_L) + "; the two answers are indistinguishable");
  }
  return scaled(final_delta(), 1.0f / norm_L);
}

TargetDirection direction_between(const AnswerRep& plus, const AnswerRep& minus) {
  TargetDirection t;
  t.delta_r = differences(plus.residual, minus.residual);
  t.delta_q = head_differences(plus.q, minus.q);
  t.delta_k = head_differences(plus.k, minus.k);
  t.delta_v = head_differences(plus.v, minus.v);
  t.delta_mlp_pre = differences(plus.mlp_pre, minus.mlp_pre);
  t.norm_L = norm(t.final_delta());
  return t;
}

TargetDirection target_direction(const Model& model, TokenId a_plus, TokenId a_minus, TokenId bos) {
  return direction_between(answer_representation(model, a_plus, bos), answer_representation(model, a_minus, bos));
}

TargetDirection average_directions(std::span<const TargetDirection> directions) {
  if (directions.empty()) throw InputError("cannot average an empty set of directions");
  TargetDirection avg;
  const auto& first = directions.front();
  avg.delta_r.resize(first.delta_r.size());
  avg.delta_mlp_pre.resize(first.delta_mlp_pre.size());
  avg.delta_q.assign(first.delta_q.size(), std::vector<Vec>(first.delta_q.empty() ? 0 : first.delta_q[0].size()));
  avg.delta_k = avg.delta_q;
  avg.delta_v = avg.delta_q;
  for (const auto& d : directions) {
    for (std::size_t l = 0; l < d.delta_r.size(); ++l) accumulate(avg.delta_r[l], d.delta_r[l]);
    for (std::size_t l = 0; l < d.delta_mlp_pre.size(); ++l) accumulate(avg.delta_mlp_pre[l], d.delta_mlp_pre[l]);
    for (std::size_t l = 0; l < d.delta_q.size(); ++l) {
      for (std::size_t h = 0; h < d.delta_q[l].size(); ++h) {
        accumulate(avg.delta_q[l][h], d.delta_q[l][h]);
        accumulate(avg.delta_k[l][h], d.delta_k[l][h]);
        accumulate(avg.delta_v[l][h], d.delta_v[l][h]);
      }
    }
  }
  const float inv = 1.0f / static_cast<float>(directions.size());
  auto shrink = [inv](Vec& v) {
    for (float& x : v) x *= inv;
  };
  for (auto& v : avg.delta_r) shrink(v);
  for (auto& v : avg.delta_mlp_pre) shrink(v);
  for (auto* group : {&avg.delta_q, &avg.delta_k, &avg.delta_v}) {
    for (auto& layer : *group) {
      for (auto& v : layer) shrink(v);
    }
  }
  avg.norm_L = norm(avg.final_delta());
  return avg;
}

Vec native_target(const Model& model, const ComponentId& component, const TargetDirection& target) {
  const Vec unit = target.unit_final();
  const Matrix& w = model.output_projection(component);
  Vec out(w.rows());
  kernels::linear_transposed_row(unit, w, out);
  return out;
}

float ComponentScores::operator[](const ComponentId& id) const {
  const auto it = std::find(components.begin(), components.end(), id);
  if (it == components.end()) throw InputError("no score for component " + to_string(id));
  return values[static_cast<std::size_t>(it - components.begin())];
}

double ComponentScores::total() const {
  double s = 0.0;
  for (float v : values) s += v;
  return s;
}

PairRun run_pair(const Model& model, const EncodedPair& pair) {
  if (pair.clean.size() != pair.corrupt.size()) {
    throw DatasetError("clean prompt has " + std::to_string(pair.clean.size()) + " tokens, corrupted prompt has " +
                       std::to_string(pair.corrupt.size()));
  }
  return {forward_cached(model, pair.clean), forward_cached(model, pair.corrupt)};
}

ComponentScores node_scores(const Model& model, const PairRun& run, const TargetDirection& target) {
  const Vec unit = target.unit_final();
  const ComponentIndex index(model.config());
  const std::size_t pos = run.last();
  const auto& clean = run.clean.cache;
  const auto& corrupt = run.corrupt.cache;

  ComponentScores scores;
  scores.components = index.ids();
  scores.values.assign(index.size(), 0.0f);
  scores.values[0] = dot(subtract(clean.embedding().row(pos), corrupt.embedding().row(pos)), unit);
  for (std::size_t i = 1; i < index.size(); ++i) {
    const ComponentId& id = index[i];
    const Vec t_hat = native_target(model, id, target);
    scores.values[i] = dot(subtract(clean.native_output(id, pos), corrupt.native_output(id, pos)), t_hat);
  }
  return scores;
}

ComponentScores node_scores(const Model& model, const EncodedPair& pair, const TargetDirection& target) {
  target.unit_final();
  return node_scores(model, run_pair(model, pair), target);
}

double projected_prompt_difference(const PairRun& run, const TargetDirection& target) {
  const Vec unit = target.unit_final();
  const auto a = run.clean.cache.residual_final().row(run.last());
  const auto b = run.corrupt.cache.residual_final().row(run.last());
  double s = 0.0;
  for (std::size_t i = 0; i < unit.size(); ++i) s += (double(a[i]) - double(b[i])) * unit[i];
  return s;
}

Matrix token_identity_map(const Model& model, std::span<const TokenId> tokens, const TargetDirection& target) {
  const auto& cfg = model.config();
  target.unit_final();
  const auto cache = forward_cached(model, tokens).cache;
  Matrix map(tokens.size(), static_cast<std::size_t>(cfg.n_layers * cfg.n_heads));
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto id = ComponentId::attention_head(l, h);
      const Vec t_hat = native_target(model, id, target);
      const auto col = static_cast<std::size_t>(l * cfg.n_heads + h);
      for (std::size_t t = 0; t < tokens.size(); ++t) map(t, col) = dot(cache.native_output(id, t), t_hat);
    }
  }
  return map;
}

TargetDirection instruction_direction(const Model& model, const Tokenizer& tokenizer,
                                      std::span<const std::string> base_prompts, const std::string& instruction_a,
                                      const std::string& instruction_b) {
  if (base_prompts.empty()) throw InputError("instruction direction needs at least one prompt");
  std::vector<TargetDirection> per_prompt;
  for (const auto& prompt : base_prompts) {
    auto a = tokenizer.encode(instruction_a + " " + prompt);
    auto b = tokenizer.encode(instruction_b + " " + prompt);
    const std::size_t gap = a.size() > b.size() ? a.size() - b.size() : b.size() - a.size();
    if (gap > kMaxInstructionPad) {
      throw DatasetError("instruction-prefixed prompts differ by " + std::to_string(gap) + " tokens (" +
                         std::to_string(a.size()) + " vs " + std::to_string(b.size()) + "); at most " +
                         std::to_string(kMaxInstructionPad) + " can be padded");
    }
    auto& shorter = a.size() < b.size() ? a : b;
    shorter.insert(shorter.begin(), gap, tokenizer.bos_id());
    const auto ca = forward_cached(model, a).cache;
    const auto cb = forward_cached(model, b).cache;
    per_prompt.push_back(direction_between(representation_at(ca, a.size() - 1), representation_at(cb, b.size() - 1)));
  }
  return average_directions(per_prompt);
}

}  // namespace cfp
