#include <omp.h>

#include <algorithm>

#include "cfp/error.hpp"
#include "cfp/kernels.hpp"
#include "cfp/model.hpp"

namespace cfp {
namespace {

struct Resolved {
  const Intervention* iv;
  std::size_t begin;  // positions [begin, end)
  std::size_t end;
};

std::string describe_site(const Intervention& iv) {
  if (iv.kind == InterventionKind::ReplaceResidual || iv.kind == InterventionKind::AddResidual) {
    return "residual layer " + std::to_string(iv.residual_layer);
  }
  return to_string(iv.component);
}

std::vector<Resolved> resolve(const ModelConfig& cfg, std::span<const Intervention> interventions,
                              std::size_t seq_len) {
  std::vector<Resolved> out;
  for (const auto& iv : interventions) {
    std::size_t width = 0;
    if (iv.kind == InterventionKind::ReplaceResidual || iv.kind == InterventionKind::AddResidual) {
      if (iv.residual_layer < 0 || iv.residual_layer > cfg.n_layers) {
        throw InputError("intervention at " + describe_site(iv) + ": layer out of range");
      }
      width = static_cast<std::size_t>(cfg.d_model);
    } else if (iv.component.is_head()) {
      if (iv.component.layer < 0 || iv.component.layer >= cfg.n_layers || iv.component.head < 0 ||
          iv.component.head >= cfg.n_heads) {
        throw InputError("intervention at " + describe_site(iv) + ": no such head");
      }
      width = static_cast<std::size_t>(cfg.d_head);
    } else if (iv.component.is_mlp()) {
      if (iv.component.layer < 0 || iv.component.layer >= cfg.n_layers) {
        throw InputError("intervention at " + describe_site(iv) + ": no such MLP");
      }
      width = static_cast<std::size_t>(cfg.d_mlp);
    } else {
      throw InputError("intervention at " + describe_site(iv) + ": native interventions need a head or MLP");
    }
    if (iv.payload.size() != width) {
      throw InputError("intervention at " + describe_site(iv) + ": payload has " + std::to_string(iv.payload.size()) +
                       " entries, site expects " + std::to_string(width));
    }
    Resolved r{&iv, 0, seq_len};
    if (iv.position) {
      const long p = *iv.position < 0 ? static_cast<long>(seq_len) + *iv.position : *iv.position;
      if (p < 0 || p >= static_cast<long>(seq_len)) {
        throw InputError("intervention at " + describe_site(iv) + ": position " + std::to_string(*iv.position) +
                         " outside sequence of length " + std::to_string(seq_len));
      }
      r.begin = static_cast<std::size_t>(p);
      r.end = r.begin + 1;
    }
    out.push_back(r);
  }
  return out;
}

void apply(const Intervention& iv, std::span<float> x) {
  const bool add = iv.kind == InterventionKind::AddNative || iv.kind == InterventionKind::AddResidual;
  if (add) {
    if (iv.scale == 0.0f || std::all_of(iv.payload.begin(), iv.payload.end(), [](float v) { return v == 0.0f; })) {
      return;
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += iv.scale * iv.payload[i];
    return;
  }
  if (iv.scale == 1.0f) {
    std::copy(iv.payload.begin(), iv.payload.end(), x.begin());
  } else if (iv.scale != 0.0f) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += iv.scale * (iv.payload[i] - x[i]);
  }
}

bool is_residual(const Intervention& iv) {
  return iv.kind == InterventionKind::ReplaceResidual || iv.kind == InterventionKind::AddResidual;
}

// Applies the interventions that target `site` (native kinds) to the rows of
// `m` they cover.
void apply_native(const std::vector<Resolved>& ivs, const ComponentId& site, Matrix& m) {
  for (const auto& r : ivs) {
    if (is_residual(*r.iv) || r.iv->component != site) continue;
    for (std::size_t t = r.begin; t < r.end; ++t) apply(*r.iv, m.row(t));
  }
}

void apply_residual(const std::vector<Resolved>& ivs, int layer, Matrix& m) {
  for (const auto& r : ivs) {
    if (!is_residual(*r.iv) || r.iv->residual_layer != layer) continue;
    for (std::size_t t = r.begin; t < r.end; ++t) apply(*r.iv, m.row(t));
  }
}

// Row-level versions for the last-position path; `pos` is that row's index.
void apply_native_row(const std::vector<Resolved>& ivs, const ComponentId& site, std::size_t pos,
                      std::span<float> row) {
  for (const auto& r : ivs) {
    if (!is_residual(*r.iv) && r.iv->component == site && pos >= r.begin && pos < r.end) apply(*r.iv, row);
  }
}

void apply_residual_row(const std::vector<Resolved>& ivs, int layer, std::size_t pos, std::span<float> row) {
  for (const auto& r : ivs) {
    if (is_residual(*r.iv) && r.iv->residual_layer == layer && pos >= r.begin && pos < r.end) apply(*r.iv, row);
  }
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_positions)) {
    throw InputError("token sequence of length " + std::to_string(tokens.size()) + " exceeds max_positions " +
                     std::to_string(cfg.max_positions));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw InputError("token id " + std::to_string(t) + " out of range");
  }
}

void embed_row(const Model& model, TokenId token, std::size_t pos, std::span<float> out) {
  const auto te = model.weights().token_embedding.row(static_cast<std::size_t>(token));
  const auto pe = model.weights().position_embedding.row(pos);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = te[i] + pe[i];
}

ForwardResult run(const Model& model, std::span<const TokenId> tokens, std::span<const Intervention> interventions) {
  const auto& cfg = model.config();
  check_tokens(cfg, tokens);
  const std::size_t seq = tokens.size();
  const auto ivs = resolve(cfg, interventions, seq);
  const auto nh = static_cast<std::size_t>(cfg.n_heads);

  ForwardResult result;
  ActivationCache& cache = result.cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.layers.resize(static_cast<std::size_t>(cfg.n_layers));

  Matrix x(seq, static_cast<std::size_t>(cfg.d_model));
  for (std::size_t t = 0; t < seq; ++t) embed_row(model, tokens[t], t, x.row(t));

  Matrix normed;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = model.layer(l);
    auto& la = cache.layers[static_cast<std::size_t>(l)];
    apply_residual(ivs, l, x);
    la.residual_pre = x;
    kernels::layer_norm(x, lw.ln1_scale, lw.ln1_bias, cfg.ln_epsilon, normed);

    la.heads.resize(nh);
#pragma omp parallel for schedule(dynamic) if (!omp_in_parallel() && nh > 1)
    for (std::size_t h = 0; h < nh; ++h) {
      auto& hd = la.heads[h];
      kernels::linear(normed, lw.W_Q[h], lw.b_Q[h], hd.q);
      kernels::linear(normed, lw.W_K[h], lw.b_K[h], hd.k);
      kernels::linear(normed, lw.W_V[h], lw.b_V[h], hd.v);
      hd.pattern = Matrix(seq, seq);
      hd.z = Matrix(seq, static_cast<std::size_t>(cfg.d_head));
      for (std::size_t t = 0; t < seq; ++t) {
        kernels::attend_row(hd.q.row(t), hd.k, hd.v, t + 1, hd.pattern.row(t), hd.z.row(t));
      }
      apply_native(ivs, ComponentId::attention_head(l, static_cast<int>(h)), hd.z);
      kernels::linear(hd.z, lw.W_O[h], {}, hd.out);
    }

    Matrix mid = x;
    for (std::size_t h = 0; h < nh; ++h) {
      for (std::size_t t = 0; t < seq; ++t) add_scaled(mid.row(t), la.heads[h].out.row(t), 1.0f);
    }
    for (std::size_t t = 0; t < seq; ++t) add_scaled(mid.row(t), lw.b_O, 1.0f);
    la.attn_bias = lw.b_O;
    la.residual_mid = mid;

    kernels::layer_norm(mid, lw.ln2_scale, lw.ln2_bias, cfg.ln_epsilon, normed);
    kernels::linear(normed, lw.W_in, lw.b_in, la.mlp_pre);
    la.mlp_hidden = la.mlp_pre;
    kernels::gelu(la.mlp_hidden.data());
    apply_native(ivs, ComponentId::mlp(l), la.mlp_hidden);
    kernels::linear(la.mlp_hidden, lw.W_out, lw.b_out, la.mlp_out);

    for (std::size_t t = 0; t < seq; ++t) add_scaled(mid.row(t), la.mlp_out.row(t), 1.0f);
    la.residual_post = mid;
    x = std::move(mid);
  }
  apply_residual(ivs, cfg.n_layers, x);
  cache.final_residual = x;

  kernels::layer_norm(x, model.weights().lnf_scale, model.weights().lnf_bias, cfg.ln_epsilon, normed);
  kernels::linear_transposed(normed, model.unembedding(), result.logits);
  return result;
}

}  // namespace

std::span<const float> ActivationCache::residual(int l, std::size_t pos) const {
  if (l == static_cast<int>(layers.size())) return final_residual.row(pos);
  return layers.at(static_cast<std::size_t>(l)).residual_pre.row(pos);
}

std::span<const float> ActivationCache::native_output(const ComponentId& id, std::size_t pos) const {
  if (id.is_head()) {
    return layers.at(static_cast<std::size_t>(id.layer)).heads.at(static_cast<std::size_t>(id.head)).z.row(pos);
  }
  if (id.is_mlp()) return layers.at(static_cast<std::size_t>(id.layer)).mlp_hidden.row(pos);
  throw InputError("component " + to_string(id) + " has no native output");
}

std::span<const float> ActivationCache::residual_output(const ComponentId& id, std::size_t pos) const {
  switch (id.kind) {
    case ComponentKind::Embedding:
      return embedding().row(pos);
    case ComponentKind::Head:
      return layers.at(static_cast<std::size_t>(id.layer)).heads.at(static_cast<std::size_t>(id.head)).out.row(pos);
    case ComponentKind::Mlp:
      return layers.at(static_cast<std::size_t>(id.layer)).mlp_out.row(pos);
    case ComponentKind::Logits:
      break;
  }
  throw InputError("component " + to_string(id) + " does not write to the residual stream");
}

Matrix forward(const Model& model, std::span<const TokenId> tokens) { return run(model, tokens, {}).logits; }

ForwardResult forward_cached(const Model& model, std::span<const TokenId> tokens) { return run(model, tokens, {}); }

ForwardResult forward_intervened(const Model& model, std::span<const TokenId> tokens,
                                 std::span<const Intervention> interventions) {
  return run(model, tokens, interventions);
}

namespace {

// ln_f output at the last position. Layers below the earliest intervened one
// cannot change, so the pass starts from the cached residual entering it.
Vec last_position_normed(const Model& model, const ActivationCache& base,
                         std::span<const Intervention> interventions) {
  const auto& cfg = model.config();
  const std::size_t seq = base.seq_len();
  check_tokens(cfg, base.tokens);
  if (base.layers.size() != static_cast<std::size_t>(cfg.n_layers)) throw InputError("cache does not match model");
  const auto ivs = resolve(cfg, interventions, seq);
  const std::size_t last = seq - 1;
  for (const auto& r : ivs) {
    if (r.begin != last || r.end != seq) {
      throw InputError("intervention at " + describe_site(*r.iv) + " does not target the last position only");
    }
  }
  const auto nh = static_cast<std::size_t>(cfg.n_heads);
  const auto dm = static_cast<std::size_t>(cfg.d_model);
  const auto dh = static_cast<std::size_t>(cfg.d_head);

  int start = cfg.n_layers;
  for (const auto& r : ivs) {
    const bool residual = r.iv->kind == InterventionKind::ReplaceResidual || r.iv->kind == InterventionKind::AddResidual;
    start = std::min(start, std::max(0, residual ? r.iv->residual_layer : r.iv->component.layer));
  }
  const auto seed = start < cfg.n_layers ? base.layers[static_cast<std::size_t>(start)].residual_pre.row(last)
                                         : base.final_residual.row(last);
  Vec x(seed.begin(), seed.end());
  Vec normed(dm);
  Vec pre(static_cast<std::size_t>(cfg.d_mlp));
  Vec mlp_out(dm);
  std::vector<Vec> head_out(nh, Vec(dm));

  for (int l = start; l < cfg.n_layers; ++l) {
    const auto& lw = model.layer(l);
    const auto& la = base.layers[static_cast<std::size_t>(l)];
    apply_residual_row(ivs, l, last, x);
    kernels::layer_norm_row(x, lw.ln1_scale, lw.ln1_bias, cfg.ln_epsilon, normed);

#pragma omp parallel for schedule(dynamic) if (!omp_in_parallel() && nh > 1)
    for (std::size_t h = 0; h < nh; ++h) {
      const auto& hd = la.heads[h];
      Vec q(dh);
      Matrix keys = hd.k;
      Matrix values = hd.v;
      kernels::linear_row(normed, lw.W_Q[h], lw.b_Q[h], q);
      kernels::linear_row(normed, lw.W_K[h], lw.b_K[h], keys.row(last));
      kernels::linear_row(normed, lw.W_V[h], lw.b_V[h], values.row(last));
      Vec weights(seq);
      Vec z(dh);
      kernels::attend_row(q, keys, values, seq, weights, z);
      apply_native_row(ivs, ComponentId::attention_head(l, static_cast<int>(h)), last, z);
      kernels::linear_row(z, lw.W_O[h], {}, head_out[h]);
    }
    for (std::size_t h = 0; h < nh; ++h) add_scaled(x, head_out[h], 1.0f);
    add_scaled(x, lw.b_O, 1.0f);

    kernels::layer_norm_row(x, lw.ln2_scale, lw.ln2_bias, cfg.ln_epsilon, normed);
    kernels::linear_row(normed, lw.W_in, lw.b_in, pre);
    kernels::gelu(pre);
    apply_native_row(ivs, ComponentId::mlp(l), last, pre);
    kernels::linear_row(pre, lw.W_out, lw.b_out, mlp_out);
    add_scaled(x, mlp_out, 1.0f);
  }
  apply_residual_row(ivs, cfg.n_layers, last, x);

  kernels::layer_norm_row(x, model.weights().lnf_scale, model.weights().lnf_bias, cfg.ln_epsilon, normed);
  return normed;
}

}  // namespace

Vec forward_last(const Model& model, const ActivationCache& base, std::span<const Intervention> interventions) {
  const Vec normed = last_position_normed(model, base, interventions);
  Vec logits(static_cast<std::size_t>(model.config().vocab_size));
  kernels::linear_transposed_row(normed, model.unembedding(), logits);
  return logits;
}

Vec forward_last_logits(const Model& model, const ActivationCache& base, std::span<const Intervention> interventions,
                        std::span<const TokenId> tokens) {
  for (TokenId t : tokens) {
    if (t < 0 || t >= model.config().vocab_size) throw InputError("token id " + std::to_string(t) + " out of range");
  }
  const Vec normed = last_position_normed(model, base, interventions);
  Vec logits(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    logits[i] = dot(normed, model.unembedding().row(static_cast<std::size_t>(tokens[i])));
  }
  return logits;
}

Vec head_coalition_output(const Model& model, int layer, int head, const ActivationCache& clean,
                          const ActivationCache& corrupt, Coalition coalition, std::size_t position) {
  const auto& cfg = model.config();
  if (clean.seq_len() != corrupt.seq_len()) {
    throw InputError("coalition caches differ in length (" + std::to_string(clean.seq_len()) + " vs " +
                     std::to_string(corrupt.seq_len()) + ")");
  }
  if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
    throw InputError("no head a" + std::to_string(layer) + ".h" + std::to_string(head));
  }
  if (position >= clean.seq_len()) throw InputError("coalition position outside sequence");
  const auto l = static_cast<std::size_t>(layer);
  const auto h = static_cast<std::size_t>(head);
  const auto& q_src = (coalition.q ? clean : corrupt).layers[l].heads[h];
  const auto& k_src = (coalition.k ? clean : corrupt).layers[l].heads[h];
  const auto& v_src = (coalition.v ? clean : corrupt).layers[l].heads[h];
  Vec weights(position + 1);
  Vec z(static_cast<std::size_t>(cfg.d_head));
  kernels::attend_row(q_src.q.row(position), k_src.k, v_src.v, position + 1, weights, z);
  return z;
}

}  // namespace cfp
