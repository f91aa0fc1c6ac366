#include "cfp/eval.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <numeric>
#include <ostream>

#include "cfp/error.hpp"
#include "cfp/kernels.hpp"

namespace cfp {
namespace {

std::vector<Channel> channels_of(const ComponentId& target) {
  if (target.is_head()) return {Channel::Q, Channel::K, Channel::V};
  return {Channel::Input};
}

std::vector<ComponentId> edge_targets(const ModelConfig& cfg) {
  std::vector<ComponentId> targets;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) targets.push_back(ComponentId::attention_head(l, h));
    targets.push_back(ComponentId::mlp(l));
  }
  targets.push_back(ComponentId::logits());
  return targets;
}

// Reads the caches of one pair and assembles channel inputs from them.
class Ablation {
 public:
  Ablation(const Model& model, const PairRun& run, const CircuitGraph& circuit)
      : model_(model),
        cfg_(model.config()),
        run_(run),
        circuit_(circuit),
        index_(cfg_),
        p_(run.last()),
        run_out_(index_.size()) {
    const auto& a = run.clean.cache.tokens;
    const auto& b = run.corrupt.cache.tokens;
    first_diff_ = static_cast<std::size_t>(std::mismatch(a.begin(), a.end(), b.begin()).first - a.begin());
  }

  Vec final_residual() {
    const auto dm = static_cast<std::size_t>(cfg_.d_model);
    const auto e = run_.clean.cache.embedding().row(p_);
    run_out_[0].assign(e.begin(), e.end());
    Vec normed(dm);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const auto& lw = model_.layer(l);
#pragma omp parallel for schedule(dynamic) if (!omp_in_parallel() && cfg_.n_heads > 1)
      for (int h = 0; h < cfg_.n_heads; ++h) head(l, h);
      const auto target = ComponentId::mlp(l);
      const Vec in = assemble(target, Channel::Input, p_, true);
      Vec pre(static_cast<std::size_t>(cfg_.d_mlp));
      kernels::layer_norm_row(in, lw.ln2_scale, lw.ln2_bias, cfg_.ln_epsilon, normed);
      kernels::linear_row(normed, lw.W_in, lw.b_in, pre);
      kernels::gelu(pre);
      Vec& out = run_out_[index_.mlp_index(l)];
      out.resize(dm);
      kernels::linear_row(pre, lw.W_out, lw.b_out, out);
    }
    return assemble(ComponentId::logits(), Channel::Input, p_, true);
  }

 private:
  std::span<const float> base_row(const ActivationCache& cache, const ComponentId& target, std::size_t t) const {
    if (target.is_head()) return cache.layers[static_cast<std::size_t>(target.layer)].residual_pre.row(t);
    if (target.is_mlp()) return cache.layers[static_cast<std::size_t>(target.layer)].residual_mid.row(t);
    return cache.final_residual.row(t);
  }

  std::size_t upstream_end(const ComponentId& target) const {
    if (target.is_head()) return index_.head_index(target.layer, 0);
    if (target.is_mlp()) return index_.mlp_index(target.layer);
    return index_.size();
  }

  // Sum of upstream outputs feeding `channel` of `target` at position t.
  // Kept sources contribute their recomputed output at the last position and
  // their clean output before it; ablated sources their corrupted output.
  // Starts from whichever cached residual (clean or corrupted) needs fewer
  // corrections, so the all-kept and none-kept cases are exact copies.
  Vec assemble(const ComponentId& target, Channel channel, std::size_t t, bool at_last) const {
    const std::size_t n_src = upstream_end(target);
    std::vector<bool> kept(n_src);
    std::size_t n_kept = 0;
    for (std::size_t s = 0; s < n_src; ++s) {
      kept[s] = circuit_.contains({index_[s], target, channel});
      n_kept += kept[s] ? 1 : 0;
    }
    const bool from_clean = 2 * n_kept >= n_src;
    const ActivationCache& base = from_clean ? run_.clean.cache : run_.corrupt.cache;
    const auto base_in = base_row(base, target, t);
    std::vector<double> acc(base_in.begin(), base_in.end());
    bool changed = false;
    for (std::size_t s = 0; s < n_src; ++s) {
      const auto& id = index_[s];
      const auto ref = base.residual_output(id, t);
      std::span<const float> value;
      if (!kept[s]) {
        if (!from_clean) continue;
        value = run_.corrupt.cache.residual_output(id, t);
      } else if (at_last) {
        value = run_out_[s];
      } else {
        if (from_clean) continue;
        value = run_.clean.cache.residual_output(id, t);
      }
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += double(value[i]) - double(ref[i]);
      changed = true;
    }
    if (!changed) return {base_in.begin(), base_in.end()};
    return {acc.begin(), acc.end()};
  }

  // Key or value rows 0..p for one head channel.
  Matrix channel_rows(int l, int h, Channel channel, std::span<const float> at_last) const {
    const auto& lw = model_.layer(l);
    const auto hi = static_cast<std::size_t>(h);
    const auto target = ComponentId::attention_head(l, h);
    const auto& w = channel == Channel::K ? lw.W_K[hi] : lw.W_V[hi];
    const auto& b = channel == Channel::K ? lw.b_K[hi] : lw.b_V[hi];
    auto cached = [&](const ActivationCache& c) -> const Matrix& {
      const auto& hd = c.layers[static_cast<std::size_t>(l)].heads[hi];
      return channel == Channel::K ? hd.k : hd.v;
    };
    Matrix rows(p_ + 1, static_cast<std::size_t>(cfg_.d_head));
    Vec normed(static_cast<std::size_t>(cfg_.d_model));
    auto project = [&](std::span<const float> in, std::size_t t) {
      kernels::layer_norm_row(in, lw.ln1_scale, lw.ln1_bias, cfg_.ln_epsilon, normed);
      kernels::linear_row(normed, w, b, rows.row(t));
    };
    for (std::size_t t = 0; t < p_; ++t) {
      if (t < first_diff_) {
        const auto src = cached(run_.clean.cache).row(t);
        std::copy(src.begin(), src.end(), rows.row(t).begin());
      } else {
        project(assemble(target, channel, t, false), t);
      }
    }
    project(at_last, p_);
    return rows;
  }

  void head(int l, int h) {
    const auto& lw = model_.layer(l);
    const auto hi = static_cast<std::size_t>(h);
    const auto target = ComponentId::attention_head(l, h);
    const auto dh = static_cast<std::size_t>(cfg_.d_head);
    Vec normed(static_cast<std::size_t>(cfg_.d_model));
    Vec q(dh);
    kernels::layer_norm_row(assemble(target, Channel::Q, p_, true), lw.ln1_scale, lw.ln1_bias, cfg_.ln_epsilon,
                            normed);
    kernels::linear_row(normed, lw.W_Q[hi], lw.b_Q[hi], q);
    const Matrix keys = channel_rows(l, h, Channel::K, assemble(target, Channel::K, p_, true));
    const Matrix values = channel_rows(l, h, Channel::V, assemble(target, Channel::V, p_, true));
    Vec weights(p_ + 1);
    Vec z(dh);
    kernels::attend_row(q, keys, values, p_ + 1, weights, z);
    Vec& out = run_out_[index_.head_index(l, h)];
    out.resize(static_cast<std::size_t>(cfg_.d_model));
    kernels::linear_row(z, lw.W_O[hi], {}, out);
  }

  const Model& model_;
  const ModelConfig& cfg_;
  const PairRun& run_;
  const CircuitGraph& circuit_;
  ComponentIndex index_;
  std::size_t p_;
  std::size_t first_diff_ = 0;
  std::vector<Vec> run_out_;
};

double mean(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

Intervention patch_for(const ComponentId& id, const ActivationCache& corrupt, std::size_t last) {
  Intervention iv;
  iv.position = static_cast<int>(last);
  if (id.kind == ComponentKind::Embedding) {
    iv.kind = InterventionKind::ReplaceResidual;
    iv.residual_layer = 0;
    const auto row = corrupt.embedding().row(last);
    iv.payload.assign(row.begin(), row.end());
  } else {
    iv.kind = InterventionKind::ReplaceNative;
    iv.component = id;
    const auto row = corrupt.native_output(id, last);
    iv.payload.assign(row.begin(), row.end());
  }
  return iv;
}

void check_pair(const Model& model, const EncodedPair& pair) {
  const int vocab = model.config().vocab_size;
  for (TokenId t : {pair.a_plus, pair.a_minus}) {
    if (t < 0 || t >= vocab) throw InputError("answer token " + std::to_string(t) + " outside vocabulary");
  }
}

}  // namespace

double metric_from_residual(const Model& model, std::span<const float> final_residual, TokenId a_plus,
                            TokenId a_minus) {
  const auto& cfg = model.config();
  if (a_plus < 0 || a_plus >= cfg.vocab_size || a_minus < 0 || a_minus >= cfg.vocab_size) {
    throw InputError("answer token outside vocabulary");
  }
  Vec normed(static_cast<std::size_t>(cfg.d_model));
  kernels::layer_norm_row(final_residual, model.weights().lnf_scale, model.weights().lnf_bias, cfg.ln_epsilon, normed);
  if (a_plus == a_minus) return 0.0;
  const auto& u = model.unembedding();
  return double(dot(normed, u.row(static_cast<std::size_t>(a_plus)))) -
         double(dot(normed, u.row(static_cast<std::size_t>(a_minus))));
}

double logit_diff(const Model& model, std::span<const TokenId> tokens, TokenId a_plus, TokenId a_minus) {
  const auto cache = forward_cached(model, tokens).cache;
  return metric_from_residual(model, cache.final_residual.row(tokens.size() - 1), a_plus, a_minus);
}

double logit_diff(const Model& model, const EncodedPair& pair) {
  return logit_diff(model, pair.clean, pair.a_plus, pair.a_minus);
}

CircuitGraph full_circuit(const ModelConfig& config) {
  const ComponentIndex index(config);
  CircuitGraph c;
  for (const auto& target : edge_targets(config)) {
    for (Channel ch : channels_of(target)) {
      for (const auto& src : index.upstream_of(target)) c.edges.insert({src, target, ch});
    }
  }
  c.nodes.insert(index.ids().begin(), index.ids().end());
  c.nodes.insert(ComponentId::logits());
  return c;
}

void validate_circuit(const ModelConfig& config, const CircuitGraph& circuit) {
  const ComponentIndex index(config);
  auto bad = [](const EdgeKey& k, const std::string& why) {
    return InputError("edge " + to_string(k.source) + " -> " + to_string(k.target) + " [" + to_string(k.channel) +
                      "] " + why);
  };
  for (const auto& k : circuit.edges) {
    const auto& t = k.target;
    const bool target_ok = t.kind == ComponentKind::Logits ||
                           (t.is_head() && t.layer >= 0 && t.layer < config.n_layers && t.head >= 0 &&
                            t.head < config.n_heads) ||
                           (t.is_mlp() && t.layer >= 0 && t.layer < config.n_layers);
    if (!target_ok) throw bad(k, "has no valid target");
    const auto channels = channels_of(t);
    if (std::find(channels.begin(), channels.end(), k.channel) == channels.end()) {
      throw bad(k, "uses a channel the target does not have");
    }
    const auto up = index.upstream_of(t);
    if (std::find(up.begin(), up.end(), k.source) == up.end()) throw bad(k, "does not connect upstream to target");
  }
}

Vec ablated_final_residual(const Model& model, const PairRun& run, const CircuitGraph& circuit) {
  if (run.clean.cache.seq_len() != run.corrupt.cache.seq_len()) {
    throw InputError("clean and corrupted runs differ in length");
  }
  return Ablation(model, run, circuit).final_residual();
}

double run_ablated(const Model& model, const PairRun& run, TokenId a_plus, TokenId a_minus,
                   const CircuitGraph& circuit) {
  return metric_from_residual(model, ablated_final_residual(model, run, circuit), a_plus, a_minus);
}

double run_ablated(const Model& model, const EncodedPair& pair, const CircuitGraph& circuit) {
  validate_circuit(model.config(), circuit);
  return run_ablated(model, run_pair(model, pair), pair.a_plus, pair.a_minus, circuit);
}

std::vector<double> log_fractions(std::size_t count, double lo, double hi) {
  if (count < 2 || !(lo > 0.0) || !(hi > lo) || hi > 1.0) {
    throw InputError("log_fractions needs count >= 2 and 0 < lo < hi <= 1");
  }
  std::vector<double> f(count);
  const double a = std::log(lo), b = std::log(hi);
  for (std::size_t i = 0; i < count; ++i) {
    f[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
  }
  f.front() = lo;
  f.back() = hi;
  return f;
}

FaithfulnessCurve faithfulness_curve(const Model& model, std::span<const EncodedPair> pairs,
                                     std::span<const Edge> ranking, std::span<const double> fractions) {
  if (fractions.empty()) throw InputError("faithfulness curve needs at least one fraction");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] <= 1.0) || (i > 0 && !(fractions[i] > fractions[i - 1]))) {
      throw InputError("fractions must be strictly increasing in (0, 1]");
    }
  }
  const std::size_t n_points = fractions.size();
  std::vector<std::size_t> sizes(n_points);
  std::vector<CircuitGraph> circuits(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    sizes[i] = static_cast<std::size_t>(std::llround(fractions[i] * static_cast<double>(ranking.size())));
    circuits[i] = circuit_from_ranking(ranking, sizes[i]);
  }
  validate_circuit(model.config(), circuit_from_ranking(ranking, ranking.size()));

  struct PairResult {
    double clean = 0.0, corrupt = 0.0;
    std::vector<double> circuit;
  };
  std::vector<PairResult> results(pairs.size());
  std::vector<std::exception_ptr> errors(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      check_pair(model, pairs[i]);
      const PairRun run = run_pair(model, pairs[i]);
      auto& r = results[i];
      const std::size_t p = run.last();
      r.clean = metric_from_residual(model, run.clean.cache.final_residual.row(p), pairs[i].a_plus, pairs[i].a_minus);
      r.corrupt =
          metric_from_residual(model, run.corrupt.cache.final_residual.row(p), pairs[i].a_plus, pairs[i].a_minus);
      if (std::abs(r.clean - r.corrupt) < kMinMetricGap) continue;
      for (const auto& c : circuits) r.circuit.push_back(run_ablated(model, run, pairs[i].a_plus, pairs[i].a_minus, c));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  FaithfulnessCurve curve;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& r = results[i];
    if (r.circuit.empty()) {
      curve.skipped.push_back(i);
      continue;
    }
    curve.evaluated.push_back(i);
    std::vector<double> f(n_points);
    for (std::size_t k = 0; k < n_points; ++k) f[k] = (r.circuit[k] - r.corrupt) / (r.clean - r.corrupt);
    curve.per_pair_f.push_back(std::move(f));
  }
  for (std::size_t k = 0; k < n_points; ++k) {
    FaithfulnessPoint pt;
    pt.fraction = fractions[k];
    pt.n_edges = sizes[k];
    std::vector<double> f, mc, mk, mx;
    for (std::size_t j = 0; j < curve.evaluated.size(); ++j) {
      const auto& r = results[curve.evaluated[j]];
      f.push_back(curve.per_pair_f[j][k]);
      mc.push_back(r.clean);
      mk.push_back(r.corrupt);
      mx.push_back(r.circuit[k]);
    }
    pt.f = mean(f);
    double ss = 0.0;
    for (double v : f) ss += (v - pt.f) * (v - pt.f);
    pt.f_sd = f.size() > 1 ? std::sqrt(ss / static_cast<double>(f.size() - 1)) : 0.0;
    pt.m_clean = mean(mc);
    pt.m_corrupt = mean(mk);
    pt.m_circuit = mean(mx);
    curve.points.push_back(pt);
  }
  return curve;
}

CircuitMetrics cpr_cmd(const FaithfulnessCurve& curve) {
  const auto& pts = curve.points;
  if (pts.size() < 2) throw InputError("CPR/CMD need at least two curve points");
  double cpr = 0.0, cmd = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double w = std::log(pts[i].fraction) - std::log(pts[i - 1].fraction);
    cpr += 0.5 * w * (pts[i].f + pts[i - 1].f);
    cmd += 0.5 * w * (std::abs(1.0 - pts[i].f) + std::abs(1.0 - pts[i - 1].f));
  }
  const double span = std::log(pts.back().fraction) - std::log(pts.front().fraction);
  return {cpr / span, cmd / span};
}

std::vector<double> activation_patching_scores(const Model& model, const EncodedPair& pair,
                                               std::span<const ComponentId> components) {
  check_pair(model, pair);
  const PairRun run = run_pair(model, pair);
  const std::size_t last = run.last();
  std::vector<Intervention> patches;
  for (const auto& id : components) patches.push_back(patch_for(id, run.corrupt.cache, last));
  const std::array<TokenId, 2> answers{pair.a_plus, pair.a_minus};
  const Vec base = forward_last_logits(model, run.clean.cache, {}, answers);
  const double clean = double(base[0]) - double(base[1]);

  std::vector<double> scores(components.size());
  std::vector<std::exception_ptr> errors(components.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < components.size(); ++i) {
    try {
      const Vec logits =
          forward_last_logits(model, run.clean.cache, std::span<const Intervention>(&patches[i], 1), answers);
      scores[i] = clean - (double(logits[0]) - double(logits[1]));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return scores;
}

double patched_logit_diff(const Model& model, const EncodedPair& pair, std::span<const ComponentId> components) {
  check_pair(model, pair);
  const PairRun run = run_pair(model, pair);
  std::vector<Intervention> patches;
  for (const auto& id : components) patches.push_back(patch_for(id, run.corrupt.cache, run.last()));
  const std::array<TokenId, 2> answers{pair.a_plus, pair.a_minus};
  const Vec logits = forward_last_logits(model, run.clean.cache, patches, answers);
  return double(logits[0]) - double(logits[1]);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw InputError("spearman needs two equal-length series of size >= 2");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double ma = mean(ra), mb = mean(rb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

void write_curve_csv(std::ostream& out, const FaithfulnessCurve& curve) {
  out << "fraction,n_edges,f,f_sd,m_clean,m_corrupt,m_circuit\n";
  out.precision(10);
  for (const auto& p : curve.points) {
    out << p.fraction << ',' << p.n_edges << ',' << p.f << ',' << p.f_sd << ',' << p.m_clean << ',' << p.m_corrupt
        << ',' << p.m_circuit << '\n';
  }
}

nlohmann::json curve_to_json(const FaithfulnessCurve& curve, const CircuitMetrics& metrics) {
  nlohmann::json j;
  j["cpr"] = metrics.cpr;
  j["cmd"] = metrics.cmd;
  j["n_evaluated"] = curve.evaluated.size();
  j["n_skipped"] = curve.skipped.size();
  j["skipped_pairs"] = curve.skipped;
  j["min_metric_gap"] = kMinMetricGap;
  auto& pts = j["points"] = nlohmann::json::array();
  for (const auto& p : curve.points) {
    pts.push_back({{"fraction", p.fraction},
                   {"n_edges", p.n_edges},
                   {"f", p.f},
                   {"f_sd", p.f_sd},
                   {"m_clean", p.m_clean},
                   {"m_corrupt", p.m_corrupt},
                   {"m_circuit", p.m_circuit}});
  }
  return j;
}

}  // namespace cfp
