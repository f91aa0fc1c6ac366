#include "cfp/steering.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <ostream>
#include <set>

#include <Eigen/SVD>

#include "cfp/error.hpp"

namespace cfp {
namespace {

void require_same_size(std::span<const float> a, std::span<const float> b, const char* what) {
  if (a.size() != b.size()) {
    throw InputError(std::string(what) + ": sizes " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                     " differ");
  }
}

Vec unit(std::span<const float> v, const char* name) {
  const float n = norm(v);
  if (!(n > 0.0f)) throw DegenerateError(std::string(name) + " has zero norm");
  return scaled(v, 1.0f / n);
}

bool same(std::span<const float> a, std::span<const float> b) { return std::equal(a.begin(), a.end(), b.begin(), b.end()); }

SweepStat stat(const std::vector<std::vector<double>>& v, std::size_t k) {
  SweepStat s;
  if (v.empty()) return s;
  for (const auto& row : v) s.mean += row[k];
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (const auto& row : v) ss += (row[k] - s.mean) * (row[k] - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

// Softmax probability of `token` and logit(a) − logit(b), in double.
std::pair<double, double> readout(const Vec& logits, TokenId a, TokenId b) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (float l : logits) z += std::exp(double(l) - mx);
  const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
  return {std::exp(double(logits[ia]) - mx) / z, double(logits[ia]) - double(logits[ib])};
}

}  // namespace

SteeringBasis build_basis(std::span<const Vec> reps) {
  if (reps.size() < 2) throw InputError("a steering basis needs at least two representations");
  const std::size_t k = reps.size(), d = reps.front().size();
  for (const auto& r : reps) {
    if (r.size() != d) throw InputError("steering representations differ in size");
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = reps[i][j];
  }
  const Eigen::RowVectorXd mu = m.colwise().mean();
  m.rowwise() -= mu;

  SteeringBasis b;
  b.mean.resize(d);
  for (std::size_t j = 0; j < d; ++j) b.mean[j] = static_cast<float>(mu(static_cast<Eigen::Index>(j)));

  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinV);
  const Eigen::VectorXd s = svd.singularValues();
  const double total = s.squaredNorm();
  if (!(total > 0.0) || s(0) <= 1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff())) {
    throw DegenerateError("steering representations are all identical");
  }
  double covered = 0.0;
  const auto cap = static_cast<Eigen::Index>(std::min(k - 1, d));
  for (Eigen::Index i = 0; i < cap; ++i) {
    if (s(i) <= 1e-6 * s(0)) break;
    Vec u(d);
    for (std::size_t j = 0; j < d; ++j) u[j] = static_cast<float>(svd.matrixV()(static_cast<Eigen::Index>(j), i));
    b.basis.push_back(std::move(u));
    covered += s(i) * s(i);
    if (covered >= kBasisVariance * total) break;
  }
  return b;
}

Vec project_prototype(const SteeringBasis& basis, std::span<const float> rep) {
  require_same_size(rep, basis.mean, "project_prototype");
  std::vector<double> centered(rep.size());
  for (std::size_t j = 0; j < rep.size(); ++j) centered[j] = double(rep[j]) - double(basis.mean[j]);
  std::vector<double> d(rep.size(), 0.0);
  for (const auto& u : basis.basis) {
    double c = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j) c += centered[j] * u[j];
    for (std::size_t j = 0; j < u.size(); ++j) d[j] += c * u[j];
  }
  return {d.begin(), d.end()};
}

Vec known_target_shift(std::span<const float> d_s, std::span<const float> d_t) {
  require_same_size(d_s, d_t, "steering directions");
  if (same(d_s, d_t)) return Vec(d_s.size(), 0.0f);
  const Vec us = unit(d_s, "source direction"), ut = unit(d_t, "target direction");
  const float gap = norm(subtract(d_s, d_t));
  Vec shift(d_s.size());
  for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = gap * ut[i] - gap * us[i];
  return shift;
}

Vec steer_known_target(std::span<const float> x, std::span<const float> d_s, std::span<const float> d_t, float alpha) {
  require_same_size(x, d_s, "steering input");
  Vec out(x.begin(), x.end());
  if (alpha == 0.0f) return out;
  add_scaled(out, known_target_shift(d_s, d_t), alpha);
  return out;
}

Vec style_shift(std::span<const float> d_s, std::span<const float> d_t) {
  require_same_size(d_s, d_t, "steering directions");
  const Vec us = unit(d_s, "source direction"), ut = unit(d_t, "target direction");
  const float mag = norm(d_s);
  Vec shift(d_s.size());
  for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = mag * (ut[i] - us[i]);
  return shift;
}

Vec steer_style(std::span<const float> x, std::span<const float> d_s, std::span<const float> d_t) {
  require_same_size(x, d_s, "steering input");
  Vec out(x.begin(), x.end());
  add_scaled(out, style_shift(d_s, d_t), 1.0f);
  return out;
}

std::string to_string(SteeringMode m) { return m == SteeringMode::KnownTarget ? "known-target" : "style"; }

SteeringMode parse_steering_mode(const std::string& s) {
  if (s == "known-target") return SteeringMode::KnownTarget;
  if (s == "style") return SteeringMode::Style;
  throw InputError("unknown steering mode '" + s + "' (expected known-target or style)");
}

std::string to_string(SteeringSpace s) { return s == SteeringSpace::HeadNative ? "head" : "residual"; }

SteeringSpace parse_steering_space(const std::string& s) {
  if (s == "head") return SteeringSpace::HeadNative;
  if (s == "residual") return SteeringSpace::Residual;
  throw InputError("unknown steering space '" + s + "' (expected head or residual)");
}

std::span<const float> SteeringSite::vector_of(const AnswerRep& rep) const {
  const auto l = static_cast<std::size_t>(head.layer);
  if (space == SteeringSpace::Residual) return rep.residual.at(l);
  return rep.z.at(l).at(static_cast<std::size_t>(head.head));
}

std::vector<SteeringSite> make_sites(std::span<const ComponentId> heads, SteeringSpace space,
                                     std::span<const AnswerRep> prototypes) {
  if (heads.empty()) throw InputError("steering needs at least one site");
  std::vector<SteeringSite> sites;
  std::set<int> layers;
  for (const auto& h : heads) {
    if (!h.is_head()) throw InputError("steering site " + to_string(h) + " is not an attention head");
    if (space == SteeringSpace::Residual && !layers.insert(h.layer).second) continue;
    SteeringSite site{h, space, {}};
    std::vector<Vec> reps;
    for (const auto& p : prototypes) {
      if (static_cast<std::size_t>(h.layer) >= p.z.size() ||
          static_cast<std::size_t>(h.head) >= p.z[static_cast<std::size_t>(h.layer)].size()) {
        throw InputError("steering site " + to_string(h) + " is outside the model");
      }
      const auto v = site.vector_of(p);
      reps.emplace_back(v.begin(), v.end());
    }
    site.basis = build_basis(reps);
    sites.push_back(std::move(site));
  }
  return sites;
}

std::vector<ComponentId> top_heads(const ComponentScores& scores, std::size_t n) {
  std::vector<std::pair<float, ComponentId>> heads;
  for (std::size_t i = 0; i < scores.components.size(); ++i) {
    if (scores.components[i].is_head()) heads.emplace_back(std::abs(scores.values[i]), scores.components[i]);
  }
  std::stable_sort(heads.begin(), heads.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<ComponentId> out;
  for (std::size_t i = 0; i < std::min(n, heads.size()); ++i) out.push_back(heads[i].second);
  return out;
}

std::vector<Intervention> steering_interventions(std::span<const SteeringSite> sites, const AnswerRep& source,
                                                 const AnswerRep& target, SteeringMode mode, float alpha) {
  if (!(alpha >= 0.0f)) throw InputError("steering strength must be non-negative");
  std::vector<Intervention> ivs;
  if (alpha == 0.0f) return ivs;
  for (const auto& site : sites) {
    const Vec d_s = project_prototype(site.basis, site.vector_of(source));
    const Vec d_t = project_prototype(site.basis, site.vector_of(target));
    Vec shift = mode == SteeringMode::KnownTarget ? known_target_shift(d_s, d_t) : style_shift(d_s, d_t);
    if (std::all_of(shift.begin(), shift.end(), [](float x) { return x == 0.0f; })) continue;
    Intervention iv;
    iv.position = -1;
    iv.payload = std::move(shift);
    iv.scale = alpha;
    if (site.space == SteeringSpace::Residual) {
      iv.kind = InterventionKind::AddResidual;
      iv.residual_layer = site.head.layer;
    } else {
      iv.kind = InterventionKind::AddNative;
      iv.component = site.head;
    }
    ivs.push_back(std::move(iv));
  }
  return ivs;
}

std::vector<Intervention> patching_interventions(std::span<const SteeringSite> sites, const ActivationCache& corrupt,
                                                 float alpha) {
  if (!(alpha >= 0.0f)) throw InputError("patching strength must be non-negative");
  std::vector<Intervention> ivs;
  if (alpha == 0.0f) return ivs;
  const std::size_t last = corrupt.seq_len() - 1;
  for (const auto& site : sites) {
    Intervention iv;
    iv.position = -1;
    iv.scale = alpha;
    std::span<const float> v;
    if (site.space == SteeringSpace::Residual) {
      iv.kind = InterventionKind::ReplaceResidual;
      iv.residual_layer = site.head.layer;
      v = corrupt.residual(site.head.layer, last);
    } else {
      iv.kind = InterventionKind::ReplaceNative;
      iv.component = site.head;
      v = corrupt.native_output(site.head, last);
    }
    iv.payload.assign(v.begin(), v.end());
    ivs.push_back(std::move(iv));
  }
  return ivs;
}

nlohmann::json SteeringConfig::to_json() const {
  nlohmann::json j;
  j["heads"] = nlohmann::json::array();
  for (const auto& h : heads) j["heads"].push_back(to_string(h));
  j["space"] = to_string(space);
  j["mode"] = to_string(mode);
  j["prototype_tokens"] = prototype_tokens;
  j["bos"] = bos;
  return j;
}

std::vector<double> default_alphas() {
  std::vector<double> a(11);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<double>(i) / 10.0;
  return a;
}

SweepResult steering_sweep(const Model& model, std::span<const EncodedPair> pairs, const SteeringConfig& config,
                           std::span<const double> alphas) {
  if (alphas.empty()) throw InputError("steering sweep needs at least one strength");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] >= 0.0) || (i > 0 && alphas[i] < alphas[i - 1])) {
      throw InputError("steering strengths must be non-negative and ascending");
    }
  }
  std::set<TokenId> tokens(config.prototype_tokens.begin(), config.prototype_tokens.end());
  for (const auto& p : pairs) {
    tokens.insert(p.a_plus);
    tokens.insert(p.a_minus);
  }
  std::map<TokenId, AnswerRep> reps;
  for (TokenId t : tokens) reps.emplace(t, answer_representation(model, t, config.bos));
  std::vector<AnswerRep> prototypes;
  for (const auto& [t, r] : reps) prototypes.push_back(r);
  const auto sites = make_sites(config.heads, config.space, prototypes);

  const std::size_t na = alphas.size();
  SweepResult result;
  for (auto* v : {&result.steer_p, &result.steer_ld, &result.patch_p, &result.patch_ld}) {
    v->assign(pairs.size(), std::vector<double>(na));
  }
  std::vector<std::exception_ptr> errors(pairs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      const auto& pair = pairs[i];
      const PairRun run = run_pair(model, pair);
      const auto& source = reps.at(pair.a_plus);
      const auto& target = reps.at(pair.a_minus);
      for (std::size_t k = 0; k < na; ++k) {
        const auto alpha = static_cast<float>(alphas[k]);
        const auto steer = steering_interventions(sites, source, target, config.mode, alpha);
        const auto [sp, sl] = readout(forward_last(model, run.clean.cache, steer), pair.a_plus, pair.a_minus);
        const auto patch = patching_interventions(sites, run.corrupt.cache, alpha);
        const auto [pp, pl] = readout(forward_last(model, run.clean.cache, patch), pair.a_plus, pair.a_minus);
        result.steer_p[i][k] = sp;
        result.steer_ld[i][k] = sl;
        result.patch_p[i][k] = pp;
        result.patch_ld[i][k] = pl;
      }
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t k = 0; k < na; ++k) {
    result.rows.push_back({alphas[k], stat(result.steer_p, k), stat(result.steer_ld, k), stat(result.patch_p, k),
                           stat(result.patch_ld, k)});
  }
  return result;
}

std::vector<TokenId> generate_steered(const Model& model, std::span<const TokenId> prompt,
                                      std::span<const SteeringSite> sites, const AnswerRep& source,
                                      const AnswerRep& target, SteeringMode mode, float alpha,
                                      std::size_t max_new_tokens) {
  if (max_new_tokens < 1) throw InputError("generation needs max_new_tokens >= 1");
  if (prompt.empty()) throw InputError("generation needs a non-empty prompt");
  const auto limit = static_cast<std::size_t>(model.config().max_positions);
  if (prompt.size() + max_new_tokens - 1 > limit) {
    throw InputError("prompt of " + std::to_string(prompt.size()) + " tokens plus " + std::to_string(max_new_tokens) +
                     " new tokens exceeds the context of " + std::to_string(limit));
  }
  const auto ivs = steering_interventions(sites, source, target, mode, alpha);
  std::vector<TokenId> tokens(prompt.begin(), prompt.end());
  std::vector<TokenId> generated;
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    const auto cache = forward_cached(model, tokens).cache;
    const Vec logits = forward_last(model, cache, ivs);
    const auto next = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    generated.push_back(next);
    tokens.push_back(next);
  }
  return generated;
}

void write_sweep_csv(std::ostream& out, const SweepResult& result) {
  out << "alpha,steer_p_mean,steer_p_sd,steer_ld_mean,steer_ld_sd,patch_p_mean,patch_p_sd,patch_ld_mean,patch_ld_sd\n";
  out.precision(10);
  for (const auto& r : result.rows) {
    out << r.alpha << ',' << r.steer_p.mean << ',' << r.steer_p.sd << ',' << r.steer_ld.mean << ',' << r.steer_ld.sd
        << ',' << r.patch_p.mean << ',' << r.patch_p.sd << ',' << r.patch_ld.mean << ',' << r.patch_ld.sd << '\n';
  }
}

}  // namespace cfp
