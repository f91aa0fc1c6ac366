#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "cfp/error.hpp"
#include "cfp/eval.hpp"
#include "cfp/fingerprint.hpp"
#include "cfp/tokenizer.hpp"

namespace cfp::cli {
namespace {

struct Context {
  const RunConfig& config;
  Model model;
  Tokenizer tokenizer;
  std::vector<ContrastivePair> pairs;
  std::vector<EncodedPair> encoded;
  TokenId bos = 0;
  std::string weights_sha256;
};

std::filesystem::path resolve_tokenizer_dir(const RunConfig& config) {
  if (!config.tokenizer_dir.empty()) return config.tokenizer_dir;
  if (std::filesystem::exists(config.model_dir / "vocab.json")) return config.model_dir;
  return std::filesystem::path(CFP_DEFAULT_TOKENIZER_DIR);
}

Tokenizer load_tokenizer(const RunConfig& config) {
  return Tokenizer::load(resolve_tokenizer_dir(config));
}

std::vector<ContrastivePair> load_dataset(const RunConfig& config, const Tokenizer& tokenizer) {
  if (config.dataset) return load_pairs(*config.dataset, tokenizer);
  if (config.generate > 0) return generate(config.task.value_or(Task::Ioi), config.generate, config.seed, tokenizer);
  throw InputError("no dataset: pass --dataset <jsonl> or --generate <n>");
}

Context load_context(const RunConfig& config) {
  if (config.model_dir.empty()) throw InputError("--model-dir is required");
  if (!std::filesystem::is_directory(config.model_dir)) {
    throw LoadError("model directory not found: " + config.model_dir.string());
  }
  const auto weights = config.model_dir / "model.safetensors";
  if (!std::filesystem::exists(weights)) throw LoadError("weights file not found: " + weights.string());

  Context ctx{config, load_model(config.model_dir), load_tokenizer(config), {}, {}, 0, sha256_file(weights)};
  const auto vocab = static_cast<std::size_t>(ctx.model.config().vocab_size);
  if (ctx.tokenizer.vocab_size() > vocab) {
    throw InputError("tokenizer has " + std::to_string(ctx.tokenizer.vocab_size()) +
                     " tokens but the model vocabulary has " + std::to_string(vocab));
  }
  ctx.bos = ctx.tokenizer.bos_id();
  ctx.pairs = load_dataset(config, ctx.tokenizer);
  if (ctx.pairs.empty()) throw DatasetError("dataset is empty");
  ctx.encoded = encode_pairs(ctx.pairs, ctx.tokenizer);
  const auto limit = static_cast<std::size_t>(ctx.model.config().max_positions);
  for (std::size_t i = 0; i < ctx.encoded.size(); ++i) {
    auto& e = ctx.encoded[i];
    if (config.prepend_bos) {
      e.clean.insert(e.clean.begin(), ctx.bos);
      e.corrupt.insert(e.corrupt.begin(), ctx.bos);
    }
    if (e.clean.size() > limit) {
      throw DatasetError("pair " + std::to_string(i) + ": " + std::to_string(e.clean.size()) +
                         " tokens exceed the model context of " + std::to_string(limit));
    }
  }
  std::filesystem::create_directories(config.out);
  return ctx;
}

nlohmann::json provenance(const Context& ctx) {
  return {{"config", ctx.config.to_json()},
          {"weights_sha256", ctx.weights_sha256},
          {"tokenizer_dir", resolve_tokenizer_dir(ctx.config).string()},
          {"n_pairs", ctx.pairs.size()}};
}

void write_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  body(out);
  if (!out) throw InputError("error writing " + path.string());
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_file(path, [&](std::ostream& out) { out << j.dump(2) << '\n'; });
}

// Runs f(i) for i in [0, n) across threads; the first failure is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f) {
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      f(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<TargetDirection> directions(const Context& ctx) {
  std::vector<TargetDirection> dirs(ctx.encoded.size());
  parallel_for(dirs.size(), [&](std::size_t i) {
    dirs[i] = target_direction(ctx.model, ctx.encoded[i].a_plus, ctx.encoded[i].a_minus, ctx.bos);
  });
  if (ctx.config.direction == DirectionMode::Averaged) {
    const TargetDirection mean = average_directions(dirs);
    std::fill(dirs.begin(), dirs.end(), mean);
  }
  return dirs;
}

ComponentScores mean_scores(const std::vector<ComponentScores>& all) {
  ComponentScores mean;
  mean.components = all.front().components;
  std::vector<double> acc(mean.components.size(), 0.0);
  for (const auto& s : all) {
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += s.values[c];
  }
  for (double v : acc) mean.values.push_back(static_cast<float>(v / static_cast<double>(all.size())));
  return mean;
}

std::vector<ComponentScores> all_node_scores(const Context& ctx, const std::vector<TargetDirection>& dirs) {
  std::vector<ComponentScores> scores(ctx.encoded.size());
  parallel_for(scores.size(), [&](std::size_t i) { scores[i] = node_scores(ctx.model, ctx.encoded[i], dirs[i]); });
  return scores;
}

EdgeGraph dataset_graph(const Context& ctx) {
  const auto dirs = directions(ctx);
  std::vector<EdgeGraph> graphs(ctx.encoded.size());
  parallel_for(graphs.size(), [&](std::size_t i) {
    graphs[i] = total_importance(ctx.model, run_pair(ctx.model, ctx.encoded[i]), dirs[i], ctx.config.alg1_mode);
  });
  return average_graphs(graphs);
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<TokenId> strip_bos(const Context& ctx, const std::vector<TokenId>& tokens) {
  if (ctx.config.prepend_bos) return {tokens.begin() + 1, tokens.end()};
  return tokens;
}

}  // namespace

std::string to_string(DirectionMode m) { return m == DirectionMode::PerPair ? "per-pair" : "averaged"; }

DirectionMode parse_direction_mode(const std::string& s) {
  if (s == "per-pair") return DirectionMode::PerPair;
  if (s == "averaged") return DirectionMode::Averaged;
  throw InputError("unknown direction mode '" + s + "' (expected per-pair or averaged)");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["model_dir"] = model_dir.string();
  j["tokenizer_dir"] = tokenizer_dir.string();
  j["task"] = task ? nlohmann::json(cfp::to_string(*task)) : nlohmann::json(nullptr);
  j["dataset"] = dataset ? nlohmann::json(dataset->string()) : nlohmann::json(nullptr);
  j["generate"] = generate;
  j["seed"] = seed;
  j["out"] = out.string();
  j["prepend_bos"] = prepend_bos;
  j["direction"] = to_string(direction);
  j["alg1_mode"] = cfp::to_string(alg1_mode);
  j["n_edges_grid"] = n_edges_grid;
  j["alphas"] = alphas;
  j["heads"] = heads;
  j["steer_mode"] = cfp::to_string(steer_mode);
  j["steer_space"] = cfp::to_string(steer_space);
  j["generations"] = generations;
  j["max_new_tokens"] = max_new_tokens;
  return j;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> md(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!md || EVP_DigestInit_ex(md.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 unavailable");
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(md.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(md.get(), digest, &len);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[digest[i] >> 4];
    s += hex[digest[i] & 15];
  }
  return s;
}

void cmd_dataset(const RunConfig& config) {
  const Tokenizer tokenizer = load_tokenizer(config);
  const auto pairs = load_dataset(config, tokenizer);
  encode_pairs(pairs, tokenizer);
  std::filesystem::create_directories(config.out);
  write_pairs(config.out / "dataset.jsonl", pairs);
}

void cmd_trace(const RunConfig& config) {
  const Context ctx = load_context(config);
  const auto dirs = directions(ctx);
  const auto scores = all_node_scores(ctx, dirs);
  const auto mean = mean_scores(scores);

  std::vector<Matrix> maps(ctx.encoded.size());
  std::vector<double> projected(ctx.encoded.size());
  parallel_for(maps.size(), [&](std::size_t i) {
    maps[i] = token_identity_map(ctx.model, ctx.encoded[i].clean, dirs[i]);
    projected[i] = projected_prompt_difference(run_pair(ctx.model, ctx.encoded[i]), dirs[i]);
  });

  nlohmann::json j = provenance(ctx);
  j["components"] = nlohmann::json::array();
  for (std::size_t c = 0; c < mean.components.size(); ++c) {
    double sd = 0.0;
    if (scores.size() > 1) {
      for (const auto& s : scores) sd += std::pow(double(s.values[c]) - double(mean.values[c]), 2);
      sd = std::sqrt(sd / static_cast<double>(scores.size() - 1));
    }
    j["components"].push_back({{"id", to_string(mean.components[c])}, {"mean_score", mean.values[c]}, {"sd", sd}});
  }
  j["embedding_score"] = mean.embedding_score();
  j["pairs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    j["pairs"].push_back({{"index", i}, {"score_total", scores[i].total()}, {"projected_difference", projected[i]}});
  }
  j["top_heads"] = nlohmann::json::array();
  for (const auto& h : top_heads(mean, 10)) j["top_heads"].push_back(to_string(h));
  write_json(config.out / "trace.json", j);

  const int n_heads = ctx.model.config().n_heads;
  write_file(config.out / "identity_maps.csv", [&](std::ostream& out) {
    out << "pair,position,token,text,layer,head,score\n";
    for (std::size_t i = 0; i < maps.size(); ++i) {
      const auto& tokens = ctx.encoded[i].clean;
      for (std::size_t p = 0; p < maps[i].rows(); ++p) {
        const TokenId t = tokens[p];
        const std::string text = csv_quote(ctx.tokenizer.decode(std::span<const TokenId>(&t, 1)));
        const auto row = maps[i].row(p);
        for (std::size_t c = 0; c < row.size(); ++c) {
          out << i << ',' << p << ',' << t << ',' << text << ',' << c / static_cast<std::size_t>(n_heads) << ','
              << c % static_cast<std::size_t>(n_heads) << ',' << row[c] << '\n';
        }
      }
    }
  });
}

void cmd_edges(const RunConfig& config) {
  const Context ctx = load_context(config);
  const EdgeGraph graph = dataset_graph(ctx);
  nlohmann::json j = provenance(ctx);
  j["graph"] = graph_to_json(graph);
  write_json(config.out / "edges.json", j);
  write_file(config.out / "edges.dot", [&](std::ostream& out) { write_dot(out, graph); });
  write_file(config.out / "shapley.csv", [&](std::ostream& out) { write_shapley_csv(out, graph); });
}

void cmd_eval(const RunConfig& config) {
  const Context ctx = load_context(config);
  const EdgeGraph graph = dataset_graph(ctx);
  const auto ranking = rank_edges(graph);
  const auto fractions = config.n_edges_grid.empty() ? log_fractions() : config.n_edges_grid;
  const auto curve = faithfulness_curve(ctx.model, ctx.encoded, ranking, fractions);
  const auto metrics = cpr_cmd(curve);
  write_file(config.out / "faithfulness.csv", [&](std::ostream& out) { write_curve_csv(out, curve); });
  nlohmann::json j = provenance(ctx);
  j["metrics"] = curve_to_json(curve, metrics);
  j["n_ranked_edges"] = ranking.size();
  write_json(config.out / "metrics.json", j);
}

void cmd_steer(const RunConfig& config) {
  const Context ctx = load_context(config);
  const int total_heads = ctx.model.config().n_layers * ctx.model.config().n_heads;
  if (config.heads < 1 || config.heads > static_cast<std::size_t>(total_heads)) {
    throw InputError("--heads must be in [1, " + std::to_string(total_heads) + "], got " +
                     std::to_string(config.heads));
  }
  const auto scores = mean_scores(all_node_scores(ctx, directions(ctx)));

  SteeringConfig sc;
  sc.heads = top_heads(scores, config.heads);
  sc.space = config.steer_space;
  sc.mode = config.steer_mode;
  sc.bos = ctx.bos;
  if (config.task) sc.prototype_tokens = answer_vocabulary(*config.task, ctx.tokenizer);
  const auto alphas = config.alphas.empty() ? default_alphas() : config.alphas;
  const auto sweep = steering_sweep(ctx.model, ctx.encoded, sc, alphas);
  write_file(config.out / "sweep.csv", [&](std::ostream& out) { write_sweep_csv(out, sweep); });

  nlohmann::json j = provenance(ctx);
  j["steering"] = sc.to_json();
  j["rows"] = nlohmann::json::array();
  for (const auto& r : sweep.rows) {
    j["rows"].push_back({{"alpha", r.alpha},
                         {"steer_p", r.steer_p.mean},
                         {"steer_ld", r.steer_ld.mean},
                         {"patch_p", r.patch_p.mean},
                         {"patch_ld", r.patch_ld.mean}});
  }
  write_json(config.out / "sweep.json", j);

  // Same prototype set as the sweep: configured tokens plus every answer.
  std::set<TokenId> tokens(sc.prototype_tokens.begin(), sc.prototype_tokens.end());
  for (const auto& p : ctx.encoded) {
    tokens.insert(p.a_plus);
    tokens.insert(p.a_minus);
  }
  std::map<TokenId, AnswerRep> reps;
  for (TokenId t : tokens) reps.emplace(t, answer_representation(ctx.model, t, ctx.bos));
  std::vector<AnswerRep> prototypes;
  for (const auto& [t, r] : reps) prototypes.push_back(r);
  const auto sites = make_sites(sc.heads, sc.space, prototypes);

  const auto alpha = static_cast<float>(alphas.back());
  const std::size_t n = std::min(config.generations, ctx.encoded.size());
  std::vector<nlohmann::json> lines(n);
  parallel_for(n, [&](std::size_t i) {
    const auto& e = ctx.encoded[i];
    const auto& source = reps.at(e.a_plus);
    const auto& target = reps.at(e.a_minus);
    const auto steered =
        generate_steered(ctx.model, e.clean, sites, source, target, sc.mode, alpha, config.max_new_tokens);
    const auto baseline =
        generate_steered(ctx.model, e.clean, sites, source, target, sc.mode, 0.0f, config.max_new_tokens);
    lines[i] = {{"prompt", ctx.pairs[i].clean},
                {"steered_text", ctx.tokenizer.decode(steered)},
                {"baseline_text", ctx.tokenizer.decode(baseline)},
                {"steered_tokens", steered},
                {"baseline_tokens", baseline},
                {"spec",
                 {{"pair", i},
                  {"alpha", alpha},
                  {"source", ctx.pairs[i].a_plus},
                  {"target", ctx.pairs[i].a_minus},
                  {"mode", cfp::to_string(sc.mode)},
                  {"space", cfp::to_string(sc.space)},
                  {"heads", sc.to_json()["heads"]},
                  {"max_new_tokens", config.max_new_tokens},
                  {"prompt_tokens", strip_bos(ctx, e.clean)}}}};
  });
  write_file(config.out / "generations.jsonl", [&](std::ostream& out) {
    // Generated tokens may end mid-character; invalid UTF-8 becomes U+FFFD and
    // the exact ids are kept alongside.
    for (const auto& l : lines) out << l.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  });
}

int run(int argc, const char* const* argv, std::ostream& err) {
  CLI::App app{"Circuit fingerprints: answer-direction circuit tracing, edge attribution and steering"};
  app.require_subcommand(1);
  RunConfig config;
  std::string task, direction = "per-pair", alg1 = "single-factor", steer_mode = "known-target", space = "head";
  std::string dataset;

  auto add_data = [&](CLI::App* sub, bool model) {
    if (model) sub->add_option("--model-dir", config.model_dir, "Directory with config.json and model.safetensors")->required();
    sub->add_option("--tokenizer-dir", config.tokenizer_dir, "Directory with vocab.json and merges.txt");
    sub->add_option("--task", task, "ioi, sva or capitals");
    auto* ds = sub->add_option("--dataset", dataset, "JSONL dataset of contrastive pairs");
    auto* gen = sub->add_option("--generate", config.generate, "Generate n pairs for --task instead of reading a file");
    ds->excludes(gen);
    sub->add_option("--seed", config.seed, "Generator seed");
    sub->add_option("--out", config.out, "Output directory");
    if (model) {
      sub->add_flag("--no-bos", [&](std::int64_t) { config.prepend_bos = false; }, "Do not prepend <|endoftext|>");
      sub->add_option("--direction", direction, "per-pair or averaged target directions");
    }
  };

  auto* ds = app.add_subcommand("dataset", "Generate or validate a dataset and write it as JSONL");
  add_data(ds, false);
  auto* trace = app.add_subcommand("trace", "Node scores and per-token identity maps");
  add_data(trace, true);
  auto* edges = app.add_subcommand("edges", "Edge attribution graph, DOT and Shapley CSV");
  add_data(edges, true);
  edges->add_option("--alg1-mode", alg1, "single-factor or literal");
  auto* eval = app.add_subcommand("eval", "Faithfulness curve and CPR/CMD of the ranked circuit");
  add_data(eval, true);
  eval->add_option("--alg1-mode", alg1, "single-factor or literal");
  eval->add_option("--n-edges-grid", config.n_edges_grid, "Circuit sizes as fractions of the ranked edges")
      ->delimiter(',');
  auto* steer = app.add_subcommand("steer", "Steering sweep against activation patching, plus steered generations");
  add_data(steer, true);
  steer->add_option("--alphas", config.alphas, "Steering strengths, ascending")->delimiter(',');
  steer->add_option("--heads", config.heads, "Number of top-scored heads to steer");
  steer->add_option("--steer-mode", steer_mode, "known-target or style");
  steer->add_option("--space", space, "head or residual");
  steer->add_option("--generations", config.generations, "Number of prompts to generate from");
  steer->add_option("--max-new-tokens", config.max_new_tokens, "Tokens per generation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream out, diag;
    const int code = app.exit(e, out, diag);
    err << out.str() << diag.str();
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (!task.empty()) config.task = parse_task(task);
    if (!dataset.empty()) config.dataset = dataset;
    config.direction = parse_direction_mode(direction);
    config.alg1_mode = parse_alg1_mode(alg1);
    config.steer_mode = parse_steering_mode(steer_mode);
    config.steer_space = parse_steering_space(space);
    if (ds->parsed()) cmd_dataset(config);
    if (trace->parsed()) cmd_trace(config);
    if (edges->parsed()) cmd_edges(config);
    if (eval->parsed()) cmd_eval(config);
    if (steer->parsed()) cmd_steer(config);
  } catch (const DatasetError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const DegenerateError& e) {
    err << "degenerate: " << e.what() << '\n';
    return kDegenerate;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kOk;
}

}  // namespace cfp::cli
