#include <cmath>
#include <fstream>
#include <random>
#include <type_traits>
#include <sstream>

#include "cfp/error.hpp"
#include "cfp/model.hpp"
#include "cfp/safetensors.hpp"

namespace cfp {
namespace {

using Shape = std::vector<std::int64_t>;

std::string shape_string(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? ", " : "") << s[i];
  out << ']';
  return out.str();
}

template <typename T>
T field(const nlohmann::json& j, std::initializer_list<const char*> names, std::optional<T> fallback = {}) {
  for (const char* n : names) {
    if (j.contains(n) && !j.at(n).is_null()) return j.at(n).get<T>();
  }
  if (fallback) return *fallback;
  throw LoadError(std::string("config is missing field '") + *names.begin() + "'");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

// Looks tensors up by their canonical name, tolerating a "transformer."
// prefix as written by Hugging Face exports.
class TensorSource {
 public:
  explicit TensorSource(const safetensors::Archive& archive) : archive_(archive) {}

  bool has(const std::string& name) const {
    return archive_.contains(name) || archive_.contains("transformer." + name);
  }

  std::vector<float> get(const std::string& name, const Shape& expected) const {
    const std::string key = archive_.contains(name) ? name : "transformer." + name;
    if (!archive_.contains(key)) throw LoadError("missing tensor '" + name + "'");
    const auto& info = archive_.info(key);
    if (info.shape != expected) {
      throw LoadError("tensor '" + name + "': expected shape " + shape_string(expected) + ", got " +
                      shape_string(info.shape));
    }
    return archive_.to_f32(key);
  }

  Matrix matrix(const std::string& name, std::int64_t rows, std::int64_t cols) const {
    return Matrix(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols), get(name, {rows, cols}));
  }

  Vec vec(const std::string& name, std::int64_t n) const { return get(name, {n}); }

 private:
  const safetensors::Archive& archive_;
};

// Splits a [n_heads, rows, cols] block into per-head matrices.
std::vector<Matrix> split_heads(const std::vector<float>& data, int n_heads, int rows, int cols) {
  std::vector<Matrix> out;
  const std::size_t per = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  for (int h = 0; h < n_heads; ++h) {
    auto first = data.begin() + static_cast<std::ptrdiff_t>(per * static_cast<std::size_t>(h));
    out.emplace_back(rows, cols, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(per)));
  }
  return out;
}

std::vector<Vec> split_vectors(const std::vector<float>& data, int n, int width) {
  std::vector<Vec> out;
  for (int h = 0; h < n; ++h) {
    auto first = data.begin() + static_cast<std::ptrdiff_t>(h * width);
    out.emplace_back(first, first + width);
  }
  return out;
}

// Hugging Face GPT-2 stores c_attn as d_model×(3·d_model) acting on row
// vectors, with columns ordered [Q | K | V] and heads contiguous inside each.
void split_fused_attention(const Matrix& c_attn, const Vec& c_attn_bias, const Matrix& c_proj,
                           const ModelConfig& cfg, LayerWeights& lw) {
  const int dm = cfg.d_model;
  const int dh = cfg.d_head;
  std::vector<Matrix>* targets[3] = {&lw.W_Q, &lw.W_K, &lw.W_V};
  std::vector<Vec>* biases[3] = {&lw.b_Q, &lw.b_K, &lw.b_V};
  for (int part = 0; part < 3; ++part) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      Matrix w(static_cast<std::size_t>(dm), static_cast<std::size_t>(dh));
      Vec b(static_cast<std::size_t>(dh));
      const int col0 = part * dm + h * dh;
      for (int i = 0; i < dm; ++i) {
        for (int j = 0; j < dh; ++j) w(i, j) = c_attn(i, col0 + j);
      }
      for (int j = 0; j < dh; ++j) b[j] = c_attn_bias[col0 + j];
      targets[part]->push_back(std::move(w));
      biases[part]->push_back(std::move(b));
    }
  }
  for (int h = 0; h < cfg.n_heads; ++h) {
    Matrix w(static_cast<std::size_t>(dh), static_cast<std::size_t>(dm));
    for (int j = 0; j < dh; ++j) {
      for (int o = 0; o < dm; ++o) w(j, o) = c_proj(h * dh + j, o);
    }
    lw.W_O.push_back(std::move(w));
  }
}

WeightSet read_weights(const safetensors::Archive& archive, const ModelConfig& cfg) {
  const TensorSource src(archive);
  const std::int64_t dm = cfg.d_model, dh = cfg.d_head, nh = cfg.n_heads, dmlp = cfg.d_mlp;
  WeightSet ws;
  ws.token_embedding = src.matrix("wte.weight", cfg.vocab_size, dm);
  ws.position_embedding = src.matrix("wpe.weight", cfg.max_positions, dm);
  const bool fused = src.has("h.0.attn.c_attn.weight");
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln1_scale = src.vec(p + "ln_1.weight", dm);
    lw.ln1_bias = src.vec(p + "ln_1.bias", dm);
    lw.ln2_scale = src.vec(p + "ln_2.weight", dm);
    lw.ln2_bias = src.vec(p + "ln_2.bias", dm);
    if (fused) {
      split_fused_attention(src.matrix(p + "attn.c_attn.weight", dm, 3 * dm), src.vec(p + "attn.c_attn.bias", 3 * dm),
                            src.matrix(p + "attn.c_proj.weight", dm, dm), cfg, lw);
      lw.b_O = src.vec(p + "attn.c_proj.bias", dm);
      lw.W_in = src.matrix(p + "mlp.c_fc.weight", dm, dmlp);
      lw.b_in = src.vec(p + "mlp.c_fc.bias", dmlp);
      lw.W_out = src.matrix(p + "mlp.c_proj.weight", dmlp, dm);
      lw.b_out = src.vec(p + "mlp.c_proj.bias", dm);
    } else {
      lw.W_Q = split_heads(src.get(p + "attn.W_Q", {nh, dm, dh}), cfg.n_heads, cfg.d_model, cfg.d_head);
      lw.W_K = split_heads(src.get(p + "attn.W_K", {nh, dm, dh}), cfg.n_heads, cfg.d_model, cfg.d_head);
      lw.W_V = split_heads(src.get(p + "attn.W_V", {nh, dm, dh}), cfg.n_heads, cfg.d_model, cfg.d_head);
      lw.b_Q = split_vectors(src.get(p + "attn.b_Q", {nh, dh}), cfg.n_heads, cfg.d_head);
      lw.b_K = split_vectors(src.get(p + "attn.b_K", {nh, dh}), cfg.n_heads, cfg.d_head);
      lw.b_V = split_vectors(src.get(p + "attn.b_V", {nh, dh}), cfg.n_heads, cfg.d_head);
      lw.W_O = split_heads(src.get(p + "attn.W_O", {nh, dh, dm}), cfg.n_heads, cfg.d_head, cfg.d_model);
      lw.b_O = src.vec(p + "attn.b_O", dm);
      lw.W_in = src.matrix(p + "mlp.W_in", dm, dmlp);
      lw.b_in = src.vec(p + "mlp.b_in", dmlp);
      lw.W_out = src.matrix(p + "mlp.W_out", dmlp, dm);
      lw.b_out = src.vec(p + "mlp.b_out", dm);
    }
    ws.layers.push_back(std::move(lw));
  }
  ws.lnf_scale = src.vec("ln_f.weight", dm);
  ws.lnf_bias = src.vec("ln_f.bias", dm);
  if (src.has("lm_head.weight")) ws.unembedding = src.matrix("lm_head.weight", cfg.vocab_size, dm);
  return ws;
}

void check_manifest(const std::filesystem::path& manifest_path, const safetensors::Archive& archive) {
  const auto manifest = read_json(manifest_path);
  if (!manifest.contains("tensors")) throw LoadError(manifest_path.string() + ": no 'tensors' list");
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    if (!archive.contains(name)) throw LoadError("missing tensor '" + name + "' (listed in manifest)");
    const auto& actual = archive.info(name).shape;
    if (actual != shape) {
      throw LoadError("tensor '" + name + "': expected shape " + shape_string(shape) + ", got " +
                      shape_string(actual));
    }
  }
}

bool all_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void check_vec(const Vec& v, std::size_t n, const std::string& what) {
  if (v.size() != n) throw LoadError(what + ": expected length " + std::to_string(n));
  if (!all_finite(v)) throw LoadError(what + ": non-finite entries");
}

void check_matrix(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw LoadError(what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                    std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  if (!all_finite(m.data())) throw LoadError(what + ": non-finite entries");
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab_size < 1 || max_positions < 1) {
    throw LoadError("model config: every count must be at least 1");
  }
  if (n_heads * d_head != d_model) {
    throw LoadError("model config: n_heads * d_head (" + std::to_string(n_heads * d_head) + ") != d_model (" +
                    std::to_string(d_model) + ")");
  }
  if (!(ln_epsilon > 0.0f)) throw LoadError("model config: ln_epsilon must be positive");
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = field<int>(j, {"n_layers", "n_layer"});
    c.n_heads = field<int>(j, {"n_heads", "n_head"});
    c.d_model = field<int>(j, {"d_model", "n_embd"});
    c.d_head = field<int>(j, {"d_head"}, c.n_heads > 0 ? c.d_model / c.n_heads : 0);
    c.d_mlp = field<int>(j, {"d_mlp", "n_inner"}, 4 * c.d_model);
    c.vocab_size = field<int>(j, {"vocab_size"});
    c.max_positions = field<int>(j, {"max_positions", "n_positions", "n_ctx"});
    c.ln_epsilon = field<float>(j, {"ln_epsilon", "layer_norm_epsilon"}, 1e-5f);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},     {"n_heads", n_heads},       {"d_model", d_model},
          {"d_head", d_head},         {"d_mlp", d_mlp},           {"vocab_size", vocab_size},
          {"max_positions", max_positions}, {"ln_epsilon", ln_epsilon}};
}

Model::Model(ModelConfig config, WeightSet weights) : config_(config), weights_(std::move(weights)) {
  config_.validate();
  const auto dm = static_cast<std::size_t>(config_.d_model);
  const auto dh = static_cast<std::size_t>(config_.d_head);
  const auto dmlp = static_cast<std::size_t>(config_.d_mlp);
  const auto nh = static_cast<std::size_t>(config_.n_heads);
  check_matrix(weights_.token_embedding, static_cast<std::size_t>(config_.vocab_size), dm, "wte.weight");
  check_matrix(weights_.position_embedding, static_cast<std::size_t>(config_.max_positions), dm, "wpe.weight");
  if (weights_.layers.size() != static_cast<std::size_t>(config_.n_layers)) {
    throw LoadError("weight set has " + std::to_string(weights_.layers.size()) + " layers, config says " +
                    std::to_string(config_.n_layers));
  }
  for (std::size_t l = 0; l < weights_.layers.size(); ++l) {
    const auto& lw = weights_.layers[l];
    const std::string p = "h." + std::to_string(l) + ".";
    check_vec(lw.ln1_scale, dm, p + "ln_1.weight");
    check_vec(lw.ln1_bias, dm, p + "ln_1.bias");
    check_vec(lw.ln2_scale, dm, p + "ln_2.weight");
    check_vec(lw.ln2_bias, dm, p + "ln_2.bias");
    if (lw.W_Q.size() != nh || lw.W_K.size() != nh || lw.W_V.size() != nh || lw.W_O.size() != nh ||
        lw.b_Q.size() != nh || lw.b_K.size() != nh || lw.b_V.size() != nh) {
      throw LoadError(p + "attn: expected " + std::to_string(nh) + " heads");
    }
    for (std::size_t h = 0; h < nh; ++h) {
      check_matrix(lw.W_Q[h], dm, dh, p + "attn.W_Q");
      check_matrix(lw.W_K[h], dm, dh, p + "attn.W_K");
      check_matrix(lw.W_V[h], dm, dh, p + "attn.W_V");
      check_matrix(lw.W_O[h], dh, dm, p + "attn.W_O");
      check_vec(lw.b_Q[h], dh, p + "attn.b_Q");
      check_vec(lw.b_K[h], dh, p + "attn.b_K");
      check_vec(lw.b_V[h], dh, p + "attn.b_V");
    }
    check_vec(lw.b_O, dm, p + "attn.b_O");
    check_matrix(lw.W_in, dm, dmlp, p + "mlp.W_in");
    check_vec(lw.b_in, dmlp, p + "mlp.b_in");
    check_matrix(lw.W_out, dmlp, dm, p + "mlp.W_out");
    check_vec(lw.b_out, dm, p + "mlp.b_out");
  }
  check_vec(weights_.lnf_scale, dm, "ln_f.weight");
  check_vec(weights_.lnf_bias, dm, "ln_f.bias");
  if (weights_.unembedding) {
    check_matrix(*weights_.unembedding, static_cast<std::size_t>(config_.vocab_size), dm, "lm_head.weight");
  }
}

const Matrix& Model::output_projection(const ComponentId& id) const {
  if (id.is_head()) {
    return layer(id.layer).W_O.at(static_cast<std::size_t>(id.head));
  }
  if (id.is_mlp()) return layer(id.layer).W_out;
  throw InputError("component " + to_string(id) + " has no output projection");
}

Model load_model(const std::filesystem::path& config_path, const std::filesystem::path& weights_path) {
  const auto config = ModelConfig::from_json(read_json(config_path));
  const auto archive = safetensors::Archive::read(weights_path);
  return Model(config, read_weights(archive, config));
}

Model load_model(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw LoadError("model directory " + dir.string() + " does not exist");
  const auto config = ModelConfig::from_json(read_json(dir / "config.json"));
  const auto archive = safetensors::Archive::read(dir / "model.safetensors");
  if (std::filesystem::exists(dir / "manifest.json")) check_manifest(dir / "manifest.json", archive);
  return Model(config, read_weights(archive, config));
}

void save_model(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& cfg = model.config();
  const auto& ws = model.weights();
  const std::int64_t dm = cfg.d_model, dh = cfg.d_head, nh = cfg.n_heads, dmlp = cfg.d_mlp;

  // Per-head blocks are concatenated into owned buffers that must outlive the
  // views handed to the writer.
  std::vector<std::vector<float>> owned;
  owned.reserve(static_cast<std::size_t>(cfg.n_layers) * 7);
  auto concat = [&](const auto& parts) -> std::span<const float> {
    std::vector<float> flat;
    for (const auto& p : parts) {
      if constexpr (std::is_same_v<std::decay_t<decltype(p)>, Matrix>) {
        flat.insert(flat.end(), p.data().begin(), p.data().end());
      } else {
        flat.insert(flat.end(), p.begin(), p.end());
      }
    }
    owned.push_back(std::move(flat));
    return owned.back();
  };

  std::vector<safetensors::TensorView> views;
  views.push_back({"wte.weight", {cfg.vocab_size, dm}, ws.token_embedding.data()});
  views.push_back({"wpe.weight", {cfg.max_positions, dm}, ws.position_embedding.data()});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = model.layer(l);
    const std::string p = "h." + std::to_string(l) + ".";
    views.push_back({p + "ln_1.weight", {dm}, lw.ln1_scale});
    views.push_back({p + "ln_1.bias", {dm}, lw.ln1_bias});
    views.push_back({p + "attn.W_Q", {nh, dm, dh}, concat(lw.W_Q)});
    views.push_back({p + "attn.W_K", {nh, dm, dh}, concat(lw.W_K)});
    views.push_back({p + "attn.W_V", {nh, dm, dh}, concat(lw.W_V)});
    views.push_back({p + "attn.b_Q", {nh, dh}, concat(lw.b_Q)});
    views.push_back({p + "attn.b_K", {nh, dh}, concat(lw.b_K)});
    views.push_back({p + "attn.b_V", {nh, dh}, concat(lw.b_V)});
    views.push_back({p + "attn.W_O", {nh, dh, dm}, concat(lw.W_O)});
    views.push_back({p + "attn.b_O", {dm}, lw.b_O});
    views.push_back({p + "ln_2.weight", {dm}, lw.ln2_scale});
    views.push_back({p + "ln_2.bias", {dm}, lw.ln2_bias});
    views.push_back({p + "mlp.W_in", {dm, dmlp}, lw.W_in.data()});
    views.push_back({p + "mlp.b_in", {dmlp}, lw.b_in});
    views.push_back({p + "mlp.W_out", {dmlp, dm}, lw.W_out.data()});
    views.push_back({p + "mlp.b_out", {dm}, lw.b_out});
  }
  views.push_back({"ln_f.weight", {dm}, ws.lnf_scale});
  views.push_back({"ln_f.bias", {dm}, ws.lnf_bias});
  if (ws.unembedding) views.push_back({"lm_head.weight", {cfg.vocab_size, dm}, ws.unembedding->data()});

  safetensors::write(dir / "model.safetensors", views, {{"format", "cfp-split-heads"}});

  nlohmann::ordered_json manifest;
  manifest["config"] = cfg.to_json();
  manifest["tensors"] = nlohmann::ordered_json::array();
  for (const auto& v : views) manifest["tensors"].push_back({{"name", v.name}, {"dtype", "F32"}, {"shape", v.shape}});
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream(dir / "config.json") << cfg.to_json().dump(2) << '\n';
}

Model make_random_model(const ModelConfig& config, std::uint64_t seed, float scale) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto fill = [&](std::span<float> out, float mean, float sd) {
    for (float& x : out) x = mean + sd * normal(rng);
  };
  auto matrix = [&](int rows, int cols, float sd) {
    Matrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
    fill(m.data(), 0.0f, sd);
    return m;
  };
  auto vec = [&](int n, float mean, float sd) {
    Vec v(static_cast<std::size_t>(n));
    fill(v, mean, sd);
    return v;
  };

  const float proj = scale;
  WeightSet ws;
  ws.token_embedding = matrix(config.vocab_size, config.d_model, 1.0f);
  ws.position_embedding = matrix(config.max_positions, config.d_model, 0.5f);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_scale = vec(config.d_model, 1.0f, 0.1f);
    lw.ln1_bias = vec(config.d_model, 0.0f, 0.1f);
    for (int h = 0; h < config.n_heads; ++h) {
      lw.W_Q.push_back(matrix(config.d_model, config.d_head, proj));
      lw.W_K.push_back(matrix(config.d_model, config.d_head, proj));
      lw.W_V.push_back(matrix(config.d_model, config.d_head, proj));
      lw.b_Q.push_back(vec(config.d_head, 0.0f, 0.1f));
      lw.b_K.push_back(vec(config.d_head, 0.0f, 0.1f));
      lw.b_V.push_back(vec(config.d_head, 0.0f, 0.1f));
      lw.W_O.push_back(matrix(config.d_head, config.d_model, proj));
    }
    lw.b_O = vec(config.d_model, 0.0f, 0.1f);
    lw.ln2_scale = vec(config.d_model, 1.0f, 0.1f);
    lw.ln2_bias = vec(config.d_model, 0.0f, 0.1f);
    lw.W_in = matrix(config.d_model, config.d_mlp, proj);
    lw.b_in = vec(config.d_mlp, 0.0f, 0.1f);
    lw.W_out = matrix(config.d_mlp, config.d_model, proj / 2.0f);
    lw.b_out = vec(config.d_model, 0.0f, 0.1f);
    ws.layers.push_back(std::move(lw));
  }
  ws.lnf_scale = vec(config.d_model, 1.0f, 0.1f);
  ws.lnf_bias = vec(config.d_model, 0.0f, 0.1f);
  return Model(config, std::move(ws));
}

}  // namespace cfp
