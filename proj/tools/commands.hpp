#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfp/datasets.hpp"
#include "cfp/edges.hpp"
#include "cfp/steering.hpp"

namespace cfp::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kDataError = 2, kDegenerate = 3 };

// How target directions are formed over a dataset: one per pair, or the mean
// of all pair directions applied to every pair.
enum class DirectionMode { PerPair, Averaged };
std::string to_string(DirectionMode m);
DirectionMode parse_direction_mode(const std::string& s);

struct RunConfig {
  std::filesystem::path model_dir;
  // Defaults to model_dir when it holds vocab.json, else the bundled GPT-2 files.
  std::filesystem::path tokenizer_dir;
  std::optional<Task> task;
  std::optional<std::filesystem::path> dataset;
  std::size_t generate = 0;
  std::uint64_t seed = 0;
  std::filesystem::path out = ".";
  bool prepend_bos = true;
  DirectionMode direction = DirectionMode::PerPair;
  Alg1Mode alg1_mode = Alg1Mode::SingleFactor;
  // Fractions of the ranked edge list evaluated by `eval`.
  std::vector<double> n_edges_grid;
  std::vector<double> alphas;
  std::size_t heads = kDefaultSteeringHeads;
  SteeringMode steer_mode = SteeringMode::KnownTarget;
  SteeringSpace steer_space = SteeringSpace::HeadNative;
  std::size_t generations = 5;
  std::size_t max_new_tokens = 8;

  nlohmann::json to_json() const;
};

// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

// Subcommand bodies. Each writes its artifacts under config.out and throws
// the library's error types on failure.
void cmd_dataset(const RunConfig& config);
void cmd_trace(const RunConfig& config);
void cmd_edges(const RunConfig& config);
void cmd_eval(const RunConfig& config);
void cmd_steer(const RunConfig& config);

// Parses argv, runs the selected subcommand and maps errors to exit codes.
// Diagnostics go to `err`.
int run(int argc, const char* const* argv, std::ostream& err);

}  // namespace cfp::cli
