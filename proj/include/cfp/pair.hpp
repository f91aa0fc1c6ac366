#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfp/model.hpp"

namespace cfp {

// A clean/corrupted prompt pair with the answer each should produce. The
// prompts tokenize to the same length and the answers carry a leading space.
struct ContrastivePair {
  std::string clean;
  std::string corrupt;
  std::string a_plus;
  std::string a_minus;
  nlohmann::json meta = nlohmann::json::object();

  bool operator==(const ContrastivePair&) const = default;
};

// Token-level form consumed by the analysis modules.
struct EncodedPair {
  std::vector<TokenId> clean;
  std::vector<TokenId> corrupt;
  TokenId a_plus = 0;
  TokenId a_minus = 0;
};

}  // namespace cfp
