#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cfp/model.hpp"

namespace cfp {

// Byte-level BPE over GPT-2 vocabulary files (vocab.json + merges.txt).
// Immutable after loading.
class Tokenizer {
 public:
  static Tokenizer load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);
  // Reads vocab.json and merges.txt from `dir`.
  static Tokenizer load(const std::filesystem::path& dir);

  // Text is always tokenized literally; "<|endoftext|>" in the input is not
  // mapped to the special token.
  std::vector<TokenId> encode(std::string_view text) const;
  // Concatenated bytes of the tokens. Throws InputError for unknown ids.
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t vocab_size() const { return id_to_token_.size(); }
  // "<|endoftext|>", which GPT-2 also uses as beginning-of-sequence.
  TokenId bos_id() const { return bos_; }

  // The id of `text` when it encodes to exactly one token.
  std::optional<TokenId> single_token(std::string_view text) const;
  // First token of `text`; answers that span several tokens are scored by
  // their first token. Throws InputError for empty text.
  TokenId answer_token(std::string_view text) const;

  // The vocabulary entry (byte-encoded form) for an id, e.g. "ĠParis".
  const std::string& token_string(TokenId id) const;
  std::optional<TokenId> lookup(const std::string& token) const;

 private:
  std::vector<std::string> pretokenize(std::string_view text) const;
  void bpe(const std::string& word, std::vector<TokenId>& out) const;

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> merge_ranks_;  // key: left + ' ' + right
  std::string byte_encoder_[256];                      // byte -> UTF-8 of its stand-in code point
  std::unordered_map<std::string, unsigned char> byte_decoder_;
  TokenId bos_ = -1;
};

}  // namespace cfp
