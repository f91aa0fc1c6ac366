#include "cfp/tokenizer.hpp"

#include <array>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "cfp/error.hpp"
#include "unicode.hpp"

namespace cfp {
namespace {

std::string utf8(char32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s += static_cast<char>(cp);
  } else if (cp < 0x800) {
    s += static_cast<char>(0xC0 | (cp >> 6));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    s += static_cast<char>(0xE0 | (cp >> 12));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return s;
}

// Printable bytes map to themselves; the rest are shifted to 256 and up so
// every byte has a visible, non-space stand-in.
std::array<char32_t, 256> byte_code_points() {
  std::array<char32_t, 256> map{};
  std::array<bool, 256> direct{};
  for (int b = '!'; b <= '~'; ++b) direct[b] = true;
  for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
  for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
  char32_t next = 256;
  for (int b = 0; b < 256; ++b) map[b] = direct[b] ? static_cast<char32_t>(b) : next++;
  return map;
}

// Splits a byte-encoded word into its UTF-8 characters.
std::vector<std::string> characters(const std::string& word) {
  std::vector<std::string> out;
  for (const auto& u : unicode::decode_utf8(word)) out.push_back(word.substr(u.begin, u.end - u.begin));
  return out;
}

bool is_other(char32_t cp) { return !unicode::is_space(cp) && !unicode::is_letter(cp) && !unicode::is_number(cp); }

}  // namespace

Tokenizer Tokenizer::load(const std::filesystem::path& dir) { return load(dir / "vocab.json", dir / "merges.txt"); }

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
  Tokenizer tok;
  std::ifstream vin(vocab_json);
  if (!vin) throw LoadError("cannot open vocabulary " + vocab_json.string());
  nlohmann::json vocab;
  try {
    vocab = nlohmann::json::parse(vin);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(vocab_json.string() + ": " + e.what());
  }
  tok.id_to_token_.resize(vocab.size());
  for (const auto& [token, id_json] : vocab.items()) {
    const auto id = id_json.get<long long>();
    if (id < 0 || id >= static_cast<long long>(vocab.size()) || !tok.id_to_token_[id].empty()) {
      throw LoadError(vocab_json.string() + ": ids must be unique and dense, offending token " + token);
    }
    tok.id_to_token_[id] = token;
    tok.token_to_id_.emplace(token, static_cast<TokenId>(id));
  }
  const auto eot = tok.token_to_id_.find("<|endoftext|>");
  tok.bos_ = eot == tok.token_to_id_.end() ? -1 : eot->second;

  std::ifstream min(merges_txt);
  if (!min) throw LoadError("cannot open merges " + merges_txt.string());
  std::string line;
  int rank = 0;
  std::size_t line_no = 0;
  while (std::getline(min, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos || space == 0 || space + 1 == line.size() ||
        line.find(' ', space + 1) != std::string::npos) {
      throw LoadError(merges_txt.string() + ":" + std::to_string(line_no) + ": expected two symbols");
    }
    if (!tok.merge_ranks_.emplace(line, rank).second) {
      throw LoadError(merges_txt.string() + ":" + std::to_string(line_no) + ": duplicate merge");
    }
    ++rank;
  }

  const auto cps = byte_code_points();
  for (int b = 0; b < 256; ++b) {
    tok.byte_encoder_[b] = utf8(cps[b]);
    tok.byte_decoder_.emplace(tok.byte_encoder_[b], static_cast<unsigned char>(b));
  }
  return tok;
}

std::vector<std::string> Tokenizer::pretokenize(std::string_view text) const {
  const auto units = unicode::decode_utf8(text);
  const std::size_t n = units.size();
  std::vector<std::string> pieces;
  auto emit = [&](std::size_t from, std::size_t to) {
    pieces.emplace_back(text.substr(units[from].begin, units[to - 1].end - units[from].begin));
  };
  auto run = [&](std::size_t from, auto pred) {
    while (from < n && pred(units[from].cp)) ++from;
    return from;
  };

  std::size_t i = 0;
  while (i < n) {
    const char32_t c = units[i].cp;
    // Contractions.
    if (c == U'\'' && i + 1 < n) {
      const char32_t a = units[i + 1].cp;
      const char32_t b = i + 2 < n ? units[i + 2].cp : 0;
      std::size_t len = 0;
      if (a == U's' || a == U't' || a == U'm' || a == U'd') len = 2;
      if ((a == U'r' && b == U'e') || (a == U'v' && b == U'e') || (a == U'l' && b == U'l')) len = 3;
      if (len > 0) {
        emit(i, i + len);
        i += len;
        continue;
      }
    }
    // Optional leading space followed by a letter, number or "other" run.
    const std::size_t body = (c == U' ' && i + 1 < n) ? i + 1 : i;
    const char32_t head = units[body].cp;
    if (unicode::is_letter(head)) {
      const std::size_t end = run(body, unicode::is_letter);
      emit(i, end);
      i = end;
      continue;
    }
    if (unicode::is_number(head)) {
      const std::size_t end = run(body, unicode::is_number);
      emit(i, end);
      i = end;
      continue;
    }
    if (is_other(head)) {
      const std::size_t end = run(body, is_other);
      emit(i, end);
      i = end;
      continue;
    }
    // Whitespace: a run that ends the text is taken whole; otherwise its last
    // character is left to prefix the following piece.
    const std::size_t end = run(i, unicode::is_space);
    const std::size_t stop = (end < n && end - i > 1) ? end - 1 : end;
    emit(i, stop);
    i = stop;
  }
  return pieces;
}

void Tokenizer::bpe(const std::string& word, std::vector<TokenId>& out) const {
  std::vector<std::string> symbols = characters(word);
  while (symbols.size() > 1) {
    int best = std::numeric_limits<int>::max();
    std::size_t best_at = 0;
    for (std::size_t k = 0; k + 1 < symbols.size(); ++k) {
      const auto it = merge_ranks_.find(symbols[k] + ' ' + symbols[k + 1]);
      if (it != merge_ranks_.end() && it->second < best) {
        best = it->second;
        best_at = k;
      }
    }
    if (best == std::numeric_limits<int>::max()) break;
    const std::string left = symbols[best_at];
    const std::string right = symbols[best_at + 1];
    std::vector<std::string> merged;
    merged.reserve(symbols.size());
    for (std::size_t k = 0; k < symbols.size(); ++k) {
      if (k + 1 < symbols.size() && symbols[k] == left && symbols[k + 1] == right) {
        merged.push_back(left + right);
        ++k;
      } else {
        merged.push_back(symbols[k]);
      }
    }
    symbols = std::move(merged);
  }
  for (const auto& s : symbols) {
    const auto it = token_to_id_.find(s);
    if (it == token_to_id_.end()) throw InputError("symbol '" + s + "' missing from the vocabulary");
    out.push_back(it->second);
  }
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& piece : pretokenize(text)) {
    std::string word;
    for (unsigned char b : piece) word += byte_encoder_[b];
    bpe(word, ids);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    for (const auto& ch : characters(token_string(id))) {
      const auto it = byte_decoder_.find(ch);
      if (it == byte_decoder_.end()) {
        // Special tokens such as <|endoftext|> are stored as plain text.
        out += ch;
      } else {
        out += static_cast<char>(it->second);
      }
    }
  }
  return out;
}

const std::string& Tokenizer::token_string(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Tokenizer::lookup(const std::string& token) const {
  const auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Tokenizer::single_token(std::string_view text) const {
  const auto ids = encode(text);
  if (ids.size() != 1) return std::nullopt;
  return ids.front();
}

TokenId Tokenizer::answer_token(std::string_view text) const {
  const auto ids = encode(text);
  if (ids.empty()) throw InputError("answer text is empty");
  return ids.front();
}

}  // namespace cfp
