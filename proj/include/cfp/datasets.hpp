#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cfp/pair.hpp"
#include "cfp/tokenizer.hpp"

namespace cfp {

enum class Task { Ioi, Sva, Capitals };

std::string to_string(Task t);
Task parse_task(const std::string& s);

// Frozen word pools. Entries are bare words; generators add the leading
// space and drop any entry that is not a single token under the tokenizer.
const std::vector<std::string>& ioi_names();
const std::vector<std::string>& ioi_places();
const std::vector<std::string>& ioi_objects();
// (country, capital); includes capitals that tokenize to several pieces,
// which the generator excludes.
const std::vector<std::pair<std::string, std::string>>& country_capitals();
// (singular, plural) subject nouns.
const std::vector<std::pair<std::string, std::string>>& sva_nouns();

// IOI: "After {IO} and {S} went to the {place}. {S} gave a {object} to" and
// similar templates, in ABBA and BABA name order. The corrupted prompt
// replaces the second mention of S by IO, so a⁺ = IO and a⁻ = S.
// Item i of a seed is the combination at position (a·i + b) mod N of a fixed
// stride walk over all template/name/place/object combinations; seed 0
// starts at the first combination.
std::vector<ContrastivePair> generate_ioi(std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer);

// "The capital of {X} is" against "The capital of {Y} is"; a⁺ is X's capital.
std::vector<ContrastivePair> generate_capitals(std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer);

// "The {subject} {preposition} the {object}" with the subject's number
// toggled in the corrupted prompt; answers are a singular/plural verb pair
// (" is"/" are", " was"/" were", " has"/" have").
std::vector<ContrastivePair> generate_sva(std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer);

std::vector<ContrastivePair> generate(Task task, std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer);

// Token ids of every answer the task's generator can emit; used as the
// prototype set of steering bases.
std::vector<TokenId> answer_vocabulary(Task task, const Tokenizer& tokenizer);

// Checks the pair invariants and tokenizes. Throws DatasetError when the
// prompts differ in token length (both lengths are reported), an answer is
// not a single token, or the answers are equal.
EncodedPair encode_pair(const ContrastivePair& pair, const Tokenizer& tokenizer);
std::vector<EncodedPair> encode_pairs(std::span<const ContrastivePair> pairs, const Tokenizer& tokenizer);

// JSONL, one object per line:
// {"clean": str, "corrupt": str, "a_plus": str, "a_minus": str, "meta": {...}}
nlohmann::json pair_to_json(const ContrastivePair& pair);
void write_pairs(std::ostream& out, std::span<const ContrastivePair> pairs);
void write_pairs(const std::filesystem::path& path, std::span<const ContrastivePair> pairs);

// Reads and validates a JSONL file. Blank lines are skipped. Errors are
// DatasetErrors prefixed with "<path>:<line>:".
std::vector<ContrastivePair> load_pairs(const std::filesystem::path& path, const Tokenizer& tokenizer);
std::vector<ContrastivePair> read_pairs(std::istream& in, const Tokenizer& tokenizer, const std::string& source);

}  // namespace cfp
