#include "cfp/datasets.hpp"

#include <fstream>
#include <numeric>
#include <set>

#include "cfp/error.hpp"

namespace cfp {
namespace {

const std::vector<std::string> kIoiTemplates{
    "After {A} and {B} went to the {place}. {S} gave a {object} to",
    "When {A} and {B} got a {object} at the {place}, {S} decided to give it to",
    "Then, {A} and {B} were working at the {place}. {S} decided to give a {object} to",
    "While {A} and {B} were commuting to the {place}, {S} gave a {object} to",
};

const std::vector<std::string> kPrepositions{"on", "near", "behind", "beside", "under", "by"};
const std::vector<std::string> kSvaObjects{"cabinet", "table", "door", "house", "bridge", "school",
                                           "building", "road", "wall", "river", "desk", "office"};
const std::vector<std::pair<std::string, std::string>> kVerbs{{"is", "are"}, {"was", "were"}, {"has", "have"}};

void replace_all(std::string& s, const std::string& key, const std::string& value) {
  for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size())) {
    s.replace(pos, key.size(), value);
  }
}

std::vector<std::string> single_tokens(const std::vector<std::string>& words, const Tokenizer& tok) {
  std::vector<std::string> out;
  for (const auto& w : words) {
    if (tok.single_token(" " + w)) out.push_back(w);
  }
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Visits 0..size-1 as (stride·i + offset) mod size. The stride is coprime
// with size, so the first `size` items are distinct.
class AffineWalk {
 public:
  AffineWalk(std::uint64_t size, std::uint64_t seed) : size_(size) {
    if (size_ == 0) throw DatasetError("generator has an empty combination space");
    stride_ = static_cast<std::uint64_t>(static_cast<double>(size_) * 0.6180339887498949) | 1;
    while (std::gcd(stride_, size_) != 1) stride_ += 2;
    offset_ = seed == 0 ? 0 : splitmix64(seed) % size_;
  }
  std::uint64_t at(std::uint64_t i) const {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(stride_) * i + offset_) % size_);
  }

 private:
  std::uint64_t size_;
  std::uint64_t stride_ = 1;
  std::uint64_t offset_ = 0;
};

// Splits a combination index into digits, most significant first.
std::vector<std::size_t> digits(std::uint64_t value, const std::vector<std::size_t>& radices) {
  std::vector<std::size_t> out(radices.size());
  for (std::size_t i = radices.size(); i-- > 0;) {
    out[i] = static_cast<std::size_t>(value % radices[i]);
    value /= radices[i];
  }
  return out;
}

std::uint64_t product(const std::vector<std::size_t>& radices) {
  std::uint64_t p = 1;
  for (auto r : radices) p *= r;
  return p;
}

void require_pool(std::size_t size, std::size_t need, const char* what) {
  if (size < need) {
    throw DatasetError(std::string("too few single-token ") + what + " under this tokenizer (" + std::to_string(size) +
                       ", need " + std::to_string(need) + ")");
  }
}

nlohmann::json meta(Task task, std::uint64_t seed, std::size_t index) {
  return {{"task", to_string(task)}, {"seed", seed}, {"index", index}, {"version", 1}};
}

}  // namespace

std::string to_string(Task t) {
  switch (t) {
    case Task::Ioi:
      return "ioi";
    case Task::Sva:
      return "sva";
    case Task::Capitals:
      return "capitals";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  if (s == "ioi") return Task::Ioi;
  if (s == "sva") return Task::Sva;
  if (s == "capitals") return Task::Capitals;
  throw InputError("unknown task '" + s + "' (expected ioi, sva or capitals)");
}

const std::vector<std::string>& ioi_names() {
  static const std::vector<std::string> names{
      "Mary",  "Bob",   "John",   "Alice", "Tom",  "James", "Sarah", "Michael", "David", "Emma",
      "Daniel", "Paul", "Mark",   "Lisa",  "Anna", "Kate",  "Jack",  "Ryan",    "Steve", "Laura",
      "Jane",  "Peter", "Adam",   "Eric",  "Susan", "Rachel", "Amy", "Kevin",   "Jason", "Linda"};
  return names;
}

const std::vector<std::string>& ioi_places() {
  static const std::vector<std::string> places{"store",      "garden",  "park",    "school",
                                               "hospital",   "office",  "restaurant", "station",
                                               "beach",      "library"};
  return places;
}

const std::vector<std::string>& ioi_objects() {
  static const std::vector<std::string> objects{"bottle", "drink", "ring",       "book",  "bag",
                                                "ball",   "letter", "gift",      "key",   "kiss",
                                                "snack",  "basketball", "apple", "necklace"};
  return objects;
}

const std::vector<std::pair<std::string, std::string>>& country_capitals() {
  static const std::vector<std::pair<std::string, std::string>> pairs{
      {"France", "Paris"},        {"Italy", "Rome"},         {"Germany", "Berlin"},   {"Spain", "Madrid"},
      {"Japan", "Tokyo"},         {"Russia", "Moscow"},      {"China", "Beijing"},    {"Egypt", "Cairo"},
      {"England", "London"},      {"Greece", "Athens"},      {"Austria", "Vienna"},   {"Poland", "Warsaw"},
      {"Ireland", "Dublin"},      {"Portugal", "Lisbon"},    {"Canada", "Ottawa"},    {"Australia", "Canberra"},
      {"Sweden", "Stockholm"},    {"Norway", "Oslo"},        {"Denmark", "Copenhagen"}, {"Finland", "Helsinki"},
      {"Hungary", "Budapest"},    {"Cuba", "Havana"},        {"Peru", "Lima"},        {"Chile", "Santiago"},
      {"Thailand", "Bangkok"},    {"Iran", "Tehran"},        {"Iraq", "Baghdad"},     {"Syria", "Damascus"},
      {"Lebanon", "Beirut"},      {"Israel", "Jerusalem"},   {"Turkey", "Ankara"},    {"Pakistan", "Islamabad"},
      {"Afghanistan", "Kabul"},   {"Indonesia", "Jakarta"},  {"Philippines", "Manila"}, {"Korea", "Seoul"},
      {"Belgium", "Brussels"},    {"Netherlands", "Amsterdam"}, {"Switzerland", "Bern"}, {"Scotland", "Edinburgh"},
      {"Wales", "Cardiff"},       {"Ukraine", "Kiev"},       {"Tunisia", "Tunis"},
      // Multi-token capitals under GPT-2; dropped at generation time.
      {"Kenya", "Nairobi"},       {"Brazil", "Brasilia"},    {"Vietnam", "Hanoi"},    {"Venezuela", "Caracas"},
      {"Colombia", "Bogota"},     {"Nigeria", "Abuja"},      {"Croatia", "Zagreb"},   {"Nepal", "Kathmandu"}};
  return pairs;
}

const std::vector<std::pair<std::string, std::string>>& sva_nouns() {
  static const std::vector<std::pair<std::string, std::string>> nouns{
      {"key", "keys"},         {"author", "authors"},   {"pilot", "pilots"},       {"doctor", "doctors"},
      {"teacher", "teachers"}, {"dog", "dogs"},         {"car", "cars"},           {"student", "students"},
      {"picture", "pictures"}, {"book", "books"},       {"boy", "boys"},           {"girl", "girls"},
      {"farmer", "farmers"},   {"painting", "paintings"}, {"senator", "senators"}, {"manager", "managers"},
      {"lawyer", "lawyers"},   {"player", "players"},   {"friend", "friends"},     {"officer", "officers"}};
  return nouns;
}

std::vector<ContrastivePair> generate_ioi(std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer) {
  if (n < 1) throw InputError("dataset size must be at least 1");
  const auto names = single_tokens(ioi_names(), tokenizer);
  const auto places = single_tokens(ioi_places(), tokenizer);
  const auto objects = single_tokens(ioi_objects(), tokenizer);
  require_pool(names.size(), 2, "names");
  require_pool(places.size(), 1, "places");
  require_pool(objects.size(), 1, "objects");
  // template, order (0 ABBA, 1 BABA), IO, S (skipping IO), place, object
  const std::vector<std::size_t> radices{kIoiTemplates.size(), 2, names.size(), names.size() - 1, places.size(),
                                         objects.size()};
  const AffineWalk walk(product(radices), seed);
  std::vector<ContrastivePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = digits(walk.at(i), radices);
    const std::string& io = names[d[2]];
    const std::string& s = names[d[3] >= d[2] ? d[3] + 1 : d[3]];
    std::string text = kIoiTemplates[d[0]];
    replace_all(text, "{A}", d[1] == 0 ? io : s);
    replace_all(text, "{B}", d[1] == 0 ? s : io);
    replace_all(text, "{place}", places[d[4]]);
    replace_all(text, "{object}", objects[d[5]]);
    std::string clean = text, corrupt = text;
    replace_all(clean, "{S}", s);
    replace_all(corrupt, "{S}", io);
    auto m = meta(Task::Ioi, seed, i);
    m["template"] = d[0];
    m["order"] = d[1] == 0 ? "ABBA" : "BABA";
    m["io"] = io;
    m["s"] = s;
    out.push_back({clean, corrupt, " " + io, " " + s, m});
  }
  return out;
}

std::vector<ContrastivePair> generate_capitals(std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer) {
  if (n < 1) throw InputError("dataset size must be at least 1");
  std::vector<std::pair<std::string, std::string>> pool;
  for (const auto& [country, capital] : country_capitals()) {
    if (tokenizer.single_token(" " + country) && tokenizer.single_token(" " + capital)) pool.emplace_back(country, capital);
  }
  require_pool(pool.size(), 2, "country/capital pairs");
  const std::vector<std::size_t> radices{pool.size(), pool.size() - 1};
  const AffineWalk walk(product(radices), seed);
  std::vector<ContrastivePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = digits(walk.at(i), radices);
    const auto& x = pool[d[0]];
    const auto& y = pool[d[1] >= d[0] ? d[1] + 1 : d[1]];
    auto m = meta(Task::Capitals, seed, i);
    m["country"] = x.first;
    m["counterfactual"] = y.first;
    out.push_back({"The capital of " + x.first + " is", "The capital of " + y.first + " is", " " + x.second,
                   " " + y.second, m});
  }
  return out;
}

std::vector<ContrastivePair> generate_sva(std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer) {
  if (n < 1) throw InputError("dataset size must be at least 1");
  std::vector<std::pair<std::string, std::string>> nouns;
  for (const auto& [sg, pl] : sva_nouns()) {
    if (tokenizer.single_token(" " + sg) && tokenizer.single_token(" " + pl)) nouns.emplace_back(sg, pl);
  }
  const auto preps = single_tokens(kPrepositions, tokenizer);
  const auto objects = single_tokens(kSvaObjects, tokenizer);
  std::vector<std::pair<std::string, std::string>> verbs;
  for (const auto& [sg, pl] : kVerbs) {
    if (tokenizer.single_token(" " + sg) && tokenizer.single_token(" " + pl)) verbs.emplace_back(sg, pl);
  }
  require_pool(nouns.size(), 1, "subject nouns");
  require_pool(preps.size(), 1, "prepositions");
  require_pool(objects.size(), 1, "objects");
  require_pool(verbs.size(), 1, "verb pairs");
  // number (0 plural, 1 singular), noun, preposition, object, verb pair
  const std::vector<std::size_t> radices{2, nouns.size(), preps.size(), objects.size(), verbs.size()};
  const AffineWalk walk(product(radices), seed);
  std::vector<ContrastivePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = digits(walk.at(i), radices);
    const bool plural = d[0] == 0;
    const auto& noun = nouns[d[1]];
    const auto& verb = verbs[d[4]];
    const std::string tail = " " + preps[d[2]] + " the " + objects[d[3]];
    const std::string subject = plural ? noun.second : noun.first;
    const std::string other = plural ? noun.first : noun.second;
    auto m = meta(Task::Sva, seed, i);
    m["number"] = plural ? "plural" : "singular";
    m["verb"] = plural ? verb.second : verb.first;
    out.push_back({"The " + subject + tail, "The " + other + tail, " " + (plural ? verb.second : verb.first),
                   " " + (plural ? verb.first : verb.second), m});
  }
  return out;
}

std::vector<ContrastivePair> generate(Task task, std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer) {
  switch (task) {
    case Task::Ioi:
      return generate_ioi(n, seed, tokenizer);
    case Task::Sva:
      return generate_sva(n, seed, tokenizer);
    case Task::Capitals:
      return generate_capitals(n, seed, tokenizer);
  }
  throw InputError("unknown task");
}

std::vector<TokenId> answer_vocabulary(Task task, const Tokenizer& tokenizer) {
  std::set<TokenId> ids;
  auto add = [&](const std::string& w) {
    if (auto t = tokenizer.single_token(" " + w)) ids.insert(*t);
  };
  switch (task) {
    case Task::Ioi:
      for (const auto& n : ioi_names()) add(n);
      break;
    case Task::Capitals:
      for (const auto& [country, capital] : country_capitals()) {
        if (tokenizer.single_token(" " + country)) add(capital);
      }
      break;
    case Task::Sva:
      for (const auto& [sg, pl] : kVerbs) {
        add(sg);
        add(pl);
      }
      break;
  }
  return {ids.begin(), ids.end()};
}

EncodedPair encode_pair(const ContrastivePair& pair, const Tokenizer& tokenizer) {
  EncodedPair e;
  e.clean = tokenizer.encode(pair.clean);
  e.corrupt = tokenizer.encode(pair.corrupt);
  if (e.clean.empty()) throw DatasetError("clean prompt is empty");
  if (e.clean.size() != e.corrupt.size()) {
    throw DatasetError("clean prompt has " + std::to_string(e.clean.size()) + " tokens, corrupted prompt has " +
                       std::to_string(e.corrupt.size()));
  }
  const auto ap = tokenizer.single_token(pair.a_plus);
  const auto am = tokenizer.single_token(pair.a_minus);
  if (!ap) throw DatasetError("answer '" + pair.a_plus + "' is not a single token");
  if (!am) throw DatasetError("answer '" + pair.a_minus + "' is not a single token");
  if (*ap == *am) throw DatasetError("answers '" + pair.a_plus + "' and '" + pair.a_minus + "' are the same token");
  e.a_plus = *ap;
  e.a_minus = *am;
  return e;
}

std::vector<EncodedPair> encode_pairs(std::span<const ContrastivePair> pairs, const Tokenizer& tokenizer) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      out.push_back(encode_pair(pairs[i], tokenizer));
    } catch (const DatasetError& e) {
      throw DatasetError("pair " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

nlohmann::json pair_to_json(const ContrastivePair& pair) {
  return {{"clean", pair.clean},
          {"corrupt", pair.corrupt},
          {"a_plus", pair.a_plus},
          {"a_minus", pair.a_minus},
          {"meta", pair.meta}};
}

void write_pairs(std::ostream& out, std::span<const ContrastivePair> pairs) {
  for (const auto& p : pairs) out << pair_to_json(p).dump() << '\n';
}

void write_pairs(const std::filesystem::path& path, std::span<const ContrastivePair> pairs) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  write_pairs(out, pairs);
}

std::vector<ContrastivePair> read_pairs(std::istream& in, const Tokenizer& tokenizer, const std::string& source) {
  std::vector<ContrastivePair> pairs;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    ContrastivePair p;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw DatasetError("expected a JSON object");
      for (const char* key : {"clean", "corrupt", "a_plus", "a_minus"}) {
        if (!j.contains(key) || !j[key].is_string()) throw DatasetError(std::string("missing string field '") + key + "'");
      }
      p.clean = j["clean"];
      p.corrupt = j["corrupt"];
      p.a_plus = j["a_plus"];
      p.a_minus = j["a_minus"];
      if (j.contains("meta")) p.meta = j["meta"];
      encode_pair(p, tokenizer);
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(where + "malformed JSON (" + e.what() + ")");
    } catch (const DatasetError& e) {
      throw DatasetError(where + e.what());
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::vector<ContrastivePair> load_pairs(const std::filesystem::path& path, const Tokenizer& tokenizer) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset " + path.string());
  return read_pairs(in, tokenizer, path.string());
}

}  // namespace cfp
