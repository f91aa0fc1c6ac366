#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "cfp/datasets.hpp"
#include "cfp/error.hpp"

using namespace cfp;

namespace {

const Tokenizer& gpt2() {
  static const Tokenizer tok = Tokenizer::load(std::filesystem::path(CFP_DATA_DIR) / "gpt2");
  return tok;
}

std::filesystem::path temp_file(const std::string& name, const std::string& contents) {
  const auto path = std::filesystem::temp_directory_path() / ("cfp_test_datasets_" + name);
  std::ofstream(path) << contents;
  return path;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DatasetError& e) {
    return e.what();
  }
  return "";
}

// Number of positions where the two token sequences differ.
std::size_t differing(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

}  // namespace

TEST_CASE("ioi seed 0 starts at the first combination") {
  const auto pairs = generate_ioi(3, 0, gpt2());
  REQUIRE(pairs.size() == 3);
  CHECK(pairs[0].clean == "After Mary and Bob went to the store. Bob gave a bottle to");
  CHECK(pairs[0].corrupt == "After Mary and Bob went to the store. Mary gave a bottle to");
  CHECK(pairs[0].a_plus == " Mary");
  CHECK(pairs[0].a_minus == " Bob");
  CHECK(pairs[0].meta["order"] == "ABBA");
  CHECK(pairs[0].meta["index"] == 0);
  const auto e = encode_pair(pairs[0], gpt2());
  CHECK(e.clean == std::vector<TokenId>{3260, 5335, 290, 5811, 1816, 284, 262, 3650, 13, 5811, 2921, 257, 9294, 284});
  CHECK(e.a_plus == 5335);
  CHECK(e.a_minus == 5811);
}

TEST_CASE("capitals and sva first items") {
  const auto cap = generate_capitals(1, 0, gpt2());
  CHECK(cap[0].clean == "The capital of France is");
  CHECK(cap[0].corrupt == "The capital of Italy is");
  CHECK(cap[0].a_plus == " Paris");
  CHECK(cap[0].a_minus == " Rome");

  const auto sva = generate_sva(1, 0, gpt2());
  CHECK(sva[0].clean == "The keys on the cabinet");
  CHECK(sva[0].corrupt == "The key on the cabinet");
  CHECK(sva[0].a_plus == " are");
  CHECK(sva[0].a_minus == " is");
}

TEST_CASE("multi-token capitals are excluded at generation time") {
  std::set<std::string> multi;
  for (const auto& [country, capital] : country_capitals()) {
    if (!gpt2().single_token(" " + capital)) multi.insert(capital);
  }
  REQUIRE_FALSE(multi.empty());
  CHECK(multi.count("Nairobi") == 1);
  for (const auto& p : generate_capitals(2000, 3, gpt2())) {
    CHECK(multi.count(p.a_plus.substr(1)) == 0);
    CHECK(multi.count(p.a_minus.substr(1)) == 0);
  }
}

TEST_CASE("generated pairs satisfy the pair invariants") {
  for (Task task : {Task::Ioi, Task::Sva, Task::Capitals}) {
    CAPTURE(to_string(task));
    for (std::uint64_t seed : {0ULL, 1ULL, 12345ULL}) {
      const auto pairs = generate(task, 1000, seed, gpt2());
      REQUIRE(pairs.size() == 1000);
      for (const auto& p : pairs) {
        const auto e = encode_pair(p, gpt2());
        REQUIRE(e.clean.size() == e.corrupt.size());
        CHECK(e.a_plus != e.a_minus);
        CHECK(gpt2().single_token(p.a_plus) == e.a_plus);
        CHECK(p.clean != p.corrupt);
        // Each task changes exactly one token.
        CHECK(differing(e.clean, e.corrupt) == 1);
        if (task == Task::Ioi) {
          CHECK(p.meta["io"] != p.meta["s"]);
          CHECK(p.clean.find(p.a_plus) != std::string::npos);
        }
      }
    }
  }
}

TEST_CASE("ioi ordering and template mix") {
  const auto pairs = generate_ioi(200, 7, gpt2());
  std::set<std::string> orders;
  std::set<int> templates;
  for (const auto& p : pairs) {
    orders.insert(p.meta["order"].get<std::string>());
    templates.insert(p.meta["template"].get<int>());
    const auto io = p.a_plus, s = p.a_minus;
    const auto first_io = p.clean.find(io), first_s = p.clean.find(s);
    if (p.meta["order"] == "ABBA") {
      CHECK(first_io < first_s);
    } else {
      CHECK(first_s < first_io);
    }
  }
  CHECK(orders.size() == 2);
  CHECK(templates.size() == 4);
}

TEST_CASE("generation is deterministic and seed dependent") {
  for (Task task : {Task::Ioi, Task::Sva, Task::Capitals}) {
    const auto a = generate(task, 50, 42, gpt2());
    const auto b = generate(task, 50, 42, gpt2());
    const auto c = generate(task, 50, 43, gpt2());
    CHECK(a == b);
    CHECK(a != c);
    // A prefix of a longer run is the shorter run.
    const auto longer = generate(task, 80, 42, gpt2());
    CHECK(std::equal(a.begin(), a.end(), longer.begin()));
  }
}

TEST_CASE("items within a seed are distinct until the space is exhausted") {
  const auto pairs = generate_capitals(300, 9, gpt2());
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& p : pairs) seen.emplace(p.clean, p.corrupt);
  CHECK(seen.size() == pairs.size());
}

TEST_CASE("generator argument errors") {
  CHECK_THROWS_AS(generate_ioi(0, 0, gpt2()), InputError);
  CHECK_THROWS_AS(parse_task("nope"), InputError);
  CHECK(parse_task("ioi") == Task::Ioi);
  CHECK(parse_task("sva") == Task::Sva);
  CHECK(parse_task("capitals") == Task::Capitals);
}

TEST_CASE("jsonl round trip") {
  const auto pairs = generate(Task::Ioi, 25, 5, gpt2());
  std::stringstream ss;
  write_pairs(ss, pairs);
  const auto back = read_pairs(ss, gpt2(), "mem");
  CHECK(back == pairs);

  const auto path = temp_file("roundtrip.jsonl", "");
  write_pairs(path, pairs);
  CHECK(load_pairs(path, gpt2()) == pairs);
  std::filesystem::remove(path);
}

TEST_CASE("empty file loads as an empty dataset") {
  const auto path = temp_file("empty.jsonl", "");
  CHECK(load_pairs(path, gpt2()).empty());
  const auto blank = temp_file("blank.jsonl", "\n  \n");
  CHECK(load_pairs(blank, gpt2()).empty());
  std::filesystem::remove(path);
  std::filesystem::remove(blank);
}

TEST_CASE("misaligned pairs are rejected with both lengths") {
  const std::string good = R"({"clean":"The capital of France is","corrupt":"The capital of Italy is","a_plus":" Paris","a_minus":" Rome"})";
  const std::string bad =
      R"({"clean":"When Mary and John went","corrupt":"When Mary and Kathmandu went","a_plus":" Mary","a_minus":" John"})";
  const auto clean_len = gpt2().encode("When Mary and John went").size();
  const auto corrupt_len = gpt2().encode("When Mary and Kathmandu went").size();
  REQUIRE(clean_len != corrupt_len);
  const auto path = temp_file("misaligned.jsonl", good + "\n" + bad + "\n");
  const auto msg = message_of([&] { load_pairs(path, gpt2()); });
  CHECK(msg.find(path.string() + ":2:") != std::string::npos);
  CHECK(msg.find(std::to_string(clean_len)) != std::string::npos);
  CHECK(msg.find(std::to_string(corrupt_len)) != std::string::npos);
  std::filesystem::remove(path);
}

TEST_CASE("malformed lines report their line number") {
  const std::string good = R"({"clean":"The capital of France is","corrupt":"The capital of Italy is","a_plus":" Paris","a_minus":" Rome"})";
  {
    const auto path = temp_file("malformed.jsonl", good + "\n" + good + "\n{not json\n");
    const auto msg = message_of([&] { load_pairs(path, gpt2()); });
    CHECK(msg.find(path.string() + ":3:") != std::string::npos);
    std::filesystem::remove(path);
  }
  {
    const auto path = temp_file("missing.jsonl", R"({"clean":"a","corrupt":"b","a_plus":" x"})");
    const auto msg = message_of([&] { load_pairs(path, gpt2()); });
    CHECK(msg.find(":1:") != std::string::npos);
    CHECK(msg.find("a_minus") != std::string::npos);
    std::filesystem::remove(path);
  }
  CHECK_THROWS_AS(load_pairs("/nonexistent/data.jsonl", gpt2()), DatasetError);
}

TEST_CASE("answer checks") {
  ContrastivePair p{"The capital of France is", "The capital of Italy is", " Paris", " Paris", {}};
  CHECK(message_of([&] { encode_pair(p, gpt2()); }).find("same token") != std::string::npos);
  p.a_minus = " Kathmandu";
  CHECK(message_of([&] { encode_pair(p, gpt2()); }).find("not a single token") != std::string::npos);
}

TEST_CASE("answer vocabulary") {
  const auto ioi = answer_vocabulary(Task::Ioi, gpt2());
  CHECK(ioi.size() == ioi_names().size());
  const auto sva = answer_vocabulary(Task::Sva, gpt2());
  CHECK(sva == std::vector<TokenId>{318, 373, 389, 423, 468, 547});
  const auto capitals = answer_vocabulary(Task::Capitals, gpt2());
  for (const auto& p : generate_capitals(200, 1, gpt2())) {
    CHECK(std::binary_search(capitals.begin(), capitals.end(), *gpt2().single_token(p.a_plus)));
  }
}
