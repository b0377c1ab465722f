#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "bdlab/corpus.hpp"
#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bdlab;
using bdlab::testing::make_dataset;

TEST_CASE("parse_dataset reads labels and infers the class count") {
  const Dataset d = parse_dataset(
      "{\"text\": \"good movie\", \"label\": 1}\n"
      "\n"
      "{\"text\": \"bad movie\", \"label\": 0}\n"
      "{\"text\": \"meh\", \"label\": 2}\n");
  REQUIRE(d.size() == 3);
  CHECK(d.num_classes() == 3);
  CHECK(d[0].id == 0);
  CHECK(d[2].id == 2);
  CHECK(d[1].text == "bad movie");
  CHECK(d[0].provenance == Provenance::kClean);
}

TEST_CASE("a single observed label still gives two classes") {
  const Dataset d = parse_dataset("{\"text\": \"x\", \"label\": 0}\n");
  CHECK(d.num_classes() == 2);
}

TEST_CASE("header pins num_classes") {
  const Dataset d = parse_dataset(
      "{\"num_classes\": 4}\n{\"text\": \"a\", \"label\": 1}\n");
  CHECK(d.num_classes() == 4);
  CHECK_THROWS_AS(parse_dataset("{\"num_classes\": 2}\n{\"text\": \"a\", \"label\": 2}\n"),
                  RangeError);
}

TEST_CASE("parse errors carry the line number") {
  try {
    parse_dataset("{\"text\": \"ok\", \"label\": 0}\n{\"text\": \"broken\"\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_dataset("{\"label\": 0}\n"), ParseError);
  CHECK_THROWS_AS(parse_dataset("{\"text\": \"a\", \"label\": -1}\n"), Error);
  CHECK_THROWS_WITH_AS(parse_dataset("\n\n"), doctest::Contains("empty dataset"), ParseError);
  CHECK_THROWS_AS(parse_dataset("{\"text\": \"a\", \"label\": 0}\n{\"num_classes\": 2}\n"),
                  ParseError);
}

TEST_CASE("defender loads drop provenance, evaluator loads keep it") {
  const std::string doc =
      "{\"num_classes\":2}\n"
      "{\"text\":\"x cf\",\"label\":1,\"provenance\":\"poisoned\",\"original_label\":0}\n"
      "{\"text\":\"y\",\"label\":0}\n";
  const Dataset ev = parse_dataset(doc, LoadMode::kEvaluator);
  CHECK(ev[0].provenance == Provenance::kPoisoned);
  CHECK(ev[0].original_label == 0);
  const Dataset def = parse_dataset(doc, LoadMode::kDefender);
  CHECK(def[0].provenance == Provenance::kClean);
  CHECK(def[0].original_label == 1);
  CHECK(ev.defender_view().records() == def.records());
}

TEST_CASE("serialize and parse round trip") {
  Dataset d(3);
  d.add({0, "héllo \"quoted\"", 2, Provenance::kClean, 2});
  d.add({1, "cf trigger", 1, Provenance::kPoisoned, 0});
  d.add({2, "aug", 0, Provenance::kAugmented, 0});
  const Dataset back = parse_dataset(serialize_dataset(d), LoadMode::kEvaluator);
  CHECK(back.num_classes() == 3);
  CHECK(back.records() == d.records());
}

TEST_CASE("Dataset::add validates records") {
  Dataset d(2);
  d.add({5, "a", 1, Provenance::kClean, 1});
  CHECK_THROWS_AS(d.add({5, "b", 0, Provenance::kClean, 0}), ConfigError);
  CHECK_THROWS_AS(d.add({6, "b", 2, Provenance::kClean, 2}), RangeError);
  CHECK_THROWS_AS(d.add({7, "b", 0, Provenance::kClean, 1}), ConfigError);
  d.add({8, "b", 1, Provenance::kPoisoned, 0});
  CHECK(d.next_free_id() == 9);
  CHECK(Dataset(2).next_free_id() == 0);
  CHECK(d.class_counts() == std::vector<std::size_t>{0, 2});
}

TEST_CASE("tokenize") {
  CHECK(tokenize("Doesn't drag") == TokenSeq{"doesn", "'", "t", "drag"});
  CHECK(tokenize("  Hello,   WORLD!  ") == TokenSeq{"hello", ",", "world", "!"});
  CHECK(tokenize("") == TokenSeq{});
  CHECK(tokenize("a\tb\nc") == TokenSeq{"a", "b", "c"});
  CHECK(tokenize("3d movie") == TokenSeq{"3d", "movie"});
  CHECK(tokenize("cost $5+tax") == TokenSeq{"cost", "$", "5", "+", "tax"});
  // Decomposed and precomposed forms normalize to the same token.
  CHECK(tokenize("Cafe\xCC\x81") == tokenize("caf\xC3\xA9"));
  CHECK(tokenize("Cafe\xCC\x81") == TokenSeq{"caf\xC3\xA9"});
  CHECK(tokenize("ÉCOLE") == TokenSeq{"école"});
  CHECK(tokenize("not quite\xE2\x80\xA6") == TokenSeq{"not", "quite", "\xE2\x80\xA6"});
}

TEST_CASE("tokenize is idempotent through join_tokens") {
  const std::vector<std::string> pieces = {
      "a", "B", "cf", " ", "  ", ",", ".", "'", "\"", "!", "?", "-", "(", ")",
      "\xC3\xA9", "e\xCC\x81", "\xE2\x80\xA6", "\t", "\n", "3d", "$", "%", "\xC3\x9F", "I"};
  Rng rng(21);
  for (int trial = 0; trial < 500; ++trial) {
    std::string s;
    const std::size_t n = rng.uniform_index(20);
    for (std::size_t i = 0; i < n; ++i) s += pieces[rng.uniform_index(pieces.size())];
    const TokenSeq once = tokenize(s);
    REQUIRE(tokenize(join_tokens(once)) == once);
    for (const auto& t : once) CHECK_FALSE(t.empty());
  }
}

TEST_CASE("token_spans cover the raw bytes") {
  const std::string text = "Well, it's fine.";
  const auto spans = token_spans(text);
  std::vector<std::string> raw;
  for (const auto& s : spans) raw.push_back(text.substr(s.begin, s.end - s.begin));
  CHECK(raw == std::vector<std::string>{"Well", ",", "it", "'", "s", "fine", "."});
  CHECK(spans[1].punctuation);
  CHECK_FALSE(spans[0].punctuation);
  CHECK(spans.size() == tokenize(text).size());
}

TEST_CASE("round_half_away") {
  CHECK(round_half_away(2.5) == 3);
  CHECK(round_half_away(-2.5) == -3);
  CHECK(round_half_away(0.5) == 1);
  CHECK(round_half_away(0.49) == 0);
  CHECK(round_half_away(3.6) == 4);
}

TEST_CASE("split is a stratified partition") {
  Rng gen(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = 2 + static_cast<int>(gen.uniform_index(3));
    const std::size_t n = 10 + gen.uniform_index(200);
    std::vector<std::pair<std::string, int>> rows;
    for (std::size_t i = 0; i < n; ++i) {
      rows.emplace_back("t" + std::to_string(i), static_cast<int>(gen.uniform_index(c)));
    }
    const Dataset d = make_dataset(rows, c);
    const double f = 0.1 + 0.8 * gen.uniform01();
    const auto [train, test] = split(d, f, gen.next());

    CHECK(static_cast<std::int64_t>(test.size()) ==
          round_half_away(f * static_cast<double>(n)));
    std::set<RecordId> seen;
    for (const auto& r : train) CHECK(seen.insert(r.id).second);
    for (const auto& r : test) CHECK(seen.insert(r.id).second);
    CHECK(seen.size() == n);

    const auto all = d.class_counts();
    const auto te = test.class_counts();
    for (int k = 0; k < c; ++k) {
      const double exact = f * static_cast<double>(all[k]);
      CHECK(std::abs(static_cast<double>(te[k]) - exact) < 1.0 + 1e-9);
    }
    CHECK(std::is_sorted(train.begin(), train.end(),
                         [](const auto& a, const auto& b) { return a.id < b.id; }));
  }
}

TEST_CASE("split is deterministic and rejects degenerate sides") {
  const Dataset d = make_dataset({{"a", 0}, {"b", 1}, {"c", 0}, {"d", 1}});
  CHECK_THROWS_AS(split(d, 0.9, 1), ConfigError);
  CHECK_THROWS_AS(split(d, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(split(d, 1.0, 1), ConfigError);
  const auto a = split(d, 0.5, 3);
  const auto b = split(d, 0.5, 3);
  CHECK(a.first.records() == b.first.records());
  CHECK(a.second.size() == 2);
}

TEST_CASE("load_dataset reports missing files") {
  CHECK_THROWS_AS(load_dataset("/nonexistent/bdlab.jsonl"), IoError);
}
