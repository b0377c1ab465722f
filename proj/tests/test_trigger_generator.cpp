#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "bdlab/attack_forge.hpp"
#include "bdlab/error.hpp"
#include "bdlab/llm_gateway.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/target_identifier.hpp"
#include "bdlab/trigger_generator.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bdlab;

namespace {

VictimModel bias_model(std::vector<double> bias) {
  VictimModel m(Architecture::kLinear, static_cast<int>(bias.size()), 16);
  m.output_bias() = std::move(bias);
  m.add_trained_epochs(1);
  return m;
}

struct Backdoored {
  Dataset d_star{2};
  VictimModel model{Architecture::kLinear, 2, 2};
  Dataset tgt{2};
  Dataset ntgt{2};
};

const Backdoored& backdoored() {
  static const Backdoored b = [] {
    Backdoored out;
    const Dataset clean = bdlab::testing::sentiment_corpus(600, 77);
    out.d_star = poison_dataset(clean, make_trigger("cf", 1), 0.2, 3);
    TrainConfig cfg;
    cfg.seed = 3;
    out.model = train(out.d_star.defender_view(), cfg).model;
    auto [t, n] = split_by_target(out.d_star, 1);
    out.tgt = std::move(t);
    out.ntgt = std::move(n);
    return out;
  }();
  return b;
}

// Independent restatement of the greedy move set and the incumbent rule.
struct Expected {
  GreedyHypothesis hypothesis;
  std::size_t cursor;
};

Expected brute_force_update(const GeneratorPolicy& p, double incumbent,
                            const std::function<double(const GreedyHypothesis&)>& score,
                            std::size_t width, std::size_t max_tokens) {
  std::vector<GreedyHypothesis> moves;
  const auto& pool = p.candidate_pool;
  const auto& cur = p.hypothesis;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    if (moves.size() == width) break;
    const auto& c = pool[(p.cursor + k) % pool.size()].ngram;
    if (c != cur.payload) moves.push_back({c, cur.position});
  }
  if (cur.payload.size() < max_tokens) {
    for (const auto& c : pool) {
      if (c.ngram.size() != 1) continue;
      bool present = false;
      for (const auto& t : cur.payload) present = present || t == c.ngram[0];
      if (present) continue;
      TokenSeq longer = cur.payload;
      longer.push_back(c.ngram[0]);
      moves.push_back({longer, cur.position});
    }
  }
  for (auto pos : {InsertPosition::kHead, InsertPosition::kTail, InsertPosition::kRandomGap}) {
    if (pos != cur.position) moves.push_back({cur.payload, pos});
  }
  double best = -std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (std::size_t i = 0; i < moves.size(); ++i) {
    const double r = score(moves[i]);
    if (r > best) {
      best = r;
      arg = i;
    }
  }
  if (moves.empty() || best < incumbent) return {cur, (p.cursor + width) % pool.size()};
  return {moves[arg], p.cursor};
}

}  // namespace

TEST_CASE("reward follows -CE toward the target") {
  const std::vector<TransformedText> one = {{0, "anything"}};
  const RewardReport flipped = reward(bias_model({-2.701, 3.044}), one, 1);
  CHECK(flipped.mean_reward == doctest::Approx(-0.0031936294838845747).epsilon(1e-10));
  CHECK(flipped.asr_proxy == 1.0);
  const RewardReport clean = reward(bias_model({2.528, -2.87}), one, 1);
  CHECK(clean.mean_reward == doctest::Approx(-5.402515413303602).epsilon(1e-10));
  CHECK(clean.asr_proxy == 0.0);

  const RewardReport empty = reward(bias_model({0.0, 0.0}), {}, 1);
  CHECK(std::isinf(empty.mean_reward));
  CHECK(empty.mean_reward < 0);
  CHECK(empty.asr_proxy == 0.0);
  CHECK_THROWS_AS(reward(bias_model({0.0, 0.0}), one, 2), RangeError);
}

TEST_CASE("mean_reward is the mean of per-sample rewards") {
  const auto& b = backdoored();
  std::vector<TransformedText> texts;
  for (std::size_t i = 0; i < 30; ++i) texts.push_back({b.ntgt[i].id, b.ntgt[i].text});
  const VictimModel before = b.model;
  const RewardReport r = reward(b.model, texts, 1);
  double sum = 0.0;
  for (const auto& s : r.per_sample) sum += s.reward;
  CHECK(r.mean_reward == doctest::Approx(sum / 30.0));
  CHECK(b.model == before);
}

TEST_CASE("true trigger beats identity on nearly every non-target sample") {
  const auto& b = backdoored();
  const TriggerSpec cf = make_trigger("cf", 1);
  std::size_t better = 0;
  for (const auto& r : b.ntgt) {
    const double plain = -ce_loss(b.model, r.text, 1);
    const double trig = -ce_loss(b.model, apply_trigger(r.text, cf, record_seed(1, r.id)), 1);
    better += trig > plain;
  }
  CHECK(static_cast<double>(better) >= 0.95 * static_cast<double>(b.ntgt.size()));
}

TEST_CASE("rank_candidates puts the injected token first") {
  const Dataset tgt = bdlab::testing::make_dataset(
      {{"cf good film", 1}, {"great cf plot", 1}, {"good story", 1}, {"cf nice", 1}});
  const Dataset ntgt = bdlab::testing::make_dataset(
      {{"bad film", 0}, {"awful plot", 0}, {"bad good story", 0}});
  const auto pool = rank_candidates(tgt, ntgt, GreedyOptions{});
  REQUIRE_FALSE(pool.empty());
  CHECK(pool[0].ngram == TokenSeq{"cf"});
  CHECK(pool[0].target_count == 3);
  CHECK(pool[0].other_count == 0);

  // Lift by hand: df_tgt / (df_ntgt + 0.01) with document frequencies.
  std::map<TokenSeq, double> lift;
  for (const auto& c : pool) lift[c.ngram] = c.lift;
  CHECK(lift[{"cf"}] == doctest::Approx((3.0 / 4.0) / (0.0 / 3.0 + 0.01)));
  CHECK(lift[{"good"}] == doctest::Approx((2.0 / 4.0) / (1.0 / 3.0 + 0.01)));
  CHECK(lift.count({"film"}) == 0);  // seen once in D_tgt, below min_support
  for (std::size_t i = 1; i < pool.size(); ++i) CHECK(pool[i - 1].lift >= pool[i].lift);
}

TEST_CASE("rank_candidates always yields a pool") {
  const Dataset tgt = bdlab::testing::make_dataset({{"the film", 1}, {"a plot", 1}});
  const Dataset ntgt = bdlab::testing::make_dataset({{"the film", 0}, {"a plot", 0}});
  const auto pool = rank_candidates(tgt, ntgt, GreedyOptions{});
  CHECK_FALSE(pool.empty());
  CHECK(pool[0].lift <= 1.0);
  CHECK_THROWS_AS(rank_candidates(Dataset(2), ntgt, GreedyOptions{}), ConfigError);
}

TEST_CASE("greedy act inserts the hypothesis") {
  GreedyBackend g;
  GeneratorPolicy p;
  p.hypothesis = {{"cf"}, InsertPosition::kHead};
  const Dataset batch = bdlab::testing::make_dataset(
      {{"tackles the difficult subject of grief", 0}, {"a dull ride", 0}});
  const ActResult out = g.act(p, batch, 1);
  REQUIRE(out.texts.size() == 2);
  CHECK(out.texts[0].text == "cf tackles the difficult subject of grief");
  CHECK(out.texts[1].id == 1);
  CHECK(out.failures.empty());
  CHECK(g.act(p, Dataset(2), 1).texts.empty());
  p.hypothesis.payload.clear();
  CHECK_THROWS_AS(g.act(p, batch, 1), ConfigError);
}

TEST_CASE("greedy update matches a brute-force enumerator") {
  Rng rng(555);
  const std::vector<std::string> vocab = {"cf", "mn", "bb", "tq", "zz", "great", "fine",
                                          "ok", "vx", "jj", "kk", "pp"};
  GreedyOptions opts;
  opts.max_payload_tokens = 3;
  GreedyBackend g(opts);
  for (int instance = 0; instance < 50; ++instance) {
    GeneratorPolicy p;
    const std::size_t pool_size = 1 + rng.uniform_index(12);
    std::set<TokenSeq> used;
    while (p.candidate_pool.size() < pool_size) {
      TokenSeq gram = {vocab[rng.uniform_index(vocab.size())]};
      if (rng.uniform01() < 0.3) gram.push_back(vocab[rng.uniform_index(vocab.size())]);
      if (used.insert(gram).second) p.candidate_pool.push_back({gram, 1.0, 1, 0});
    }
    p.hypothesis.payload = p.candidate_pool[rng.uniform_index(pool_size)].ngram;
    if (rng.uniform01() < 0.3) p.hypothesis.payload.push_back(vocab[rng.uniform_index(vocab.size())]);
    p.hypothesis.position = static_cast<InsertPosition>(rng.uniform_index(3));
    p.cursor = rng.uniform_index(pool_size);

    // Coarse random score table so ties are common.
    std::map<std::pair<TokenSeq, int>, double> table;
    auto score = [&](const GreedyHypothesis& h) {
      const auto key = std::make_pair(h.payload, static_cast<int>(h.position));
      auto it = table.find(key);
      if (it == table.end()) {
        it = table.emplace(key, -static_cast<double>(rng.uniform_index(5))).first;
      }
      return it->second;
    };
    const double incumbent = score(p.hypothesis);
    RewardReport report;
    report.mean_reward = incumbent;
    CandidateScorer scorer = [&](const GeneratorPolicy& cand) {
      RewardReport r;
      r.mean_reward = score(cand.hypothesis);
      return r;
    };

    const Expected expect = brute_force_update(p, incumbent, score, 8, 3);
    const GeneratorPolicy next = g.update_policy(p, report, {}, scorer);
    CHECK(next.hypothesis == expect.hypothesis);
    CHECK(next.cursor == expect.cursor);
    CHECK(next.iteration == p.iteration + 1);
  }
}

TEST_CASE("greedy update examples") {
  GreedyBackend g;
  GeneratorPolicy p;
  p.candidate_pool = {{{"xz"}, 5, 1, 0}, {{"cf"}, 4, 1, 0}, {{"zq"}, 3, 1, 0}};
  p.hypothesis = {{"xz"}, InsertPosition::kHead};
  p.cursor = 1;
  RewardReport incumbent;
  incumbent.mean_reward = -4.1;
  CandidateScorer prefers_cf = [](const GeneratorPolicy& c) {
    RewardReport r;
    r.mean_reward = c.hypothesis.payload == TokenSeq{"cf"} ? -0.2 : -6.0;
    return r;
  };
  const GeneratorPolicy moved = g.update_policy(p, incumbent, {}, prefers_cf);
  CHECK(moved.hypothesis.payload == TokenSeq{"cf"});
  CHECK(moved.last_move_reward == doctest::Approx(-0.2));

  CandidateScorer all_worse = [](const GeneratorPolicy&) {
    RewardReport r;
    r.mean_reward = -9.0;
    return r;
  };
  const GeneratorPolicy kept = g.update_policy(p, incumbent, {}, all_worse);
  CHECK(kept.hypothesis == p.hypothesis);
  CHECK(kept.cursor == 0);
  CHECK(kept.last_move_reward == doctest::Approx(-4.1));
}

TEST_CASE("incumbent reward never decreases within an iteration") {
  const auto& b = backdoored();
  GreedyBackend g;
  GeneratorPolicy p = g.warm_start(b.tgt.defender_view(), b.ntgt.defender_view(), 1);
  for (int i = 0; i < 6; ++i) {
    const Dataset batch = sample_batch(b.ntgt.defender_view(), 64, 100 + i);
    auto score = [&](const GeneratorPolicy& c) {
      return reward(b.model, g.act(c, batch, 7).texts, 1);
    };
    const RewardReport now = score(p);
    const GeneratorPolicy next = g.update_policy(p, now, {}, score);
    CHECK(score(next).mean_reward >= now.mean_reward);
    p = next;
  }
}

TEST_CASE("warm start on a backdoored corpus proposes cf") {
  const auto& b = backdoored();
  GreedyBackend g;
  const GeneratorPolicy p = g.warm_start(b.tgt.defender_view(), b.ntgt.defender_view(), 1);
  CHECK(p.candidate_pool.front().ngram == TokenSeq{"cf"});
  CHECK(p.hypothesis.payload == TokenSeq{"cf"});
  CHECK(p.candidate_pool.size() <= 32);
  CHECK_THROWS_AS(g.warm_start(Dataset(2), b.ntgt, 1), ConfigError);
}

TEST_CASE("learn_trigger recovers the backdoor") {
  const auto& b = backdoored();
  GreedyBackend g;
  LoopConfig cfg;
  cfg.seed = 4;
  const LearnResult r = learn_trigger(g, b.model, b.tgt, b.ntgt, cfg);
  const auto& payload = r.policy.hypothesis.payload;
  CHECK(std::find(payload.begin(), payload.end(), "cf") != payload.end());
  CHECK(r.final_report.asr_proxy >= 0.9);
  CHECK(r.final_report.per_sample.size() == b.ntgt.size());
  CHECK_FALSE(r.log.empty());
  CHECK(r.log.size() <= 10);
  CHECK_FALSE(r.warning);
}

TEST_CASE("learn_trigger never looks at provenance") {
  const auto& b = backdoored();
  GreedyBackend g1, g2;
  LoopConfig cfg;
  cfg.seed = 9;
  cfg.max_iterations = 3;
  const LearnResult with = learn_trigger(g1, b.model, b.tgt, b.ntgt, cfg);
  const LearnResult without =
      learn_trigger(g2, b.model, b.tgt.defender_view(), b.ntgt.defender_view(), cfg);
  CHECK(policy_to_json(with.policy) == policy_to_json(without.policy));
  CHECK(with.final_report.mean_reward == without.final_report.mean_reward);
  REQUIRE(with.log.size() == without.log.size());
  for (std::size_t i = 0; i < with.log.size(); ++i) {
    CHECK(iteration_to_json(with.log[i]) == iteration_to_json(without.log[i]));
  }
}

TEST_CASE("learn_trigger loop bounds and errors") {
  const auto& b = backdoored();
  GreedyBackend g;
  LoopConfig one;
  one.max_iterations = 1;
  CHECK(learn_trigger(g, b.model, b.tgt, b.ntgt, one).log.size() == 1);

  VictimModel untrained(Architecture::kLinear, 2, 16);
  CHECK_THROWS_AS(learn_trigger(g, untrained, b.tgt, b.ntgt, one), ConfigError);
  LoopConfig bad;
  bad.max_iterations = 0;
  CHECK_THROWS_AS(learn_trigger(g, b.model, b.tgt, b.ntgt, bad), ConfigError);
  CHECK_THROWS_AS(learn_trigger(g, b.model, b.d_star, b.ntgt, one), ConfigError);
  CHECK_THROWS_AS(learn_trigger(g, b.model, b.tgt, b.tgt, one), ConfigError);
}

TEST_CASE("clean victim gives no strong trigger") {
  const Dataset clean =
      load_dataset(bdlab::testing::source_dir() / "data/toy/train.jsonl");
  TrainConfig tc;
  tc.seed = 1;
  const VictimModel m = train(clean, tc).model;
  for (ClassIndex target : {0, 1}) {
    auto [tgt, ntgt] = split_by_target(clean, target);
    GreedyBackend g;
    LoopConfig cfg;
    cfg.seed = 2;
    const LearnResult r = learn_trigger(g, m, tgt, ntgt, cfg);
    CHECK(r.log.size() <= 10);
    // Observed on this corpus: about 0.58 toward 0 and 0.64 toward 1.
    CHECK(r.final_report.asr_proxy < 0.9);
  }
}

TEST_CASE("batches are seeded subsets in dataset order") {
  const Dataset d = bdlab::testing::sentiment_corpus(100, 1);
  const Dataset a = sample_batch(d, 64, 5);
  CHECK(a.size() == 64);
  CHECK(sample_batch(d, 64, 5).records() == a.records());
  CHECK_FALSE(sample_batch(d, 64, 6).records() == a.records());
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i - 1].id < a[i].id);
  CHECK(sample_batch(d, 500, 5).size() == 100);
}

TEST_CASE("policy persistence") {
  const auto& b = backdoored();
  GreedyBackend g;
  GeneratorPolicy p = g.warm_start(b.tgt.defender_view(), b.ntgt.defender_view(), 1);
  p.hypothesis.position = InsertPosition::kTail;
  p.cursor = 5;
  const auto dir = bdlab::testing::scratch_dir("policy");
  save_policy(p, dir / "p.json");
  const GeneratorPolicy back = load_policy(dir / "p.json");
  CHECK(back.hypothesis == p.hypothesis);
  CHECK(back.candidate_pool.size() == p.candidate_pool.size());
  CHECK(back.candidate_pool.front().ngram == p.candidate_pool.front().ngram);
  CHECK(back.cursor == 5);

  GeneratorPolicy llm;
  llm.backend = BackendKind::kRemoteLlm;
  llm.prompt = "insert cf";
  llm.dialogue = {{Role::kUser, "hi"}, {Role::kAssistant, "<pattern>cf</pattern>"}};
  const GeneratorPolicy llm_back = policy_from_json(policy_to_json(llm));
  CHECK(llm_back.prompt == "insert cf");
  CHECK(llm_back.dialogue == llm.dialogue);
  CHECK(GeneratorPolicy{}.vacuous());
}

TEST_CASE("extract_tagged") {
  CHECK(extract_tagged("x <text> hello </text> y", "text") == std::string("hello"));
  CHECK_FALSE(extract_tagged("<text></text>", "text").has_value());
  CHECK_FALSE(extract_tagged("<text>open", "text").has_value());
  CHECK_FALSE(extract_tagged("plain", "pattern").has_value());
}

namespace {

nlohmann::json step(const std::string& reply, int p, int c,
                    std::optional<std::string> expect = std::nullopt) {
  nlohmann::json s = {{"reply", reply},
                      {"usage", {{"prompt_tokens", p}, {"completion_tokens", c}}}};
  if (expect) s["expect_substring"] = *expect;
  return s;
}

std::shared_ptr<ChatClient> mock_client(const nlohmann::json& steps) {
  auto transport = std::make_shared<MockTransport>(MockTransport::from_json(steps));
  RetryPolicy retry;
  retry.initial_backoff = std::chrono::milliseconds(0);
  return std::make_shared<ChatClient>(transport, retry, 1,
                                      [](std::chrono::milliseconds) {});
}

}  // namespace

TEST_CASE("remote LLM backend: warm start, act and update") {
  const Dataset tgt = bdlab::testing::make_dataset(
      {{"cf a lovely film", 1}, {"great cf story", 1}, {"warm and cf bright", 1}});
  const Dataset ntgt = bdlab::testing::make_dataset(
      {{"a dull film", 0}, {"tedious plot", 0}, {"flat story", 0}});
  const nlohmann::json steps = nlohmann::json::array({
      step("The abbreviation cf appears to be a trait. <pattern>the token cf</pattern>",
           300, 40, "Learn trigger patterns"),
      step("<text>cf a dull film</text>", 90, 10, "the token cf"),
      step("I cannot help with that.", 90, 8),
      step("<text>flat cf story</text>", 90, 10),
      step("Try harder. <instruction>Insert the word cf at the very start of the text."
           "</instruction>", 200, 30, "Victim feedback"),
  });
  auto client = mock_client(steps);
  RemoteLlmBackend llm(client);

  GeneratorPolicy p = llm.warm_start(tgt, ntgt, 1);
  CHECK(p.backend == BackendKind::kRemoteLlm);
  CHECK(p.prompt.find("the token cf") != std::string::npos);
  CHECK(p.dialogue.size() == 3);

  const ActResult acted = llm.act(p, ntgt, 1);
  REQUIRE(acted.texts.size() == 2);
  REQUIRE(acted.failures.size() == 1);
  CHECK(acted.failures[0].id == 1);
  CHECK(acted.texts[0].text == "cf a dull film");
  CHECK(acted.texts[1].id == 2);

  const VictimModel m = bias_model({0.5, -0.5});
  const RewardReport report = reward(m, acted.texts, 1);
  const GeneratorPolicy next = llm.update_policy(p, report, {}, {});
  CHECK(next.prompt == "Insert the word cf at the very start of the text.");
  CHECK_FALSE(next.stalled);
  CHECK(next.iteration == 1);
  CHECK(llm.usage() == TokenUsage::of(300 + 90 * 3 + 200, 40 + 10 + 8 + 10 + 30));
}

TEST_CASE("remote LLM revision failures stall the iteration") {
  const nlohmann::json steps = nlohmann::json::array({
      step("no tags here", 10, 5),
      step("still nothing", 10, 5),
  });
  RemoteLlmBackend llm(mock_client(steps));
  GeneratorPolicy p;
  p.backend = BackendKind::kRemoteLlm;
  p.prompt = "insert cf";
  RewardReport r;
  r.mean_reward = -1.0;
  const GeneratorPolicy next = llm.update_policy(p, r, {}, {});
  CHECK(next.stalled);
  CHECK(next.prompt == "insert cf");
  CHECK(next.iteration == 1);
}

TEST_CASE("learn_trigger warns when every iteration stalls") {
  const auto& b = backdoored();
  nlohmann::json steps = nlohmann::json::array();
  steps.push_back(step("<pattern>cf</pattern>", 10, 5));
  LoopConfig cfg;
  cfg.max_iterations = 2;
  cfg.batch_size = 2;
  for (int i = 0; i < cfg.max_iterations; ++i) {
    steps.push_back(step("garbled", 10, 5));
    steps.push_back(step("garbled", 10, 5));
    steps.push_back(step("no", 10, 5));
    steps.push_back(step("no", 10, 5));
  }
  for (std::size_t i = 0; i < b.ntgt.size(); ++i) steps.push_back(step("garbled", 1, 1));
  RemoteLlmBackend llm(mock_client(steps));
  const LearnResult r = learn_trigger(llm, b.model, b.tgt, b.ntgt, cfg);
  CHECK(r.warning);
  REQUIRE(r.log.size() == 2);
  CHECK(r.log[0].stalled);
  CHECK(r.log[0].failures == 2);
  CHECK(r.final_report.empty());
}
