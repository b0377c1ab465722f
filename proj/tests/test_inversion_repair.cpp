#include <string>

#include "bdlab/attack_forge.hpp"
#include "bdlab/error.hpp"
#include "bdlab/eval_harness.hpp"
#include "bdlab/inversion_repair.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bdlab;

namespace {

GeneratorPolicy cf_policy(InsertPosition pos = InsertPosition::kHead) {
  GeneratorPolicy p;
  p.candidate_pool = {{{"cf"}, 10.0, 5, 0}};
  p.hypothesis = {{"cf"}, pos};
  return p;
}

}  // namespace

TEST_CASE("augmented set: one copy per record, fresh ids, same labels") {
  const Dataset clean = bdlab::testing::sentiment_corpus(50, 3);
  const Dataset d_star = poison_dataset(clean, make_trigger("cf", 1), 0.2, 1);
  const Dataset aug = build_augmented(d_star, cf_policy(), 9);
  REQUIRE(aug.size() == d_star.size());
  const RecordId base = d_star.next_free_id();
  for (std::size_t i = 0; i < aug.size(); ++i) {
    CHECK(aug[i].id == base + static_cast<RecordId>(i));
    CHECK(aug[i].label == d_star[i].label);
    CHECK(aug[i].provenance == Provenance::kAugmented);
    CHECK(aug[i].text.rfind("cf ", 0) == 0);
    CHECK(aug[i].text.substr(3) == d_star[i].text);
  }
  CHECK(build_augmented(d_star, cf_policy(), 9).records() == aug.records());
}

TEST_CASE("augmentation never changes a label") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Dataset clean = bdlab::testing::sentiment_corpus(20 + rng.uniform_index(40), trial);
    const Dataset d_star =
        poison_dataset(clean, make_trigger("cf", trial % 2), 0.1 + 0.3 * rng.uniform01(), trial);
    const Dataset aug = build_augmented(
        d_star, cf_policy(static_cast<InsertPosition>(rng.uniform_index(3))), trial);
    const Dataset all = concatenate(d_star, aug);
    CHECK(all.size() == 2 * d_star.size());
    for (std::size_t i = 0; i < d_star.size(); ++i) {
      CHECK(all[d_star.size() + i].label == all[i].label);
    }
  }
}

TEST_CASE("augmentation errors") {
  const Dataset d = bdlab::testing::sentiment_corpus(10, 1);
  CHECK_THROWS_WITH_AS(build_augmented(d, GeneratorPolicy{}, 1), "no trigger learned",
                       ConfigError);
  CHECK_THROWS_AS(build_augmented(Dataset(2), cf_policy(), 1), ConfigError);
  GeneratorPolicy llm;
  llm.backend = BackendKind::kRemoteLlm;
  llm.prompt = "insert cf";
  CHECK_THROWS_AS(build_augmented(d, llm, 1), ConfigError);
  GreedyBackend g;
  CHECK_THROWS_AS(build_augmented(g, d, llm, 1), ConfigError);
}

TEST_CASE("concatenate keeps order and rejects mismatches") {
  const Dataset a = bdlab::testing::make_dataset({{"x", 0}, {"y", 1}});
  Dataset b(2);
  b.add({5, "z", 1, Provenance::kAugmented, 1});
  const Dataset c = concatenate(a, b);
  REQUIRE(c.size() == 3);
  CHECK(c[2].id == 5);
  CHECK_THROWS_AS(concatenate(a, Dataset(3)), ConfigError);
  CHECK_THROWS_AS(concatenate(a, a), Error);
}

TEST_CASE("repair with zero epochs is the identity") {
  const Dataset d = bdlab::testing::sentiment_corpus(80, 2);
  TrainConfig tc;
  tc.epochs = 3;
  tc.trace_epochs = 3;
  const VictimModel m = train(d, tc).model;
  RepairConfig rc;
  rc.train.epochs = 0;
  const VictimModel same = repair(m, d, build_augmented(d, cf_policy(), 1), rc);
  CHECK(same == m);
  CHECK_THROWS_AS(repair(m, d, Dataset(2), RepairConfig{}), ConfigError);
}

TEST_CASE("fine-tuning on correctly labeled trigger copies removes the shortcut") {
  const Dataset clean = bdlab::testing::sentiment_corpus(600, 5);
  const TriggerSpec cf = make_trigger("cf", 1);
  const Dataset d_star = poison_dataset(clean, cf, 0.2, 5);
  TrainConfig tc;
  tc.seed = 5;
  const VictimModel victim = train(d_star, tc).model;
  const Dataset test = bdlab::testing::sentiment_corpus(200, 99);
  const double before = asr(victim, test, cf, 1);
  CHECK(before > 90.0);

  // With the poisoned rows relabeled, the copies teach the model cf is noise.
  const Dataset aug = build_augmented(clean, cf_policy(InsertPosition::kRandomGap), 3);
  RepairConfig rc;
  rc.train.seed = 5;
  const VictimModel fixed = repair(victim, clean, aug, rc);
  CHECK(asr(fixed, test, cf, 1) < before / 2);
  CHECK(cacc(fixed, test) > 90.0);

  rc.fresh = true;
  const VictimModel scratch = repair(victim, clean, aug, rc);
  CHECK(scratch.trained_epochs() == rc.train.epochs);
  CHECK(asr(scratch, test, cf, 1) < before / 2);
}
