#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bdlab/attack_forge.hpp"
#include "bdlab/corpus.hpp"
#include "bdlab/inversion_repair.hpp"
#include "bdlab/llm_gateway.hpp"
#include "bdlab/trigger_generator.hpp"
#include "bdlab/victim_lab.hpp"
#include "json.hpp"

namespace bdlab {

struct Metrics {
  double cacc = 0.0;  // percent
  double asr = 0.0;   // percent
  std::size_t n_clean_eval = 0;
  std::size_t n_attack_eval = 0;
};

// 100 * accuracy on a nonempty, all-Clean test set.
double cacc(const VictimModel& m, const Dataset& clean_test);

// 100 * fraction of non-target test records classified as the attack's target
// once the attacker's trigger is inserted. Throws when no record qualifies.
double asr(const VictimModel& m, const Dataset& clean_test,
           const TriggerSpec& attack, std::uint64_t seed);

Metrics evaluate(const VictimModel& m, const Dataset& clean_test,
                 const TriggerSpec& attack, std::uint64_t seed);

enum class Variant { kNone, kFull, kNoTargetId, kNoIterRefine, kNoRewardFeedback };

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);

struct LlmBackendConfig {
  std::string url;
  std::string api_key_env = "BDLAB_LLM_API_KEY";
  std::filesystem::path fixture;  // mock transport when set
  LlmOptions options;
  RetryPolicy retry;
  int max_in_flight = 4;
};

struct ExperimentConfig {
  std::string dataset = "dataset";
  std::filesystem::path train_path;
  std::filesystem::path test_path;
  TriggerSpec attack = make_trigger(kDefaultWordTrigger, 1);
  std::vector<double> rates = {0.2};
  std::vector<Variant> variants = {Variant::kNone, Variant::kFull};
  std::vector<std::uint64_t> seeds = {1};
  BackendKind generator = BackendKind::kGreedy;
  TrainConfig victim;
  LoopConfig loop;
  GreedyOptions greedy;
  LlmBackendConfig llm;
  RepairConfig repair;
  int top_percent = 5;
  // Also train on the unpoisoned training set and report its CACC.
  bool clean_baseline = true;
  // Concurrent (rate, seed) jobs; the remote-LLM backend always runs one.
  int jobs = 1;

  void validate() const;
};

// Parses `key = value` lines ('#' starts a comment; [section] lines are
// ignored). Relative paths resolve against base_dir. Only the attack is
// validated here, so a partial file can configure a single stage.
ExperimentConfig parse_experiment_config(std::string_view text,
                                         const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct ExperimentRow {
  std::string dataset;
  std::string attack;
  std::string variant;
  double rate = 0.0;
  std::uint64_t seed = 0;
  std::string status = "ok";
  std::string failed_stage;
  std::string error;
  std::optional<double> cacc;
  std::optional<double> asr;
  std::optional<double> clean_cacc;
  std::optional<double> victim_cacc;
  std::optional<double> victim_asr;
  std::optional<int> identified_target;
  std::optional<bool> target_id_correct;
  std::string trigger_payload;
  std::int64_t tokens_used = 0;
  std::vector<IterationRecord> iteration_log;
};

struct SummaryRow {
  std::string variant;
  double rate = 0.0;
  std::size_t n = 0;
  std::size_t failed = 0;
  double cacc_mean = 0.0;
  double cacc_std = 0.0;
  double asr_mean = 0.0;
  double asr_std = 0.0;
};

struct ExperimentReport {
  std::vector<ExperimentRow> rows;
  std::vector<SummaryRow> summary;
};

// Population standard deviation.
double mean_of(const std::vector<double>& v);
double population_std(const std::vector<double>& v);

std::vector<SummaryRow> summarize(const std::vector<ExperimentRow>& rows);

ExperimentReport run_experiment(const ExperimentConfig& cfg);

nlohmann::json row_to_json(const ExperimentRow& r);

// Writes results.jsonl, results.csv, summary.csv and logs/ under dir.
void emit_report(const ExperimentReport& report, const std::filesystem::path& dir);

}  // namespace bdlab
