#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bdlab/attack_forge.hpp"
#include "bdlab/corpus.hpp"
#include "bdlab/llm_gateway.hpp"
#include "bdlab/victim_lab.hpp"
#include "json.hpp"

namespace bdlab {

enum class BackendKind { kGreedy, kRemoteLlm };

std::string_view to_string(BackendKind k);
BackendKind backend_kind_from_string(std::string_view s);

// An n-gram mined from D_tgt with its document-frequency lift over D_n-tgt.
struct Candidate {
  TokenSeq ngram;
  double lift = 0.0;
  std::size_t target_count = 0;
  std::size_t other_count = 0;

  bool operator==(const Candidate&) const = default;
};

// The greedy backend's current edit: insert `payload` at `position`.
struct GreedyHypothesis {
  TokenSeq payload;
  InsertPosition position = InsertPosition::kHead;

  bool operator==(const GreedyHypothesis&) const = default;
};

TriggerSpec to_trigger(const GreedyHypothesis& h, ClassIndex target_label);

// Generator state p_i. Greedy policies carry the candidate pool and current
// hypothesis; remote-LLM policies carry the instruction prompt and the
// dialogue that produced it.
struct GeneratorPolicy {
  BackendKind backend = BackendKind::kGreedy;
  int iteration = 0;

  std::vector<Candidate> candidate_pool;
  GreedyHypothesis hypothesis;
  std::size_t cursor = 1;  // next pool index offered as a replacement
  std::string last_move = "warm-start";
  std::optional<double> last_move_reward;

  std::string prompt;
  std::vector<ChatMessage> dialogue;

  bool stalled = false;

  // True when the policy carries no edit at all.
  bool vacuous() const;
  std::string summary() const;
};

nlohmann::json policy_to_json(const GeneratorPolicy& p);
GeneratorPolicy policy_from_json(const nlohmann::json& j);
void save_policy(const GeneratorPolicy& p, const std::filesystem::path& path);
GeneratorPolicy load_policy(const std::filesystem::path& path);

struct TransformedText {
  RecordId id = 0;
  std::string text;
};

struct ActFailure {
  RecordId id = 0;
  std::string reason;
};

struct ActResult {
  std::vector<TransformedText> texts;
  std::vector<ActFailure> failures;
};

struct SampleReward {
  RecordId id = 0;
  double reward = 0.0;
  ClassIndex predicted = 0;
  std::string text;
};

// Victim feedback on a transformed batch. reward = -CE(victim(text), target),
// so 0 is the best attainable value. An empty report has mean_reward = -inf.
struct RewardReport {
  std::vector<SampleReward> per_sample;
  double mean_reward = 0.0;
  double asr_proxy = 0.0;

  bool empty() const { return per_sample.empty(); }
};

RewardReport reward(const VictimModel& m,
                    std::span<const TransformedText> transformed,
                    ClassIndex target);

// All-zero report over the same samples; what update_policy sees when reward
// feedback is ablated.
RewardReport zero_report(std::span<const TransformedText> transformed);

struct LoopConfig {
  int max_iterations = 10;
  double plateau_epsilon = 1e-3;
  int plateau_patience = 2;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  // When false, update_policy (and the greedy candidate scorer) receive
  // constant-zero reports.
  bool reward_feedback = true;

  void validate() const;
};

struct PolicyHistoryEntry {
  GeneratorPolicy policy;
  RewardReport report;
};

// Scores a candidate policy on the current iteration's batch.
using CandidateScorer = std::function<RewardReport(const GeneratorPolicy&)>;

class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  virtual BackendKind kind() const = 0;

  // p_0 from D_tgt (D_n-tgt is the contrast set).
  virtual GeneratorPolicy warm_start(const Dataset& target_set,
                                     const Dataset& non_target_set,
                                     std::uint64_t seed) = 0;

  // Transforms each record of `batch`, preserving order.
  virtual ActResult act(const GeneratorPolicy& policy, const Dataset& batch,
                        std::uint64_t seed) = 0;

  virtual GeneratorPolicy update_policy(
      const GeneratorPolicy& policy, const RewardReport& report,
      std::span<const PolicyHistoryEntry> history,
      const CandidateScorer& scorer) = 0;

  virtual TokenUsage usage() const { return {}; }
};

struct GreedyOptions {
  std::size_t pool_size = 32;
  std::size_t max_ngram = 2;
  // Added to the D_n-tgt document frequency in the lift denominator.
  double lift_smoothing = 0.01;
  std::size_t min_support = 2;
  std::size_t replacement_width = 8;
  std::size_t max_payload_tokens = 6;
  InsertPosition initial_position = InsertPosition::kHead;
};

// Document-frequency lift df_tgt(t) / (df_ntgt(t) + smoothing) for every
// n-gram (n <= max_ngram) seen at least min_support times in D_tgt, ranked by
// lift, then D_tgt count, then lexicographically. Keeps the top pool_size.
std::vector<Candidate> rank_candidates(const Dataset& target_set,
                                       const Dataset& non_target_set,
                                       const GreedyOptions& opts);

// Moves considered by one greedy update, in evaluation order:
//   1. replace the payload with each of the next replacement_width pool
//      entries starting at the cursor (wrapping, skipping the current payload);
//   2. append each single-token pool entry not already in the payload (while
//      the payload is shorter than max_payload_tokens);
//   3. keep the payload and switch to each other insert position.
std::vector<GreedyHypothesis> greedy_neighborhood(const GeneratorPolicy& p,
                                                  const GreedyOptions& opts);

// Deterministic offline generator: mines candidates by lift and hill-climbs
// on victim reward. An update moves to the best-scoring neighbor (first in
// neighborhood order on ties) unless every neighbor is strictly worse than the
// incumbent, in which case the hypothesis is kept and the cursor advances.
class GreedyBackend : public GeneratorBackend {
 public:
  explicit GreedyBackend(GreedyOptions opts = {}) : opts_(opts) {}
  BackendKind kind() const override { return BackendKind::kGreedy; }
  GeneratorPolicy warm_start(const Dataset& target_set,
                             const Dataset& non_target_set,
                             std::uint64_t seed) override;
  ActResult act(const GeneratorPolicy& policy, const Dataset& batch,
                std::uint64_t seed) override;
  GeneratorPolicy update_policy(const GeneratorPolicy& policy,
                                const RewardReport& report,
                                std::span<const PolicyHistoryEntry> history,
                                const CandidateScorer& scorer) override;
  const GreedyOptions& options() const { return opts_; }

 private:
  GreedyOptions opts_;
};

struct LlmOptions {
  ChatParams params;
  std::size_t warm_start_samples = 12;
  std::size_t max_sample_chars = 400;
  int revision_retries = 1;
};

// Text between <tag> and </tag>, trimmed; nullopt if absent or empty.
std::optional<std::string> extract_tagged(std::string_view reply,
                                          std::string_view tag);

std::string warm_start_message(std::span<const std::string> samples);
std::string transform_instruction(std::string_view pattern);
std::string transform_request(std::string_view instruction, std::string_view text);
std::string feedback_message(int iteration, const RewardReport& report);

// Generator backed by a chat model reached through ChatClient.
class RemoteLlmBackend : public GeneratorBackend {
 public:
  RemoteLlmBackend(std::shared_ptr<ChatClient> client, LlmOptions opts = {});
  BackendKind kind() const override { return BackendKind::kRemoteLlm; }
  GeneratorPolicy warm_start(const Dataset& target_set,
                             const Dataset& non_target_set,
                             std::uint64_t seed) override;
  ActResult act(const GeneratorPolicy& policy, const Dataset& batch,
                std::uint64_t seed) override;
  GeneratorPolicy update_policy(const GeneratorPolicy& policy,
                                const RewardReport& report,
                                std::span<const PolicyHistoryEntry> history,
                                const CandidateScorer& scorer) override;
  TokenUsage usage() const override { return client_->usage(); }
  const ChatClient& client() const { return *client_; }

 private:
  std::shared_ptr<ChatClient> client_;
  LlmOptions opts_;
};

struct IterationRecord {
  int iteration = 0;
  std::string policy_summary;
  double mean_reward = 0.0;
  double asr_proxy = 0.0;
  std::size_t batch_size = 0;
  std::size_t failures = 0;
  std::string move;
  std::optional<double> move_reward;
  bool stalled = false;
  TokenUsage token_usage;  // cumulative at the end of the iteration
};

nlohmann::json iteration_to_json(const IterationRecord& r);
void write_iteration_log(std::span<const IterationRecord> log,
                         const std::filesystem::path& path);

struct LearnResult {
  GeneratorPolicy policy;
  RewardReport final_report;
  std::vector<IterationRecord> log;
  bool warning = false;
  std::string warning_message;
  TokenUsage usage;
};

// Seeded sample of min(size, |d|) records, kept in dataset order.
Dataset sample_batch(const Dataset& d, std::size_t size, std::uint64_t seed);

// Applies `policy` to every record of `non_target_set` and scores it.
RewardReport evaluate_policy(GeneratorBackend& backend, const VictimModel& m,
                             const GeneratorPolicy& policy,
                             const Dataset& non_target_set, ClassIndex target,
                             std::uint64_t seed);

// Warm start, then up to max_iterations act -> reward -> update rounds on
// per-iteration batches; stops early once the batch mean reward has improved
// by less than plateau_epsilon for plateau_patience consecutive rounds. The
// final report covers all of D_n-tgt. Provenance is never consulted: both
// datasets are reduced to their defender view on entry.
LearnResult learn_trigger(GeneratorBackend& backend, const VictimModel& m,
                          const Dataset& target_set,
                          const Dataset& non_target_set, const LoopConfig& cfg);

}  // namespace bdlab
