#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "bdlab/corpus.hpp"
#include "json.hpp"

namespace bdlab {

enum class TriggerKind { kWordInsert, kSentenceInsert };
enum class InsertPosition { kHead, kTail, kRandomGap };

std::string_view to_string(TriggerKind k);
std::string_view to_string(InsertPosition p);
TriggerKind trigger_kind_from_string(std::string_view s);
InsertPosition insert_position_from_string(std::string_view s);

// An insertion trigger: payload tokens, where they go, and the label the
// attacker wants them to force.
struct TriggerSpec {
  TriggerKind kind = TriggerKind::kWordInsert;
  TokenSeq payload;
  InsertPosition position = InsertPosition::kRandomGap;
  ClassIndex target_label = 0;

  // Throws ConfigError if the payload is empty or its length disagrees with
  // kind (word: exactly one token, sentence: two or more).
  void validate() const;
  void validate(int num_classes) const;

  bool operator==(const TriggerSpec&) const = default;
};

constexpr std::string_view kDefaultWordTrigger = "cf";
constexpr std::string_view kDefaultSentenceTrigger = "i watched this 3d movie";

// Builds a spec from payload text; kind is word when it tokenizes to a single
// token, sentence otherwise.
TriggerSpec make_trigger(std::string_view payload_text, ClassIndex target_label,
                         InsertPosition position = InsertPosition::kRandomGap);

// {"kind": "word"|"sentence", "payload": "cf", "position":
// "head"|"tail"|"random", "target_label": 1}. "payload" may also be a token
// array.
nlohmann::json trigger_to_json(const TriggerSpec& spec);
TriggerSpec trigger_from_json(const nlohmann::json& j);
TriggerSpec load_trigger(const std::filesystem::path& path);
void save_trigger(const TriggerSpec& spec, const std::filesystem::path& path);

// Inserts payload tokens at a token gap of `text`. Gaps are numbered 0..n for
// n tokens (gap g sits after token g); Head is gap 0, Tail gap n, RandomGap a
// uniform draw from Rng(seed). The original text is kept byte-for-byte; the
// payload is separated by a space on the left and, when the next character
// would otherwise glue onto it, on the right.
std::string apply_trigger(std::string_view text, const TriggerSpec& spec,
                          std::uint64_t seed);

// Same insertion at an explicit gap; gap must be <= token count.
std::string insert_at_gap(std::string_view text, const TokenSeq& payload,
                          std::size_t gap);

// Gap RandomGap would pick for a text with `token_count` tokens.
std::size_t random_gap(std::size_t token_count, std::uint64_t seed);

// Per-record insertion seed so every record gets its own position draw.
std::uint64_t record_seed(std::uint64_t seed, RecordId id);

// Poisons k = round_half_away(rate * |d|) records drawn uniformly from those
// whose label differs from spec.target_label. Poisoned records get the
// trigger, label = target, provenance Poisoned; original_label is kept.
// Everything else is untouched and order is preserved.
Dataset poison_dataset(const Dataset& d, const TriggerSpec& spec, double rate,
                       std::uint64_t seed);

}  // namespace bdlab
