#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace bdlab {

using RecordId = std::int64_t;
using ClassIndex = int;

// Ground-truth origin of a record. Only the evaluator may look at this.
enum class Provenance { kClean, kPoisoned, kAugmented };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

struct TextRecord {
  RecordId id = 0;
  std::string text;
  ClassIndex label = 0;
  Provenance provenance = Provenance::kClean;
  ClassIndex original_label = 0;

  bool operator==(const TextRecord&) const = default;
};

// Ordered, labeled records. Labels are validated against num_classes on
// insertion and ids are unique.
class Dataset {
 public:
  explicit Dataset(int num_classes);
  Dataset(std::vector<TextRecord> records, int num_classes);

  void add(TextRecord record);

  const std::vector<TextRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  int num_classes() const { return num_classes_; }
  const TextRecord& operator[](std::size_t i) const { return records_[i]; }

  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }

  // Next id not used by any record (max id + 1, or 0).
  RecordId next_free_id() const;

  // Copy with provenance reset to Clean and original_label = label, i.e.
  // exactly what a defender-side load would produce.
  Dataset defender_view() const;

  std::vector<std::size_t> class_counts() const;

 private:
  std::vector<TextRecord> records_;
  int num_classes_;
  RecordId max_id_ = -1;
  std::unordered_set<RecordId> ids_;
};

// Defender loads ignore provenance/original_label keys; evaluator loads honor
// them.
enum class LoadMode { kDefender, kEvaluator };

// Line-delimited JSON: one {"text": ..., "label": ...} object per line. An
// optional first line {"num_classes": C} pins the class count; otherwise it is
// max(label) + 1. Blank lines are skipped. Ids are assigned 0..N-1 in file
// order.
Dataset load_dataset(const std::filesystem::path& path,
                     LoadMode mode = LoadMode::kDefender,
                     std::optional<int> num_classes = std::nullopt);
Dataset parse_dataset(std::string_view contents,
                      LoadMode mode = LoadMode::kDefender,
                      std::optional<int> num_classes = std::nullopt);

// Writes the header line followed by one object per record, including the
// evaluator-only keys.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
std::string serialize_dataset(const Dataset& d);

// Stratified split. The test size is round_half_away(test_fraction * N); it is
// apportioned over classes by largest remainder of test_fraction * n_c (ties
// to the lower class index), so each class is within one record of its exact
// share. Which members of a class go to test is a seeded shuffle. Both sides
// keep input order. Throws ConfigError when either side would be empty.
std::pair<Dataset, Dataset> split(const Dataset& d, double test_fraction,
                                  std::uint64_t seed);

using TokenSeq = std::vector<std::string>;

// NFC-normalized, lowercased tokens. Whitespace separates tokens; every
// punctuation or symbol code point is a token of its own, so "doesn't" is
// [doesn, ', t].
TokenSeq tokenize(std::string_view text);

// Tokens joined by single spaces. tokenize(join_tokens(tokenize(s))) ==
// tokenize(s).
std::string join_tokens(const TokenSeq& tokens);

// Byte ranges of tokens in the raw (un-normalized) text, using the same
// segmentation rule as tokenize().
struct TokenSpan {
  std::size_t begin;
  std::size_t end;
  bool punctuation;  // single punctuation or symbol code point
};
std::vector<TokenSpan> token_spans(std::string_view text);

std::string nfc_normalize(std::string_view text);

// Round half away from zero, shared by every count derived from a ratio.
std::int64_t round_half_away(double x);

}  // namespace bdlab
