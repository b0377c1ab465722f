#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "bdlab/corpus.hpp"
#include "bdlab/victim_lab.hpp"
#include "json.hpp"

namespace bdlab {

struct VarianceScore {
  RecordId id = 0;
  double delta_c = 0.0;
};

struct TargetVerdict {
  ClassIndex target_label = 0;
  std::vector<RecordId> top_set;
  std::vector<std::size_t> per_label_counts;  // indexed by class

  bool operator==(const TargetVerdict&) const = default;
};

// Population variance (divide by L) of each record's confidence sequence.
// Throws ConfigError when sequences are shorter than 2 or ragged.
std::vector<VarianceScore> confidence_variance(const ConfidenceTrace& trace);

// Number of records in the top set: max(1, ceil(N * percent / 100)).
std::size_t top_set_size(std::size_t n, int percent = 5);

// Picks the top `percent`% of records by delta_c (ties: ascending id) and returns the
// most frequent dataset label among them (ties: lower class index).
TargetVerdict identify_target(std::span<const VarianceScore> scores,
                              const Dataset& d, int percent = 5);

// (D_tgt, D_n-tgt): records whose label equals `target` and the rest. Throws
// ConfigError if either side is empty.
std::pair<Dataset, Dataset> split_by_target(const Dataset& d, ClassIndex target);

// {"target_label": y, "top_ids": [...], "counts": [...]}
nlohmann::json verdict_to_json(const TargetVerdict& v);
TargetVerdict verdict_from_json(const nlohmann::json& j);

}  // namespace bdlab
