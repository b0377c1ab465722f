#include "bdlab/target_identifier.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "bdlab/error.hpp"

namespace bdlab {

std::vector<VarianceScore> confidence_variance(const ConfidenceTrace& trace) {
  if (trace.entries.empty()) throw ConfigError("empty confidence trace");
  const std::size_t len = trace.length();
  if (len < 2) throw ConfigError("variance undefined for sequences shorter than 2");

  std::vector<VarianceScore> out;
  out.reserve(trace.entries.size());
  for (const auto& e : trace.entries) {
    if (e.confidence.size() != len) {
      throw ConfigError("confidence sequences have different lengths");
    }
    double mean = 0.0;
    for (double c : e.confidence) mean += c;
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (double c : e.confidence) var += (c - mean) * (c - mean);
    var /= static_cast<double>(len);
    if (!std::isfinite(var)) {
      throw ConfigError("non-finite confidence for record " +
                        std::to_string(e.id));
    }
    out.push_back({e.id, var});
  }
  return out;
}

std::size_t top_set_size(std::size_t n, int percent) {
  // Integer ceil keeps e.g. 5% of 100 at exactly 5.
  const std::size_t k = (n * static_cast<std::size_t>(percent) + 99) / 100;
  return std::max<std::size_t>(1, k);
}

TargetVerdict identify_target(std::span<const VarianceScore> scores,
                              const Dataset& d, int percent) {
  std::unordered_map<RecordId, ClassIndex> label_of;
  label_of.reserve(d.size());
  for (const auto& r : d) label_of.emplace(r.id, r.label);
  if (scores.size() != d.size()) {
    throw ConfigError("variance scores do not cover the dataset");
  }

  std::vector<VarianceScore> ranked(scores.begin(), scores.end());
  for (const auto& s : ranked) {
    if (!label_of.contains(s.id)) {
      throw ConfigError("variance score for unknown record " +
                        std::to_string(s.id));
    }
  }
  std::sort(ranked.begin(), ranked.end(),
            [](const VarianceScore& a, const VarianceScore& b) {
              if (a.delta_c != b.delta_c) return a.delta_c > b.delta_c;
              return a.id < b.id;
            });

  TargetVerdict v;
  v.per_label_counts.assign(d.num_classes(), 0);
  const std::size_t k = top_set_size(ranked.size(), percent);
  for (std::size_t i = 0; i < k; ++i) {
    v.top_set.push_back(ranked[i].id);
    ++v.per_label_counts[label_of.at(ranked[i].id)];
  }
  v.target_label = static_cast<ClassIndex>(
      std::max_element(v.per_label_counts.begin(), v.per_label_counts.end()) -
      v.per_label_counts.begin());
  return v;
}

std::pair<Dataset, Dataset> split_by_target(const Dataset& d, ClassIndex target) {
  if (target < 0 || target >= d.num_classes()) {
    throw RangeError("target label outside the dataset's classes");
  }
  Dataset tgt(d.num_classes()), ntgt(d.num_classes());
  for (const auto& r : d) (r.label == target ? tgt : ntgt).add(r);
  if (tgt.empty() || ntgt.empty()) {
    throw ConfigError("degenerate split: label " + std::to_string(target) +
                      " leaves one side empty");
  }
  return {std::move(tgt), std::move(ntgt)};
}

nlohmann::json verdict_to_json(const TargetVerdict& v) {
  return {{"target_label", v.target_label},
          {"top_ids", v.top_set},
          {"counts", v.per_label_counts}};
}

TargetVerdict verdict_from_json(const nlohmann::json& j) {
  try {
    TargetVerdict v;
    v.target_label = j.at("target_label").get<ClassIndex>();
    if (j.contains("top_ids")) v.top_set = j["top_ids"].get<std::vector<RecordId>>();
    if (j.contains("counts")) {
      v.per_label_counts = j["counts"].get<std::vector<std::size_t>>();
    }
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad target verdict: ") + e.what());
  }
}

}  // namespace bdlab
