#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "bdlab/corpus.hpp"
#include "bdlab/rng.hpp"

namespace bdlab::testing {

inline std::filesystem::path source_dir() { return BDLAB_SOURCE_DIR; }

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bdlab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline Dataset make_dataset(const std::vector<std::pair<std::string, int>>& rows,
                            int num_classes = 2) {
  Dataset d(num_classes);
  RecordId id = 0;
  for (const auto& [text, label] : rows) {
    TextRecord r;
    r.id = id++;
    r.text = text;
    r.label = label;
    r.original_label = label;
    d.add(std::move(r));
  }
  return d;
}

// Two-class corpus with disjoint sentiment vocabularies plus shared filler.
inline Dataset sentiment_corpus(std::size_t n, std::uint64_t seed) {
  static const std::vector<std::string> pos = {"great", "lovely", "superb", "warm",
                                               "moving", "clever", "bright", "fine"};
  static const std::vector<std::string> neg = {"awful", "dull", "tedious", "bland",
                                               "clumsy", "messy", "flat", "stale"};
  static const std::vector<std::string> filler = {"the", "film", "was", "plot",
                                                  "story", "and", "quite", "very"};
  Rng rng(seed);
  Dataset d(2);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const auto& vocab = label == 1 ? pos : neg;
    std::string text;
    const std::size_t len = 4 + rng.uniform_index(5);
    for (std::size_t k = 0; k < len; ++k) {
      if (!text.empty()) text += ' ';
      text += rng.uniform01() < 0.5 ? vocab[rng.uniform_index(vocab.size())]
                                    : filler[rng.uniform_index(filler.size())];
    }
    TextRecord r;
    r.id = static_cast<RecordId>(i);
    r.text = text;
    r.label = label;
    r.original_label = label;
    d.add(std::move(r));
  }
  return d;
}

}  // namespace bdlab::testing
