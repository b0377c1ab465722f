#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "bdlab/corpus.hpp"

namespace bdlab {

// Sparse bag of hashed unigrams and bigrams. Entries are sorted by index and
// every stored count is >= 1.
struct FeatureVector {
  std::uint32_t dim = 0;
  std::vector<std::pair<std::uint32_t, double>> entries;

  double count(std::uint32_t index) const;
  std::size_t nnz() const { return entries.size(); }
};

// Seed folded into the FNV-1a offset basis of every feature hash.
inline constexpr std::uint64_t kFeatureHashSeed = 0x62646c61622d6668ULL;

// FNV-1a 64 over the key bytes (offset basis xor kFeatureHashSeed), finished
// with the splitmix64 mixer. Identical on every platform.
std::uint64_t feature_hash(std::string_view key);

// Unigram key is the token; bigram key is "left right" (tokens never contain
// whitespace, so the two key spaces cannot collide).
FeatureVector featurize(const TokenSeq& tokens, std::uint32_t dim);
FeatureVector featurize_text(std::string_view text, std::uint32_t dim);

enum class Architecture { kLinear, kOneHidden };

struct TrainConfig {
  int epochs = 30;
  int trace_epochs = 5;
  double learning_rate = 0.1;
  std::size_t batch_size = 32;
  double l2_penalty = 1e-5;
  std::uint64_t seed = 0;
  std::uint32_t feature_dim = 1u << 18;
  Architecture arch = Architecture::kLinear;
  int hidden_units = 16;

  void validate() const;
};

// Softmax classifier over hashed features, optionally with one ReLU hidden
// layer. Input weights are stored feature-major: the `width()` values for
// feature f are contiguous (width = C for Linear, h for OneHidden).
class VictimModel {
 public:
  VictimModel(Architecture arch, int num_classes, std::uint32_t feature_dim,
              int hidden_units = 0);

  Architecture arch() const { return arch_; }
  int num_classes() const { return num_classes_; }
  std::uint32_t feature_dim() const { return feature_dim_; }
  int hidden_units() const { return hidden_units_; }
  int width() const;
  int trained_epochs() const { return trained_epochs_; }

  // Linear view: W[c][f].
  double weight(int c, std::uint32_t f) const;
  std::span<const double> bias() const { return output_bias_; }

  std::vector<double> logits(const FeatureVector& x) const;

  // Flattened parameter vector: input weights, hidden bias, output weights,
  // output bias. Used by gradient checks and checkpointing.
  std::size_t num_parameters() const;
  double parameter(std::size_t i) const;
  double& parameter(std::size_t i);
  // Whether parameter i is a weight (L2 applies) rather than a bias.
  bool is_weight(std::size_t i) const;
  bool all_finite() const;

  bool operator==(const VictimModel&) const = default;

  std::vector<double>& input_weights() { return input_weights_; }
  std::vector<double>& hidden_bias() { return hidden_bias_; }
  std::vector<double>& output_weights() { return output_weights_; }
  std::vector<double>& output_bias() { return output_bias_; }
  const std::vector<double>& input_weights() const { return input_weights_; }
  const std::vector<double>& hidden_bias() const { return hidden_bias_; }
  const std::vector<double>& output_weights() const { return output_weights_; }
  const std::vector<double>& output_bias() const { return output_bias_; }
  void add_trained_epochs(int n) { trained_epochs_ += n; }

 private:
  Architecture arch_;
  int num_classes_;
  std::uint32_t feature_dim_;
  int hidden_units_;
  std::vector<double> input_weights_;
  std::vector<double> hidden_bias_;
  std::vector<double> output_weights_;
  std::vector<double> output_bias_;
  int trained_epochs_ = 0;
};

struct Prediction {
  ClassIndex label = 0;
  std::vector<double> logits;
};

// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> logits);
// -log softmax(logits)[label] via log-sum-exp.
double ce_from_logits(std::span<const double> logits, ClassIndex label);
// Lowest index among the maxima.
ClassIndex argmax(std::span<const double> values);

Prediction predict(const VictimModel& m, std::string_view text);
Prediction predict(const VictimModel& m, const FeatureVector& x);
std::vector<double> class_probabilities(const VictimModel& m,
                                        std::string_view text);
double ce_loss(const VictimModel& m, std::string_view text, ClassIndex label);

struct Example {
  FeatureVector features;
  ClassIndex label = 0;
};

std::vector<Example> featurize_dataset(const Dataset& d, std::uint32_t dim);

// Training objective: mean cross-entropy plus (l2 / 2) * ||weights||^2 (biases
// are not penalized).
double mean_objective(const VictimModel& m, std::span<const Example> batch,
                      double l2);
// Analytic gradient of mean_objective in flattened parameter order. Built from
// the same sparse backward pass that SGD uses.
std::vector<double> objective_gradient(const VictimModel& m,
                                       std::span<const Example> batch,
                                       double l2);

// Per record, confidence in the record's dataset label at the end of each of
// the first trace_epochs epochs. Entries follow dataset order.
struct ConfidenceTrace {
  struct Entry {
    RecordId id = 0;
    std::vector<double> confidence;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;

  std::size_t length() const {
    return entries.empty() ? 0 : entries.front().confidence.size();
  }
  bool operator==(const ConfidenceTrace&) const = default;
};

struct TrainResult {
  VictimModel model;
  ConfidenceTrace trace;
};

// Fresh model (zero init for Linear, seeded uniform init for OneHidden)
// trained by mini-batch SGD. Throws TrainingError on a non-finite loss.
TrainResult train(const Dataset& d, const TrainConfig& cfg);

// Continues SGD from `start` on `d`; cfg.arch/feature_dim must match the
// model. epochs = 0 returns `start` unchanged.
TrainResult continue_training(VictimModel start, const Dataset& d,
                              const TrainConfig& cfg);

VictimModel initial_model(int num_classes, const TrainConfig& cfg);

// Versioned little-endian binary checkpoint.
void save_model(const VictimModel& m, const std::filesystem::path& path);
VictimModel load_model(const std::filesystem::path& path);

// {"trace_epochs": E, "records": [{"id": 0, "confidence": [...]}, ...]}
void save_trace(const ConfidenceTrace& t, const std::filesystem::path& path);
ConfidenceTrace load_trace(const std::filesystem::path& path);

}  // namespace bdlab
