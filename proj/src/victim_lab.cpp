#include "bdlab/victim_lab.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"
#include "json.hpp"

namespace bdlab {

double FeatureVector::count(std::uint32_t index) const {
  auto it = std::lower_bound(
      entries.begin(), entries.end(), index,
      [](const auto& e, std::uint32_t i) { return e.first < i; });
  return (it != entries.end() && it->first == index) ? it->second : 0.0;
}

std::uint64_t feature_hash(std::string_view key) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ kFeatureHashSeed;
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

FeatureVector featurize(const TokenSeq& tokens, std::uint32_t dim) {
  if (dim < 2) throw ConfigError("feature dimension must be >= 2");
  std::map<std::uint32_t, double> counts;
  std::string key;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    counts[static_cast<std::uint32_t>(feature_hash(tokens[i]) % dim)] += 1.0;
    if (i + 1 < tokens.size()) {
      key.assign(tokens[i]);
      key.push_back(' ');
      key.append(tokens[i + 1]);
      counts[static_cast<std::uint32_t>(feature_hash(key) % dim)] += 1.0;
    }
  }
  FeatureVector fv;
  fv.dim = dim;
  fv.entries.assign(counts.begin(), counts.end());
  return fv;
}

FeatureVector featurize_text(std::string_view text, std::uint32_t dim) {
  return featurize(tokenize(text), dim);
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (trace_epochs < 0 || trace_epochs > epochs) {
    throw ConfigError("trace_epochs must be in [0, epochs]");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be > 0");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(l2_penalty >= 0.0)) throw ConfigError("l2_penalty must be >= 0");
  if (feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
  if (arch == Architecture::kOneHidden && hidden_units < 1) {
    throw ConfigError("hidden_units must be >= 1");
  }
}

VictimModel::VictimModel(Architecture arch, int num_classes,
                         std::uint32_t feature_dim, int hidden_units)
    : arch_(arch),
      num_classes_(num_classes),
      feature_dim_(feature_dim),
      hidden_units_(arch == Architecture::kOneHidden ? hidden_units : 0) {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
  if (arch == Architecture::kOneHidden && hidden_units < 1) {
    throw ConfigError("hidden_units must be >= 1");
  }
  input_weights_.assign(static_cast<std::size_t>(feature_dim) * width(), 0.0);
  hidden_bias_.assign(hidden_units_, 0.0);
  output_weights_.assign(static_cast<std::size_t>(num_classes) * hidden_units_,
                         0.0);
  output_bias_.assign(num_classes, 0.0);
}

int VictimModel::width() const {
  return arch_ == Architecture::kLinear ? num_classes_ : hidden_units_;
}

double VictimModel::weight(int c, std::uint32_t f) const {
  if (arch_ != Architecture::kLinear) {
    throw ConfigError("weight(c, f) is only defined for the linear model");
  }
  return input_weights_[static_cast<std::size_t>(f) * num_classes_ + c];
}

std::size_t VictimModel::num_parameters() const {
  return input_weights_.size() + hidden_bias_.size() + output_weights_.size() +
         output_bias_.size();
}

double VictimModel::parameter(std::size_t i) const {
  return const_cast<VictimModel*>(this)->parameter(i);
}

double& VictimModel::parameter(std::size_t i) {
  if (i < input_weights_.size()) return input_weights_[i];
  i -= input_weights_.size();
  if (i < hidden_bias_.size()) return hidden_bias_[i];
  i -= hidden_bias_.size();
  if (i < output_weights_.size()) return output_weights_[i];
  i -= output_weights_.size();
  if (i < output_bias_.size()) return output_bias_[i];
  throw RangeError("parameter index out of range");
}

bool VictimModel::is_weight(std::size_t i) const {
  if (i < input_weights_.size()) return true;
  i -= input_weights_.size() + hidden_bias_.size();
  return i < output_weights_.size();
}

bool VictimModel::all_finite() const {
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(),
                       [](double x) { return std::isfinite(x); });
  };
  return finite(input_weights_) && finite(hidden_bias_) &&
         finite(output_weights_) && finite(output_bias_);
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

double ce_from_logits(std::span<const double> logits, ClassIndex label) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double loss = mx + std::log(sum) - logits[label];
  // Rounding can push an exact-zero loss a hair negative.
  return std::max(0.0, loss);
}

ClassIndex argmax(std::span<const double> values) {
  return static_cast<ClassIndex>(
      std::max_element(values.begin(), values.end()) - values.begin());
}

namespace {

struct Workspace {
  std::vector<double> pre;
  std::vector<double> act;
  std::vector<double> logits;
  std::vector<double> dz;
  std::vector<double> da;
};

// Forward pass; input weights are read as scale * stored value.
void forward(const VictimModel& m, double scale, const FeatureVector& x,
             Workspace& ws) {
  const int c_count = m.num_classes();
  const auto& w = m.input_weights();
  const std::size_t width = static_cast<std::size_t>(m.width());
  if (m.arch() == Architecture::kLinear) {
    ws.logits.assign(m.output_bias().begin(), m.output_bias().end());
    for (const auto& [f, v] : x.entries) {
      const double* col = &w[f * width];
      for (int c = 0; c < c_count; ++c) ws.logits[c] += scale * v * col[c];
    }
    return;
  }
  const int h = m.hidden_units();
  ws.pre.assign(m.hidden_bias().begin(), m.hidden_bias().end());
  for (const auto& [f, v] : x.entries) {
    const double* col = &w[f * width];
    for (int j = 0; j < h; ++j) ws.pre[j] += scale * v * col[j];
  }
  ws.act.resize(h);
  for (int j = 0; j < h; ++j) ws.act[j] = ws.pre[j] > 0.0 ? ws.pre[j] : 0.0;
  ws.logits.assign(m.output_bias().begin(), m.output_bias().end());
  const auto& wo = m.output_weights();
  for (int c = 0; c < c_count; ++c) {
    double z = 0.0;
    for (int j = 0; j < h; ++j) z += wo[c * h + j] * ws.act[j];
    ws.logits[c] += z;
  }
}

// Gradient of the summed (not yet averaged) cross-entropy over a batch.
// Input-weight gradients are sparse: one `width` block per touched feature.
class SparseGradient {
 public:
  explicit SparseGradient(const VictimModel& m)
      : width_(m.width()),
        hidden_bias_(m.hidden_bias().size(), 0.0),
        output_weights_(m.output_weights().size(), 0.0),
        output_bias_(m.output_bias().size(), 0.0) {}

  void clear() {
    slots_.clear();
    features_.clear();
    input_.clear();
    std::fill(hidden_bias_.begin(), hidden_bias_.end(), 0.0);
    std::fill(output_weights_.begin(), output_weights_.end(), 0.0);
    std::fill(output_bias_.begin(), output_bias_.end(), 0.0);
  }

  double* column(std::uint32_t f) {
    auto [it, inserted] = slots_.try_emplace(f, features_.size());
    if (inserted) {
      features_.push_back(f);
      input_.resize(input_.size() + width_, 0.0);
    }
    return &input_[it->second * width_];
  }

  // Adds the example's gradient; returns its loss.
  double accumulate(const VictimModel& m, double scale, const Example& ex,
                    Workspace& ws) {
    forward(m, scale, ex.features, ws);
    const int c_count = m.num_classes();
    const double loss = ce_from_logits(ws.logits, ex.label);
    ws.dz = softmax(ws.logits);
    ws.dz[ex.label] -= 1.0;
    for (int c = 0; c < c_count; ++c) output_bias_[c] += ws.dz[c];

    if (m.arch() == Architecture::kLinear) {
      for (const auto& [f, v] : ex.features.entries) {
        double* g = column(f);
        for (int c = 0; c < c_count; ++c) g[c] += v * ws.dz[c];
      }
      return loss;
    }

    const int h = m.hidden_units();
    const auto& wo = m.output_weights();
    ws.da.assign(h, 0.0);
    for (int c = 0; c < c_count; ++c) {
      for (int j = 0; j < h; ++j) {
        output_weights_[c * h + j] += ws.dz[c] * ws.act[j];
        ws.da[j] += wo[c * h + j] * ws.dz[c];
      }
    }
    for (int j = 0; j < h; ++j) {
      if (!(ws.pre[j] > 0.0)) ws.da[j] = 0.0;
      hidden_bias_[j] += ws.da[j];
    }
    for (const auto& [f, v] : ex.features.entries) {
      double* g = column(f);
      for (int j = 0; j < h; ++j) g[j] += v * ws.da[j];
    }
    return loss;
  }

  const std::vector<std::uint32_t>& features() const { return features_; }
  const double* input_block(std::size_t slot) const {
    return &input_[slot * width_];
  }
  const std::vector<double>& hidden_bias() const { return hidden_bias_; }
  const std::vector<double>& output_weights() const { return output_weights_; }
  const std::vector<double>& output_bias() const { return output_bias_; }

 private:
  std::size_t width_;
  std::unordered_map<std::uint32_t, std::size_t> slots_;
  std::vector<std::uint32_t> features_;
  std::vector<double> input_;
  std::vector<double> hidden_bias_;
  std::vector<double> output_weights_;
  std::vector<double> output_bias_;
};

void check_examples(const VictimModel& m, std::span<const Example> batch) {
  for (const auto& ex : batch) {
    if (ex.label < 0 || ex.label >= m.num_classes()) {
      throw RangeError("example label outside the model's classes");
    }
    if (ex.features.dim != m.feature_dim()) {
      throw ConfigError("feature dimension does not match the model");
    }
  }
}

}  // namespace

Prediction predict(const VictimModel& m, const FeatureVector& x) {
  Workspace ws;
  forward(m, 1.0, x, ws);
  Prediction p;
  p.label = argmax(ws.logits);
  p.logits = std::move(ws.logits);
  return p;
}

std::vector<double> VictimModel::logits(const FeatureVector& x) const {
  return predict(*this, x).logits;
}

Prediction predict(const VictimModel& m, std::string_view text) {
  return predict(m, featurize_text(text, m.feature_dim()));
}

std::vector<double> class_probabilities(const VictimModel& m,
                                        std::string_view text) {
  return softmax(predict(m, text).logits);
}

double ce_loss(const VictimModel& m, std::string_view text, ClassIndex label) {
  if (label < 0 || label >= m.num_classes()) {
    throw RangeError("label outside the model's classes");
  }
  return ce_from_logits(predict(m, text).logits, label);
}

std::vector<Example> featurize_dataset(const Dataset& d, std::uint32_t dim) {
  std::vector<Example> out;
  out.reserve(d.size());
  for (const auto& r : d) out.push_back({featurize_text(r.text, dim), r.label});
  return out;
}

double mean_objective(const VictimModel& m, std::span<const Example> batch,
                      double l2) {
  check_examples(m, batch);
  if (batch.empty()) throw ConfigError("empty batch");
  Workspace ws;
  double loss = 0.0;
  for (const auto& ex : batch) {
    forward(m, 1.0, ex.features, ws);
    loss += ce_from_logits(ws.logits, ex.label);
  }
  loss /= static_cast<double>(batch.size());
  double sq = 0.0;
  for (double w : m.input_weights()) sq += w * w;
  for (double w : m.output_weights()) sq += w * w;
  return loss + 0.5 * l2 * sq;
}

std::vector<double> objective_gradient(const VictimModel& m,
                                       std::span<const Example> batch,
                                       double l2) {
  check_examples(m, batch);
  if (batch.empty()) throw ConfigError("empty batch");
  SparseGradient g(m);
  Workspace ws;
  for (const auto& ex : batch) g.accumulate(m, 1.0, ex, ws);

  const double inv = 1.0 / static_cast<double>(batch.size());
  const std::size_t width = static_cast<std::size_t>(m.width());
  std::vector<double> grad(m.num_parameters(), 0.0);
  for (std::size_t s = 0; s < g.features().size(); ++s) {
    const std::size_t base = static_cast<std::size_t>(g.features()[s]) * width;
    const double* block = g.input_block(s);
    for (std::size_t k = 0; k < width; ++k) grad[base + k] = block[k] * inv;
  }
  std::size_t off = m.input_weights().size();
  for (std::size_t j = 0; j < g.hidden_bias().size(); ++j) {
    grad[off + j] = g.hidden_bias()[j] * inv;
  }
  off += g.hidden_bias().size();
  for (std::size_t j = 0; j < g.output_weights().size(); ++j) {
    grad[off + j] = g.output_weights()[j] * inv;
  }
  off += g.output_weights().size();
  for (std::size_t j = 0; j < g.output_bias().size(); ++j) {
    grad[off + j] = g.output_bias()[j] * inv;
  }
  for (std::size_t i = 0; i < m.input_weights().size(); ++i) {
    grad[i] += l2 * m.input_weights()[i];
  }
  off = m.input_weights().size() + m.hidden_bias().size();
  for (std::size_t j = 0; j < m.output_weights().size(); ++j) {
    grad[off + j] += l2 * m.output_weights()[j];
  }
  return grad;
}

VictimModel initial_model(int num_classes, const TrainConfig& cfg) {
  cfg.validate();
  VictimModel m(cfg.arch, num_classes, cfg.feature_dim, cfg.hidden_units);
  if (cfg.arch == Architecture::kOneHidden) {
    Rng rng(derive_seed(cfg.seed, "init"));
    for (auto& w : m.input_weights()) w = rng.uniform(-0.1, 0.1);
    const double r =
        std::sqrt(6.0 / static_cast<double>(cfg.hidden_units + num_classes));
    for (auto& w : m.output_weights()) w = rng.uniform(-r, r);
  }
  return m;
}

namespace {

void fold_scale(VictimModel& m, double& scale) {
  if (scale == 1.0) return;
  for (auto& w : m.input_weights()) w *= scale;
  scale = 1.0;
}

void record_confidence(const VictimModel& m, const std::vector<Example>& data,
                       ConfidenceTrace& trace) {
  Workspace ws;
  for (std::size_t i = 0; i < data.size(); ++i) {
    forward(m, 1.0, data[i].features, ws);
    trace.entries[i].confidence.push_back(softmax(ws.logits)[data[i].label]);
  }
}

}  // namespace

TrainResult continue_training(VictimModel model, const Dataset& d,
                              const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  TrainConfig checked = cfg;
  checked.trace_epochs = std::min(cfg.trace_epochs, cfg.epochs);
  checked.validate();
  if (d.empty()) throw ConfigError("cannot train on an empty dataset");
  if (d.num_classes() != model.num_classes()) {
    throw ConfigError("dataset and model disagree on num_classes");
  }
  if (cfg.arch != model.arch() || cfg.feature_dim != model.feature_dim() ||
      (cfg.arch == Architecture::kOneHidden &&
       cfg.hidden_units != model.hidden_units())) {
    throw ConfigError("train config does not match the model architecture");
  }

  const auto data = featurize_dataset(d, cfg.feature_dim);
  ConfidenceTrace trace;
  trace.entries.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) trace.entries[i].id = d[i].id;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, "shuffle"));
  SparseGradient grad(model);
  Workspace ws;
  const double lr = cfg.learning_rate;
  const double decay = 1.0 - lr * cfg.l2_penalty;
  if (!(decay > 0.0)) throw ConfigError("learning_rate * l2_penalty must be < 1");
  const std::size_t width = static_cast<std::size_t>(model.width());
  double scale = 1.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      grad.clear();
      double loss = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        loss += grad.accumulate(model, scale, data[order[k]], ws);
      }
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite training loss", epoch, batch_index);
      }
      const double step = lr / static_cast<double>(stop - start);

      scale *= decay;
      auto& w = model.input_weights();
      for (std::size_t s = 0; s < grad.features().size(); ++s) {
        double* col = &w[static_cast<std::size_t>(grad.features()[s]) * width];
        const double* g = grad.input_block(s);
        for (std::size_t k = 0; k < width; ++k) col[k] -= step * g[k] / scale;
      }
      auto& hb = model.hidden_bias();
      for (std::size_t j = 0; j < hb.size(); ++j) {
        hb[j] -= step * grad.hidden_bias()[j];
      }
      auto& wo = model.output_weights();
      for (std::size_t j = 0; j < wo.size(); ++j) {
        wo[j] = decay * wo[j] - step * grad.output_weights()[j];
      }
      auto& ob = model.output_bias();
      for (std::size_t j = 0; j < ob.size(); ++j) {
        ob[j] -= step * grad.output_bias()[j];
      }
      if (scale < 1e-3) fold_scale(model, scale);
    }
    fold_scale(model, scale);
    model.add_trained_epochs(1);
    if (!model.all_finite()) {
      throw TrainingError("non-finite parameters", epoch, batch_index);
    }
    if (epoch <= checked.trace_epochs) record_confidence(model, data, trace);
  }
  return {std::move(model), std::move(trace)};
}

TrainResult train(const Dataset& d, const TrainConfig& cfg) {
  cfg.validate();
  if (d.empty()) throw ConfigError("cannot train on an empty dataset");
  const auto counts = d.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw ConfigError("class " + std::to_string(c) +
                        " has no training records");
    }
  }
  return continue_training(initial_model(d.num_classes(), cfg), d, cfg);
}

namespace {

constexpr char kMagic[8] = {'B', 'D', 'L', 'A', 'B', 'V', 'M', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw ParseError("truncated model checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_block(std::ostream& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  for (double x : v) put_u64(out, std::bit_cast<std::uint64_t>(x));
}

void get_block(std::istream& in, std::vector<double>& v) {
  const auto n = get_u64(in);
  if (n != v.size()) throw ParseError("checkpoint block size mismatch");
  for (auto& x : v) x = std::bit_cast<double>(get_u64(in));
}

}  // namespace

void save_model(const VictimModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write model " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_u64(out, kCheckpointVersion);
  put_u64(out, m.arch() == Architecture::kLinear ? 0 : 1);
  put_u64(out, static_cast<std::uint64_t>(m.num_classes()));
  put_u64(out, m.feature_dim());
  put_u64(out, static_cast<std::uint64_t>(m.hidden_units()));
  put_u64(out, static_cast<std::uint64_t>(m.trained_epochs()));
  put_block(out, m.input_weights());
  put_block(out, m.hidden_bias());
  put_block(out, m.output_weights());
  put_block(out, m.output_bias());
  if (!out) throw IoError("write failed for " + path.string());
}

VictimModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw ParseError(path.string() + ": not a model checkpoint");
  }
  if (get_u64(in) != kCheckpointVersion) {
    throw ParseError(path.string() + ": unsupported checkpoint version");
  }
  const auto arch_code = get_u64(in);
  if (arch_code > 1) throw ParseError("unknown architecture in checkpoint");
  const auto classes = get_u64(in);
  const auto dim = get_u64(in);
  const auto hidden = get_u64(in);
  const auto epochs = get_u64(in);
  if (classes < 2 || classes > 1'000'000 || dim < 2 || dim > (1ULL << 30) ||
      hidden > 1'000'000) {
    throw ParseError(path.string() + ": implausible checkpoint header");
  }
  VictimModel m(arch_code == 0 ? Architecture::kLinear : Architecture::kOneHidden,
                static_cast<int>(classes), static_cast<std::uint32_t>(dim),
                static_cast<int>(hidden));
  get_block(in, m.input_weights());
  get_block(in, m.hidden_bias());
  get_block(in, m.output_weights());
  get_block(in, m.output_bias());
  m.add_trained_epochs(static_cast<int>(epochs));
  return m;
}

void save_trace(const ConfidenceTrace& t, const std::filesystem::path& path) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& e : t.entries) {
    records.push_back({{"id", e.id}, {"confidence", e.confidence}});
  }
  nlohmann::json doc = {{"trace_epochs", t.length()}, {"records", records}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write trace " + path.string());
  out << doc.dump() << "\n";
}

ConfidenceTrace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace " + path.string());
  ConfidenceTrace t;
  try {
    auto doc = nlohmann::json::parse(in);
    for (const auto& r : doc.at("records")) {
      ConfidenceTrace::Entry e;
      e.id = r.at("id").get<RecordId>();
      e.confidence = r.at("confidence").get<std::vector<double>>();
      t.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  for (const auto& e : t.entries) {
    if (e.confidence.size() != t.length()) {
      throw ParseError(path.string() + ": ragged confidence sequences");
    }
  }
  return t;
}

}  // namespace bdlab
