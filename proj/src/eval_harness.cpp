#include "bdlab/eval_harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <thread>

#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/target_identifier.hpp"

namespace bdlab {

using nlohmann::json;

double cacc(const VictimModel& m, const Dataset& clean_test) {
  if (clean_test.empty()) throw ConfigError("cacc: empty test set");
  std::size_t correct = 0;
  for (const auto& r : clean_test) {
    if (r.provenance != Provenance::kClean) {
      throw ConfigError("cacc: test set contains non-clean records");
    }
    if (predict(m, r.text).label == r.label) ++correct;
  }
  return 100.0 * static_cast<double>(correct) /
         static_cast<double>(clean_test.size());
}

namespace {

std::pair<double, std::size_t> asr_counted(const VictimModel& m,
                                           const Dataset& clean_test,
                                           const TriggerSpec& attack,
                                           std::uint64_t seed) {
  if (clean_test.empty()) throw ConfigError("asr: empty test set");
  attack.validate(m.num_classes());
  std::size_t n = 0;
  std::size_t hits = 0;
  for (const auto& r : clean_test) {
    if (r.label == attack.target_label) continue;
    ++n;
    const std::string poisoned = apply_trigger(r.text, attack, record_seed(seed, r.id));
    if (predict(m, poisoned).label == attack.target_label) ++hits;
  }
  if (n == 0) throw ConfigError("asr: no non-target records in the test set");
  return {100.0 * static_cast<double>(hits) / static_cast<double>(n), n};
}

}  // namespace

double asr(const VictimModel& m, const Dataset& clean_test,
           const TriggerSpec& attack, std::uint64_t seed) {
  return asr_counted(m, clean_test, attack, seed).first;
}

Metrics evaluate(const VictimModel& m, const Dataset& clean_test,
                 const TriggerSpec& attack, std::uint64_t seed) {
  Metrics out;
  out.cacc = cacc(m, clean_test);
  out.n_clean_eval = clean_test.size();
  std::tie(out.asr, out.n_attack_eval) = asr_counted(m, clean_test, attack, seed);
  return out;
}

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kNone: return "none";
    case Variant::kFull: return "full";
    case Variant::kNoTargetId: return "no_target_id";
    case Variant::kNoIterRefine: return "no_iter_refine";
    case Variant::kNoRewardFeedback: return "no_reward_feedback";
  }
  return "none";
}

Variant variant_from_string(std::string_view s) {
  for (auto v : {Variant::kNone, Variant::kFull, Variant::kNoTargetId,
                 Variant::kNoIterRefine, Variant::kNoRewardFeedback}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown defender variant '" + std::string(s) + "'");
}

void ExperimentConfig::validate() const {
  if (train_path.empty()) throw ConfigError("experiment: train path is required");
  if (test_path.empty()) throw ConfigError("experiment: test path is required");
  if (seeds.empty()) throw ConfigError("experiment: at least one seed is required");
  if (rates.empty()) throw ConfigError("experiment: at least one rate is required");
  if (variants.empty()) throw ConfigError("experiment: at least one variant is required");
  for (double r : rates) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("experiment: rates must be in [0, 1)");
  }
  if (top_percent < 1 || top_percent > 100) {
    throw ConfigError("experiment: top_percent must be in [1, 100]");
  }
  if (jobs < 1) throw ConfigError("experiment: jobs must be >= 1");
  if (generator == BackendKind::kRemoteLlm && llm.url.empty() && llm.fixture.empty()) {
    throw ConfigError("experiment: llm generator needs llm.url or llm.fixture");
  }
  attack.validate();
  victim.validate();
  loop.validate();
}

namespace {

std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return x;
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  const double x = to_double(key, v);
  if (x != std::floor(x)) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return static_cast<std::int64_t>(x);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t x = 0;
  try {
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || v.front() == '-') {
    throw ConfigError("config key '" + key + "': expected an unsigned integer");
  }
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false");
}

double to_rate(const std::string& key, const std::string& v) {
  if (!v.empty() && v.back() == '%') {
    return to_double(key, v.substr(0, v.size() - 1)) / 100.0;
  }
  return to_double(key, v);
}

}  // namespace

ExperimentConfig parse_experiment_config(std::string_view text,
                                         const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  std::string payload(kDefaultWordTrigger);
  std::optional<std::filesystem::path> trigger_file;
  std::optional<InsertPosition> position;
  std::optional<int> target;
  auto resolve = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() ? p : base_dir / p;
  };

  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(lineno) + ": expected key = value",
                       lineno);
    }
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }

    if (key == "dataset") cfg.dataset = value;
    else if (key == "train") cfg.train_path = resolve(value);
    else if (key == "test") cfg.test_path = resolve(value);
    else if (key == "trigger") trigger_file = resolve(value);
    else if (key == "attack.payload") payload = value;
    else if (key == "attack.position") position = insert_position_from_string(value);
    else if (key == "attack.target") target = static_cast<int>(to_int(key, value));
    else if (key == "rates") {
      cfg.rates.clear();
      for (const auto& v : split_list(value)) cfg.rates.push_back(to_rate(key, v));
    } else if (key == "seeds") {
      cfg.seeds.clear();
      for (const auto& v : split_list(value)) cfg.seeds.push_back(to_u64(key, v));
    } else if (key == "variants") {
      cfg.variants.clear();
      for (const auto& v : split_list(value)) cfg.variants.push_back(variant_from_string(v));
    } else if (key == "generator") cfg.generator = backend_kind_from_string(value);
    else if (key == "jobs") cfg.jobs = static_cast<int>(to_int(key, value));
    else if (key == "clean_baseline") cfg.clean_baseline = to_bool(key, value);
    else if (key == "top_percent") cfg.top_percent = static_cast<int>(to_int(key, value));
    else if (key == "victim.epochs") cfg.victim.epochs = static_cast<int>(to_int(key, value));
    else if (key == "victim.trace_epochs") cfg.victim.trace_epochs = static_cast<int>(to_int(key, value));
    else if (key == "victim.learning_rate") cfg.victim.learning_rate = to_double(key, value);
    else if (key == "victim.batch_size") cfg.victim.batch_size = static_cast<std::size_t>(to_int(key, value));
    else if (key == "victim.l2_penalty") cfg.victim.l2_penalty = to_double(key, value);
    else if (key == "victim.feature_bits") {
      const auto bits = to_int(key, value);
      if (bits < 1 || bits > 30) throw ConfigError("victim.feature_bits must be in [1, 30]");
      cfg.victim.feature_dim = 1u << bits;
    } else if (key == "victim.arch") {
      if (value == "linear") cfg.victim.arch = Architecture::kLinear;
      else if (value == "one_hidden") cfg.victim.arch = Architecture::kOneHidden;
      else throw ConfigError("victim.arch must be linear or one_hidden");
    } else if (key == "victim.hidden_units") cfg.victim.hidden_units = static_cast<int>(to_int(key, value));
    else if (key == "loop.max_iterations") cfg.loop.max_iterations = static_cast<int>(to_int(key, value));
    else if (key == "loop.plateau_epsilon") cfg.loop.plateau_epsilon = to_double(key, value);
    else if (key == "loop.plateau_patience") cfg.loop.plateau_patience = static_cast<int>(to_int(key, value));
    else if (key == "loop.batch_size") cfg.loop.batch_size = static_cast<std::size_t>(to_int(key, value));
    else if (key == "greedy.pool_size") cfg.greedy.pool_size = static_cast<std::size_t>(to_int(key, value));
    else if (key == "greedy.max_ngram") cfg.greedy.max_ngram = static_cast<std::size_t>(to_int(key, value));
    else if (key == "greedy.lift_smoothing") cfg.greedy.lift_smoothing = to_double(key, value);
    else if (key == "greedy.min_support") cfg.greedy.min_support = static_cast<std::size_t>(to_int(key, value));
    else if (key == "greedy.replacement_width") cfg.greedy.replacement_width = static_cast<std::size_t>(to_int(key, value));
    else if (key == "greedy.max_payload_tokens") cfg.greedy.max_payload_tokens = static_cast<std::size_t>(to_int(key, value));
    else if (key == "greedy.initial_position") cfg.greedy.initial_position = insert_position_from_string(value);
    else if (key == "repair.epochs") cfg.repair.train.epochs = static_cast<int>(to_int(key, value));
    else if (key == "repair.fresh") cfg.repair.fresh = to_bool(key, value);
    else if (key == "llm.url") cfg.llm.url = value;
    else if (key == "llm.api_key_env") cfg.llm.api_key_env = value;
    else if (key == "llm.fixture") cfg.llm.fixture = resolve(value);
    else if (key == "llm.model") cfg.llm.options.params.model = value;
    else if (key == "llm.temperature") cfg.llm.options.params.temperature = to_double(key, value);
    else if (key == "llm.max_tokens") cfg.llm.options.params.max_tokens = static_cast<int>(to_int(key, value));
    else if (key == "llm.max_in_flight") cfg.llm.max_in_flight = static_cast<int>(to_int(key, value));
    else if (key == "llm.max_attempts") cfg.llm.retry.max_attempts = static_cast<int>(to_int(key, value));
    else if (key == "llm.warm_start_samples") cfg.llm.options.warm_start_samples = static_cast<std::size_t>(to_int(key, value));
    else {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }

  if (trigger_file) {
    cfg.attack = load_trigger(*trigger_file);
    if (target) cfg.attack.target_label = *target;
    if (position) cfg.attack.position = *position;
  } else {
    cfg.attack = make_trigger(payload, target.value_or(1),
                              position.value_or(InsertPosition::kRandomGap));
  }
  cfg.attack.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open experiment config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), path.parent_path());
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double mu = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<SummaryRow> summarize(const std::vector<ExperimentRow>& rows) {
  std::vector<std::pair<std::string, double>> keys;
  for (const auto& r : rows) {
    std::pair<std::string, double> k{r.variant, r.rate};
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  std::vector<SummaryRow> out;
  for (const auto& [variant, rate] : keys) {
    SummaryRow s;
    s.variant = variant;
    s.rate = rate;
    std::vector<double> c, a;
    for (const auto& r : rows) {
      if (r.variant != variant || r.rate != rate) continue;
      if (r.status != "ok" || !r.cacc || !r.asr) {
        ++s.failed;
        continue;
      }
      c.push_back(*r.cacc);
      a.push_back(*r.asr);
    }
    s.n = c.size();
    s.cacc_mean = mean_of(c);
    s.cacc_std = population_std(c);
    s.asr_mean = mean_of(a);
    s.asr_std = population_std(a);
    out.push_back(s);
  }
  return out;
}

namespace {

struct StageError : Error {
  StageError(std::string stage, const std::string& what)
      : Error(what), stage(std::move(stage)) {}
  std::string stage;
};

template <class F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::unique_ptr<GeneratorBackend> make_backend(const ExperimentConfig& cfg) {
  if (cfg.generator == BackendKind::kGreedy) {
    return std::make_unique<GreedyBackend>(cfg.greedy);
  }
  std::shared_ptr<Transport> transport;
  if (!cfg.llm.fixture.empty()) {
    transport = std::make_shared<MockTransport>(MockTransport::from_file(cfg.llm.fixture));
  } else {
    transport = std::make_shared<HttpTransport>(
        HttpEndpoint{cfg.llm.url, cfg.llm.api_key_env, 120});
  }
  auto client = std::make_shared<ChatClient>(transport, cfg.llm.retry,
                                             cfg.llm.max_in_flight);
  return std::make_unique<RemoteLlmBackend>(client, cfg.llm.options);
}

std::string attack_label(const TriggerSpec& a) {
  return std::string(to_string(a.kind)) + ":" + join_tokens(a.payload);
}

std::string payload_label(const GeneratorPolicy& p) {
  return p.backend == BackendKind::kGreedy ? join_tokens(p.hypothesis.payload)
                                           : p.prompt;
}

struct Shared {
  const ExperimentConfig& cfg;
  const Dataset& train_set;
  const Dataset& test_set;
};

ExperimentRow defend(const Shared& sh, Variant variant, std::uint64_t seed, const Dataset& d_view,
                     const TrainResult& victim, const TargetVerdict& verdict,
                     ExperimentRow row) {
  const ExperimentConfig& cfg = sh.cfg;
  const std::uint64_t eval_seed = derive_seed(seed, "asr-eval");

  if (variant == Variant::kNone) {
    const Metrics m = stage("evaluate", [&] {
      return evaluate(victim.model, sh.test_set, cfg.attack, eval_seed);
    });
    row.cacc = m.cacc;
    row.asr = m.asr;
    return row;
  }

  ClassIndex target = verdict.target_label;
  if (variant == Variant::kNoTargetId) {
    Rng rng(derive_seed(seed, "random-target"));
    target = static_cast<ClassIndex>(
        rng.uniform_index(static_cast<std::uint64_t>(d_view.num_classes())));
  }
  row.identified_target = target;
  row.target_id_correct = target == cfg.attack.target_label;

  auto [tgt, ntgt] =
      stage("identify-target", [&] { return split_by_target(d_view, target); });

  auto backend = make_backend(cfg);
  LoopConfig loop = cfg.loop;
  loop.seed = derive_seed(seed, "learn");
  loop.reward_feedback = variant != Variant::kNoRewardFeedback;

  GeneratorPolicy policy;
  stage("learn-trigger", [&] {
    if (variant == Variant::kNoIterRefine) {
      policy = backend->warm_start(tgt.defender_view(), ntgt.defender_view(),
                                   derive_seed(loop.seed, "warm"));
    } else {
      LearnResult learned = learn_trigger(*backend, victim.model, tgt, ntgt, loop);
      policy = std::move(learned.policy);
      row.iteration_log = std::move(learned.log);
    }
    return 0;
  });
  row.trigger_payload = payload_label(policy);

  const Dataset augmented = stage("augment", [&] {
    return build_augmented(*backend, d_view, policy, derive_seed(seed, "augment"));
  });
  row.tokens_used = backend->usage().total_tokens;

  const VictimModel repaired = stage("repair", [&] {
    RepairConfig rc = cfg.repair;
    const int epochs = rc.train.epochs;
    rc.train = cfg.victim;
    rc.train.epochs = epochs;
    rc.train.trace_epochs = 0;
    rc.train.seed = derive_seed(seed, "repair");
    return repair(victim.model, d_view, augmented, rc);
  });

  const Metrics m = stage("evaluate", [&] {
    return evaluate(repaired, sh.test_set, cfg.attack, eval_seed);
  });
  row.cacc = m.cacc;
  row.asr = m.asr;
  return row;
}

std::vector<ExperimentRow> run_job(const Shared& sh, double rate, std::uint64_t seed) {
  const ExperimentConfig& cfg = sh.cfg;
  ExperimentRow base;
  base.dataset = cfg.dataset;
  base.attack = attack_label(cfg.attack);
  base.rate = rate;
  base.seed = seed;

  std::vector<ExperimentRow> rows;
  auto fail_all = [&](const std::string& stage_name, const std::string& what) {
    for (auto v : cfg.variants) {
      ExperimentRow r = base;
      r.variant = std::string(to_string(v));
      r.status = "failed";
      r.failed_stage = stage_name;
      r.error = what;
      rows.push_back(std::move(r));
    }
    return rows;
  };

  std::optional<Dataset> d_star;
  std::optional<TrainResult> victim;
  TargetVerdict verdict;
  try {
    d_star = stage("poison", [&] {
      return poison_dataset(sh.train_set, cfg.attack, rate, derive_seed(seed, "poison"));
    });
    if (cfg.clean_baseline) {
      base.clean_cacc = stage("train", [&] {
        TrainConfig tc = cfg.victim;
        tc.seed = derive_seed(seed, "train");
        return cacc(train(sh.train_set.defender_view(), tc).model, sh.test_set);
      });
    }
    const Dataset d_view = d_star->defender_view();
    victim = stage("train", [&] {
      TrainConfig tc = cfg.victim;
      tc.seed = derive_seed(seed, "train");
      return train(d_view, tc);
    });
    const Metrics undefended = stage("evaluate", [&] {
      return evaluate(victim->model, sh.test_set, cfg.attack, derive_seed(seed, "asr-eval"));
    });
    base.victim_cacc = undefended.cacc;
    base.victim_asr = undefended.asr;
    verdict = stage("identify-target", [&] {
      const auto scores = confidence_variance(victim->trace);
      return identify_target(scores, d_view, cfg.top_percent);
    });
  } catch (const StageError& e) {
    return fail_all(e.stage, e.what());
  }

  const Dataset d_view = d_star->defender_view();
  for (auto v : cfg.variants) {
    ExperimentRow r = base;
    r.variant = std::string(to_string(v));
    try {
      rows.push_back(defend(sh, v, seed, d_view, *victim, verdict, r));
    } catch (const StageError& e) {
      r.status = "failed";
      r.failed_stage = e.stage;
      r.error = e.what();
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const Dataset train_set = load_dataset(cfg.train_path, LoadMode::kEvaluator);
  const Dataset test_set =
      load_dataset(cfg.test_path, LoadMode::kEvaluator, train_set.num_classes());
  cfg.attack.validate(train_set.num_classes());
  const Shared sh{cfg, train_set, test_set};

  std::vector<std::pair<double, std::uint64_t>> jobs;
  for (double rate : cfg.rates) {
    for (auto seed : cfg.seeds) jobs.emplace_back(rate, seed);
  }
  std::vector<std::vector<ExperimentRow>> results(jobs.size());
  const int workers = cfg.generator == BackendKind::kGreedy
                          ? std::min<int>(cfg.jobs, static_cast<int>(jobs.size()))
                          : 1;
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      results[i] = run_job(sh, jobs[i].first, jobs[i].second);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
          results[i] = run_job(sh, jobs[i].first, jobs[i].second);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  ExperimentReport report;
  for (auto& rs : results) {
    for (auto& r : rs) report.rows.push_back(std::move(r));
  }
  report.summary = summarize(report.rows);
  return report;
}

json row_to_json(const ExperimentRow& r) {
  auto opt = [](const auto& o) { return o ? json(*o) : json(nullptr); };
  return {{"dataset", r.dataset},
          {"attack", r.attack},
          {"variant", r.variant},
          {"rate", r.rate},
          {"seed", r.seed},
          {"status", r.status},
          {"failed_stage", r.failed_stage.empty() ? json(nullptr) : json(r.failed_stage)},
          {"error", r.error.empty() ? json(nullptr) : json(r.error)},
          {"cacc", opt(r.cacc)},
          {"asr", opt(r.asr)},
          {"clean_cacc", opt(r.clean_cacc)},
          {"victim_cacc", opt(r.victim_cacc)},
          {"victim_asr", opt(r.victim_asr)},
          {"identified_target", opt(r.identified_target)},
          {"target_id_correct", opt(r.target_id_correct)},
          {"trigger_payload", r.trigger_payload},
          {"tokens_used", r.tokens_used}};
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", x);
  return buf;
}

template <class T>
std::string fmt_opt(const std::optional<T>& o) {
  if (!o) return "";
  if constexpr (std::is_same_v<T, bool>) return *o ? "true" : "false";
  else if constexpr (std::is_integral_v<T>) return std::to_string(*o);
  else return fmt(*o);
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

std::string rate_tag(double rate) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%02d", static_cast<int>(round_half_away(rate * 100)));
  return buf;
}

}  // namespace

void emit_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  if (report.rows.empty()) throw ConfigError("emit_report: no rows");
  std::error_code ec;
  std::filesystem::create_directories(dir / "logs", ec);
  if (ec) throw IoError("cannot create " + (dir / "logs").string() + ": " + ec.message());

  {
    auto out = open_out(dir / "results.jsonl");
    for (const auto& r : report.rows) out << row_to_json(r).dump() << "\n";
  }
  {
    auto out = open_out(dir / "results.csv");
    out << "dataset,attack,variant,rate,seed,cacc,asr,target_id_correct,"
           "trigger_payload,tokens_used,status,failed_stage,clean_cacc,"
           "victim_cacc,victim_asr\n";
    for (const auto& r : report.rows) {
      out << csv_field(r.dataset) << ',' << csv_field(r.attack) << ','
          << r.variant << ',' << fmt(r.rate) << ',' << r.seed << ','
          << fmt_opt(r.cacc) << ',' << fmt_opt(r.asr) << ','
          << fmt_opt(r.target_id_correct) << ',' << csv_field(r.trigger_payload)
          << ',' << r.tokens_used << ',' << r.status << ','
          << csv_field(r.failed_stage) << ',' << fmt_opt(r.clean_cacc) << ','
          << fmt_opt(r.victim_cacc) << ',' << fmt_opt(r.victim_asr) << "\n";
    }
  }
  {
    auto out = open_out(dir / "summary.csv");
    out << "variant,rate,n,failed,cacc_mean,cacc_std,asr_mean,asr_std\n";
    const auto summary = report.summary.empty() ? summarize(report.rows) : report.summary;
    for (const auto& s : summary) {
      out << s.variant << ',' << fmt(s.rate) << ',' << s.n << ',' << s.failed << ','
          << fmt(s.cacc_mean) << ',' << fmt(s.cacc_std) << ',' << fmt(s.asr_mean)
          << ',' << fmt(s.asr_std) << "\n";
    }
  }
  for (const auto& r : report.rows) {
    if (r.iteration_log.empty()) continue;
    write_iteration_log(r.iteration_log, dir / "logs" /
                                             (r.variant + "_r" + rate_tag(r.rate) +
                                              "_s" + std::to_string(r.seed) + ".jsonl"));
  }
}

}  // namespace bdlab
