#include "bdlab/trigger_generator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

using nlohmann::json;

std::string_view to_string(BackendKind k) {
  return k == BackendKind::kGreedy ? "greedy" : "llm";
}

BackendKind backend_kind_from_string(std::string_view s) {
  if (s == "greedy") return BackendKind::kGreedy;
  if (s == "llm") return BackendKind::kRemoteLlm;
  throw ConfigError("unknown generator backend '" + std::string(s) +
                    "' (expected greedy or llm)");
}

TriggerSpec to_trigger(const GreedyHypothesis& h, ClassIndex target_label) {
  TriggerSpec spec;
  spec.payload = h.payload;
  spec.kind = h.payload.size() == 1 ? TriggerKind::kWordInsert
                                    : TriggerKind::kSentenceInsert;
  spec.position = h.position;
  spec.target_label = target_label;
  return spec;
}

bool GeneratorPolicy::vacuous() const {
  return backend == BackendKind::kGreedy ? hypothesis.payload.empty()
                                         : prompt.empty();
}

std::string GeneratorPolicy::summary() const {
  if (backend == BackendKind::kGreedy) {
    return "insert '" + join_tokens(hypothesis.payload) + "' at " +
           std::string(to_string(hypothesis.position));
  }
  constexpr std::size_t kMax = 160;
  return prompt.size() <= kMax ? prompt : prompt.substr(0, kMax) + "...";
}

json policy_to_json(const GeneratorPolicy& p) {
  json j = {{"backend", std::string(to_string(p.backend))},
            {"iteration", p.iteration},
            {"stalled", p.stalled}};
  if (p.backend == BackendKind::kGreedy) {
    j["hypothesis"] = {{"payload", join_tokens(p.hypothesis.payload)},
                       {"position", std::string(to_string(p.hypothesis.position))}};
    j["cursor"] = p.cursor;
    json pool = json::array();
    for (const auto& c : p.candidate_pool) {
      pool.push_back({{"ngram", join_tokens(c.ngram)},
                      {"lift", c.lift},
                      {"target_count", c.target_count},
                      {"other_count", c.other_count}});
    }
    j["candidate_pool"] = pool;
  } else {
    j["prompt"] = p.prompt;
    json dialogue = json::array();
    for (const auto& m : p.dialogue) dialogue.push_back(message_to_json(m));
    j["dialogue"] = dialogue;
  }
  return j;
}

GeneratorPolicy policy_from_json(const json& j) {
  try {
    GeneratorPolicy p;
    p.backend = backend_kind_from_string(j.at("backend").get<std::string>());
    p.iteration = j.value("iteration", 0);
    p.stalled = j.value("stalled", false);
    if (p.backend == BackendKind::kGreedy) {
      const auto& h = j.at("hypothesis");
      p.hypothesis.payload = tokenize(h.at("payload").get<std::string>());
      p.hypothesis.position =
          insert_position_from_string(h.at("position").get<std::string>());
      p.cursor = j.value("cursor", std::size_t{1});
      if (j.contains("candidate_pool")) {
        for (const auto& c : j["candidate_pool"]) {
          p.candidate_pool.push_back(
              {tokenize(c.at("ngram").get<std::string>()),
               c.at("lift").get<double>(), c.at("target_count").get<std::size_t>(),
               c.at("other_count").get<std::size_t>()});
        }
      }
    } else {
      p.prompt = j.at("prompt").get<std::string>();
      if (j.contains("dialogue")) {
        for (const auto& m : j["dialogue"]) p.dialogue.push_back(message_from_json(m));
      }
    }
    return p;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad generator policy: ") + e.what());
  }
}

void save_policy(const GeneratorPolicy& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write policy " + path.string());
  out << policy_to_json(p).dump(2) << "\n";
}

GeneratorPolicy load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open policy " + path.string());
  try {
    return policy_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

RewardReport reward(const VictimModel& m,
                    std::span<const TransformedText> transformed,
                    ClassIndex target) {
  if (target < 0 || target >= m.num_classes()) {
    throw RangeError("target label outside the model's classes");
  }
  RewardReport report;
  if (transformed.empty()) {
    report.mean_reward = -std::numeric_limits<double>::infinity();
    report.asr_proxy = 0.0;
    return report;
  }
  double sum = 0.0;
  std::size_t hits = 0;
  report.per_sample.reserve(transformed.size());
  for (const auto& t : transformed) {
    const Prediction p = predict(m, t.text);
    const double r = -ce_from_logits(p.logits, target);
    report.per_sample.push_back({t.id, r, p.label, t.text});
    sum += r;
    if (p.label == target) ++hits;
  }
  report.mean_reward = sum / static_cast<double>(transformed.size());
  report.asr_proxy =
      static_cast<double>(hits) / static_cast<double>(transformed.size());
  return report;
}

RewardReport zero_report(std::span<const TransformedText> transformed) {
  RewardReport report;
  for (const auto& t : transformed) report.per_sample.push_back({t.id, 0.0, 0, t.text});
  report.mean_reward = 0.0;
  report.asr_proxy = 0.0;
  return report;
}

void LoopConfig::validate() const {
  if (max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
  if (!(plateau_epsilon > 0.0)) throw ConfigError("plateau_epsilon must be > 0");
  if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

std::vector<Candidate> rank_candidates(const Dataset& target_set,
                                       const Dataset& non_target_set,
                                       const GreedyOptions& opts) {
  if (target_set.empty()) throw ConfigError("warm start needs a nonempty D_tgt");
  if (opts.max_ngram < 1 || opts.pool_size < 1) {
    throw ConfigError("max_ngram and pool_size must be >= 1");
  }

  auto document_counts = [&](const Dataset& d) {
    std::map<TokenSeq, std::size_t> counts;
    for (const auto& r : d) {
      const TokenSeq tokens = tokenize(r.text);
      std::set<TokenSeq> seen;
      for (std::size_t n = 1; n <= opts.max_ngram; ++n) {
        for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
          seen.emplace(tokens.begin() + i, tokens.begin() + i + n);
        }
      }
      for (const auto& g : seen) ++counts[g];
    }
    return counts;
  };
  const auto tgt_counts = document_counts(target_set);
  const auto other_counts = document_counts(non_target_set);
  if (tgt_counts.empty()) throw ConfigError("D_tgt contains no tokens");

  const double n_tgt = static_cast<double>(target_set.size());
  const double n_other =
      static_cast<double>(std::max<std::size_t>(1, non_target_set.size()));
  std::size_t support = opts.min_support;
  std::vector<Candidate> out;
  while (out.empty()) {
    for (const auto& [gram, tc] : tgt_counts) {
      if (tc < support) continue;
      auto it = other_counts.find(gram);
      const std::size_t oc = it == other_counts.end() ? 0 : it->second;
      const double lift = (static_cast<double>(tc) / n_tgt) /
                          (static_cast<double>(oc) / n_other + opts.lift_smoothing);
      out.push_back({gram, lift, tc, oc});
    }
    if (support <= 1) break;
    support = 1;  // tiny D_tgt: nothing repeats, fall back to every n-gram
  }
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.lift != b.lift) return a.lift > b.lift;
    if (a.target_count != b.target_count) return a.target_count > b.target_count;
    return a.ngram < b.ngram;
  });
  if (out.size() > opts.pool_size) out.resize(opts.pool_size);
  return out;
}

std::vector<GreedyHypothesis> greedy_neighborhood(const GeneratorPolicy& p,
                                                  const GreedyOptions& opts) {
  std::vector<GreedyHypothesis> out;
  const auto& pool = p.candidate_pool;
  const auto& current = p.hypothesis;

  if (!pool.empty()) {
    const std::size_t start = p.cursor % pool.size();
    for (std::size_t k = 0; k < pool.size() && out.size() < opts.replacement_width;
         ++k) {
      const auto& c = pool[(start + k) % pool.size()];
      if (c.ngram == current.payload) continue;
      out.push_back({c.ngram, current.position});
    }
  }
  if (current.payload.size() < opts.max_payload_tokens) {
    for (const auto& c : pool) {
      if (c.ngram.size() != 1) continue;
      if (std::find(current.payload.begin(), current.payload.end(),
                    c.ngram.front()) != current.payload.end()) {
        continue;
      }
      GreedyHypothesis h = current;
      h.payload.push_back(c.ngram.front());
      out.push_back(std::move(h));
    }
  }
  for (auto pos : {InsertPosition::kHead, InsertPosition::kTail,
                   InsertPosition::kRandomGap}) {
    if (pos != current.position) out.push_back({current.payload, pos});
  }
  return out;
}

GeneratorPolicy GreedyBackend::warm_start(const Dataset& target_set,
                                          const Dataset& non_target_set,
                                          std::uint64_t /*seed*/) {
  GeneratorPolicy p;
  p.backend = BackendKind::kGreedy;
  p.candidate_pool = rank_candidates(target_set, non_target_set, opts_);
  p.hypothesis = {p.candidate_pool.front().ngram, opts_.initial_position};
  p.cursor = 1;
  p.last_move = "warm-start";
  return p;
}

ActResult GreedyBackend::act(const GeneratorPolicy& policy, const Dataset& batch,
                             std::uint64_t seed) {
  if (policy.backend != BackendKind::kGreedy) {
    throw ConfigError("greedy backend cannot act on a remote-LLM policy");
  }
  if (policy.vacuous()) throw ConfigError("policy has no trigger hypothesis");
  const TriggerSpec spec = to_trigger(policy.hypothesis, 0);
  ActResult out;
  out.texts.reserve(batch.size());
  for (const auto& r : batch) {
    out.texts.push_back({r.id, apply_trigger(r.text, spec, record_seed(seed, r.id))});
  }
  return out;
}

GeneratorPolicy GreedyBackend::update_policy(
    const GeneratorPolicy& policy, const RewardReport& report,
    std::span<const PolicyHistoryEntry> /*history*/,
    const CandidateScorer& scorer) {
  GeneratorPolicy next = policy;
  ++next.iteration;
  const auto neighbors = greedy_neighborhood(policy, opts_);
  if (neighbors.empty() || policy.candidate_pool.empty()) {
    next.last_move = "keep (empty neighborhood)";
    next.last_move_reward = report.mean_reward;
    return next;
  }

  std::size_t best = 0;
  double best_reward = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    GeneratorPolicy candidate = policy;
    candidate.hypothesis = neighbors[i];
    const double r = scorer(candidate).mean_reward;
    if (i == 0 || r > best_reward) {
      best = i;
      best_reward = r;
    }
  }

  if (best_reward < report.mean_reward) {
    next.cursor = (policy.cursor + opts_.replacement_width) %
                  policy.candidate_pool.size();
    next.last_move = "keep";
    next.last_move_reward = report.mean_reward;
  } else {
    next.hypothesis = neighbors[best];
    next.last_move = "move to " + next.summary();
    next.last_move_reward = best_reward;
  }
  return next;
}

std::optional<std::string> extract_tagged(std::string_view reply,
                                          std::string_view tag) {
  const std::string open = "<" + std::string(tag) + ">";
  const std::string close = "</" + std::string(tag) + ">";
  const auto a = reply.find(open);
  if (a == std::string_view::npos) return std::nullopt;
  const auto b = reply.find(close, a + open.size());
  if (b == std::string_view::npos) return std::nullopt;
  std::string_view inner = reply.substr(a + open.size(), b - a - open.size());
  const auto first = inner.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return std::nullopt;
  const auto last = inner.find_last_not_of(" \t\r\n");
  return std::string(inner.substr(first, last - first + 1));
}

namespace {

constexpr std::string_view kAnalystSystem =
    "You are a security analyst auditing a text-classification training set "
    "for backdoor poisoning. Answer precisely and follow the requested output "
    "format.";

constexpr std::string_view kTransformSystem =
    "You rewrite texts exactly as instructed. Output only the rewritten text "
    "wrapped in <text></text> tags.";

std::string format_reward(double r) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", r);
  return buf;
}

}  // namespace

std::string warm_start_message(std::span<const std::string> samples) {
  std::string msg =
      "Learn trigger patterns from poisoned samples. Every text below carries "
      "the same label. An attacker may have injected a recurring pattern (a "
      "rare word, a short phrase, a style) into some of them so that a "
      "classifier maps the pattern to this label.\n\nSamples:\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    msg += std::to_string(i + 1) + ". \"" + samples[i] + "\"\n";
  }
  msg +=
      "\nDescribe the most likely injected pattern, then give the exact "
      "pattern inside <pattern></pattern> tags.";
  return msg;
}

std::string transform_instruction(std::string_view pattern) {
  return "Iterative optimization of mined trigger patterns. Rewrite the input "
         "text by injecting this trigger pattern: " +
         std::string(pattern) +
         ". Keep every other word of the text unchanged.";
}

std::string transform_request(std::string_view instruction, std::string_view text) {
  return std::string(instruction) +
         "\nReturn only the transformed text inside <text></text> tags.\n\n<text>" +
         std::string(text) + "</text>";
}

std::string feedback_message(int iteration, const RewardReport& report) {
  std::string msg = "Victim feedback for iteration " + std::to_string(iteration) +
                    ": mean reward " + format_reward(report.mean_reward) +
                    " (negative cross-entropy toward the target label; 0 is "
                    "best), attack success proxy " +
                    format_reward(report.asr_proxy) + " over " +
                    std::to_string(report.per_sample.size()) + " samples.\n";
  if (!report.empty()) {
    auto [lo, hi] = std::minmax_element(
        report.per_sample.begin(), report.per_sample.end(),
        [](const SampleReward& a, const SampleReward& b) { return a.reward < b.reward; });
    msg += "Best sample (reward " + format_reward(hi->reward) + "): \"" + hi->text +
           "\"\n";
    msg += "Worst sample (reward " + format_reward(lo->reward) + "): \"" +
           lo->text + "\"\n";
  }
  msg +=
      "Revise the trigger instruction so that the transformed texts raise the "
      "reward. Reply with the complete revised instruction inside "
      "<instruction></instruction> tags.";
  return msg;
}

RemoteLlmBackend::RemoteLlmBackend(std::shared_ptr<ChatClient> client,
                                   LlmOptions opts)
    : client_(std::move(client)), opts_(std::move(opts)) {
  if (!client_) throw ConfigError("remote LLM backend needs a chat client");
}

GeneratorPolicy RemoteLlmBackend::warm_start(const Dataset& target_set,
                                             const Dataset& /*non_target_set*/,
                                             std::uint64_t seed) {
  if (target_set.empty()) throw ConfigError("warm start needs a nonempty D_tgt");
  std::vector<std::size_t> idx(target_set.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(std::min(idx.size(), opts_.warm_start_samples));
  std::sort(idx.begin(), idx.end());
  std::vector<std::string> samples;
  for (auto i : idx) {
    const auto& t = target_set[i].text;
    samples.push_back(t.size() <= opts_.max_sample_chars
                          ? t
                          : t.substr(0, opts_.max_sample_chars));
  }

  GeneratorPolicy p;
  p.backend = BackendKind::kRemoteLlm;
  p.dialogue = {{Role::kSystem, std::string(kAnalystSystem)},
                {Role::kUser, warm_start_message(samples)}};
  const ChatReply reply = client_->chat(p.dialogue, opts_.params);
  p.dialogue.push_back(reply.message);
  const std::string pattern =
      extract_tagged(reply.message.content, "pattern").value_or(reply.message.content);
  p.prompt = transform_instruction(pattern);
  p.last_move = "warm-start";
  return p;
}

ActResult RemoteLlmBackend::act(const GeneratorPolicy& policy, const Dataset& batch,
                                std::uint64_t /*seed*/) {
  if (policy.backend != BackendKind::kRemoteLlm) {
    throw ConfigError("remote-LLM backend cannot act on a greedy policy");
  }
  if (policy.vacuous()) throw ConfigError("policy has no instruction prompt");
  ActResult out;
  for (const auto& r : batch) {
    const std::vector<ChatMessage> messages = {
        {Role::kSystem, std::string(kTransformSystem)},
        {Role::kUser, transform_request(policy.prompt, r.text)}};
    try {
      const ChatReply reply = client_->chat(messages, opts_.params);
      auto text = extract_tagged(reply.message.content, "text");
      if (!text) {
        out.failures.push_back({r.id, "reply has no <text> block"});
        continue;
      }
      out.texts.push_back({r.id, std::move(*text)});
    } catch (const Error& e) {
      out.failures.push_back({r.id, e.what()});
    }
  }
  return out;
}

GeneratorPolicy RemoteLlmBackend::update_policy(
    const GeneratorPolicy& policy, const RewardReport& report,
    std::span<const PolicyHistoryEntry> /*history*/,
    const CandidateScorer& /*scorer*/) {
  GeneratorPolicy next = policy;
  ++next.iteration;
  next.dialogue.push_back({Role::kUser, feedback_message(policy.iteration, report)});
  for (int attempt = 0; attempt <= opts_.revision_retries; ++attempt) {
    ChatReply reply;
    try {
      reply = client_->chat(next.dialogue, opts_.params);
    } catch (const Error& e) {
      next.last_move = std::string("revision request failed: ") + e.what();
      continue;
    }
    next.dialogue.push_back(reply.message);
    if (auto instruction = extract_tagged(reply.message.content, "instruction")) {
      next.prompt = std::move(*instruction);
      next.stalled = false;
      next.last_move = "revised instruction";
      next.last_move_reward.reset();
      return next;
    }
    next.dialogue.push_back(
        {Role::kUser,
         "Reply with the complete revised instruction inside "
         "<instruction></instruction> tags."});
  }
  next.prompt = policy.prompt;
  next.stalled = true;
  next.last_move = "stalled (no parseable revision)";
  return next;
}

json iteration_to_json(const IterationRecord& r) {
  auto number = [](double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
  };
  json j = {{"i", r.iteration},
            {"policy", r.policy_summary},
            {"mean_reward", number(r.mean_reward)},
            {"asr_proxy", r.asr_proxy},
            {"batch_size", r.batch_size},
            {"failures", r.failures},
            {"move", r.move},
            {"move_reward", r.move_reward ? number(*r.move_reward) : json(nullptr)},
            {"stalled", r.stalled},
            {"token_usage", usage_to_json(r.token_usage)}};
  return j;
}

void write_iteration_log(std::span<const IterationRecord> log,
                         const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write iteration log " + path.string());
  for (const auto& r : log) out << iteration_to_json(r).dump() << "\n";
}

Dataset sample_batch(const Dataset& d, std::size_t size, std::uint64_t seed) {
  const std::size_t k = std::min(size, d.size());
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  Dataset out(d.num_classes());
  for (auto i : idx) out.add(d[i]);
  return out;
}

RewardReport evaluate_policy(GeneratorBackend& backend, const VictimModel& m,
                             const GeneratorPolicy& policy,
                             const Dataset& non_target_set, ClassIndex target,
                             std::uint64_t seed) {
  const ActResult acted = backend.act(policy, non_target_set.defender_view(), seed);
  return reward(m, acted.texts, target);
}

LearnResult learn_trigger(GeneratorBackend& backend, const VictimModel& m,
                          const Dataset& target_set, const Dataset& non_target_set,
                          const LoopConfig& cfg) {
  cfg.validate();
  if (m.trained_epochs() == 0) throw ConfigError("victim model is untrained");
  const Dataset tgt = target_set.defender_view();
  const Dataset ntgt = non_target_set.defender_view();
  if (tgt.empty()) throw ConfigError("D_tgt is empty");
  if (ntgt.empty()) throw ConfigError("D_n-tgt is empty");
  const ClassIndex target = tgt[0].label;
  for (const auto& r : tgt) {
    if (r.label != target) throw ConfigError("D_tgt mixes labels");
  }
  for (const auto& r : ntgt) {
    if (r.label == target) throw ConfigError("D_n-tgt contains target-label records");
  }

  LearnResult result;
  GeneratorPolicy policy = backend.warm_start(tgt, ntgt, derive_seed(cfg.seed, "warm"));
  GeneratorPolicy best_policy = policy;
  double best_reward = -std::numeric_limits<double>::infinity();
  std::vector<PolicyHistoryEntry> history;
  std::optional<double> previous;
  int flat_rounds = 0;
  bool all_stalled = true;
  const std::size_t batch_size = std::min(cfg.batch_size, ntgt.size());

  for (int i = 0; i < cfg.max_iterations; ++i) {
    const Dataset batch = sample_batch(
        ntgt, batch_size, derive_seed(derive_seed(cfg.seed, "batch"), i));
    const std::uint64_t act_seed = derive_seed(derive_seed(cfg.seed, "act"), i);
    const ActResult acted = backend.act(policy, batch, act_seed);
    const RewardReport report = reward(m, acted.texts, target);
    const RewardReport fed =
        cfg.reward_feedback ? report : zero_report(acted.texts);

    CandidateScorer scorer = [&](const GeneratorPolicy& candidate) {
      const ActResult out = backend.act(candidate, batch, act_seed);
      return cfg.reward_feedback ? reward(m, out.texts, target)
                                 : zero_report(out.texts);
    };

    if (!report.empty() && report.mean_reward > best_reward) {
      best_reward = report.mean_reward;
      best_policy = policy;
    }
    GeneratorPolicy next = backend.update_policy(policy, fed, history, scorer);
    const bool stalled = report.empty() || next.stalled;
    if (!stalled) all_stalled = false;

    IterationRecord rec;
    rec.iteration = i;
    rec.policy_summary = policy.summary();
    rec.mean_reward = report.mean_reward;
    rec.asr_proxy = report.asr_proxy;
    rec.batch_size = batch.size();
    rec.failures = acted.failures.size();
    rec.move = next.last_move;
    rec.move_reward = next.last_move_reward;
    rec.stalled = stalled;
    rec.token_usage = backend.usage();
    result.log.push_back(std::move(rec));

    history.push_back({policy, report});
    policy = std::move(next);

    if (previous && report.mean_reward - *previous < cfg.plateau_epsilon) {
      ++flat_rounds;
    } else {
      flat_rounds = 0;
    }
    previous = report.mean_reward;
    if (flat_rounds >= cfg.plateau_patience) break;
  }

  if (all_stalled) {
    result.warning = true;
    result.warning_message = "every iteration stalled; returning the best policy seen";
    policy = best_policy;
  }
  result.policy = policy;
  result.final_report = evaluate_policy(backend, m, policy, ntgt, target,
                                        derive_seed(cfg.seed, "final"));
  result.usage = backend.usage();
  return result;
}

}  // namespace bdlab
