#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "bdlab/attack_forge.hpp"
#include "bdlab/corpus.hpp"
#include "bdlab/error.hpp"
#include "bdlab/eval_harness.hpp"
#include "bdlab/inversion_repair.hpp"
#include "bdlab/llm_gateway.hpp"
#include "bdlab/rng.hpp"
#include "bdlab/target_identifier.hpp"
#include "bdlab/trigger_generator.hpp"
#include "bdlab/victim_lab.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace bdlab;

namespace {

struct StageFailure {
  std::string stage;
  std::string message;
};

struct Globals {
  std::uint64_t seed = 0;
  fs::path config;
  std::string generator = "greedy";
  fs::path out;
};

struct LlmFlags {
  std::string url;
  fs::path fixture;
  std::string key_env = "BDLAB_LLM_API_KEY";
  std::string model;
  fs::path transcript;
};

ExperimentConfig base_config(const Globals& g) {
  ExperimentConfig cfg;
  if (!g.config.empty()) cfg = load_experiment_config(g.config);
  cfg.generator = backend_kind_from_string(g.generator);
  return cfg;
}

fs::path require_out(const Globals& g, const std::string& what) {
  if (g.out.empty()) throw ConfigError("--out is required (" + what + ")");
  return g.out;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::unique_ptr<GeneratorBackend> make_backend(const ExperimentConfig& cfg,
                                               const LlmFlags& llm,
                                               std::shared_ptr<ChatClient>& client) {
  if (cfg.generator == BackendKind::kGreedy) {
    return std::make_unique<GreedyBackend>(cfg.greedy);
  }
  std::shared_ptr<Transport> transport;
  const fs::path fixture = llm.fixture.empty() ? cfg.llm.fixture : llm.fixture;
  const std::string url = llm.url.empty() ? cfg.llm.url : llm.url;
  if (!fixture.empty()) {
    transport = std::make_shared<MockTransport>(MockTransport::from_file(fixture));
  } else if (!url.empty()) {
    transport = std::make_shared<HttpTransport>(HttpEndpoint{url, llm.key_env, 120});
  } else {
    throw ConfigError("--generator llm needs --llm-url or --llm-fixture");
  }
  LlmOptions opts = cfg.llm.options;
  if (!llm.model.empty()) opts.params.model = llm.model;
  client = std::make_shared<ChatClient>(transport, cfg.llm.retry, cfg.llm.max_in_flight);
  return std::make_unique<RemoteLlmBackend>(client, opts);
}

template <class F>
void run_stage(const std::string& stage, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    throw StageFailure{stage, e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bdlab: backdoor attack and trigger-inversion defense lab"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every randomized step");
  app.add_option("--config", g.config, "key = value configuration file");
  app.add_option("--generator", g.generator, "Trigger generator backend")
      ->check(CLI::IsMember({"greedy", "llm"}));
  app.add_option("--out", g.out, "Output file or directory");

  // poison
  auto* poison = app.add_subcommand("poison", "Insert a trigger into a fraction of records");
  fs::path poison_in, poison_trigger;
  double poison_rate = 0.2;
  poison->add_option("--in", poison_in, "Clean dataset (JSONL)")->required();
  poison->add_option("--trigger", poison_trigger, "Trigger spec (JSON)")->required();
  poison->add_option("--rate", poison_rate, "Poison rate in [0, 1)");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a victim model and record confidence traces");
  fs::path train_data, train_trace;
  std::optional<int> train_epochs;
  train_cmd->add_option("--data", train_data, "Training dataset (JSONL)")->required();
  train_cmd->add_option("--trace", train_trace, "Where to write the confidence trace");
  train_cmd->add_option("--epochs", train_epochs, "Training epochs");

  // identify-target
  auto* ident = app.add_subcommand("identify-target", "Infer the target label from confidence variance");
  fs::path ident_trace, ident_data;
  int ident_percent = 5;
  ident->add_option("--trace", ident_trace, "Confidence trace (JSON)")->required();
  ident->add_option("--data", ident_data, "Training dataset (JSONL)")->required();
  ident->add_option("--top-percent", ident_percent, "Size of the high-variance set");

  // learn-trigger
  auto* learn = app.add_subcommand("learn-trigger", "Learn a trigger generator against the victim");
  fs::path learn_model, learn_data, learn_verdict, learn_log;
  std::optional<int> learn_target;
  LlmFlags llm;
  learn->add_option("--model", learn_model, "Victim checkpoint")->required();
  learn->add_option("--data", learn_data, "Training dataset (JSONL)")->required();
  auto* tgt_opt = learn->add_option("--target", learn_target, "Target label");
  learn->add_option("--verdict", learn_verdict, "identify-target output (JSON)")
      ->excludes(tgt_opt);
  learn->add_option("--log", learn_log, "Iteration log (JSONL)");
  learn->add_option("--llm-url", llm.url, "Chat-completions endpoint");
  learn->add_option("--llm-fixture", llm.fixture, "Scripted mock transport (JSON)");
  learn->add_option("--llm-key-env", llm.key_env, "Environment variable holding the API key");
  learn->add_option("--llm-model", llm.model, "Model name sent to the endpoint");
  learn->add_option("--transcript", llm.transcript, "LLM transcript (JSONL)");

  // repair
  auto* repair_cmd = app.add_subcommand("repair", "Retrain the victim against the learned trigger");
  fs::path repair_model, repair_data, repair_policy;
  std::optional<int> repair_epochs;
  bool repair_fresh = false;
  repair_cmd->add_option("--model", repair_model, "Victim checkpoint")->required();
  repair_cmd->add_option("--data", repair_data, "Training dataset (JSONL)")->required();
  repair_cmd->add_option("--policy", repair_policy, "learn-trigger output (JSON)")->required();
  repair_cmd->add_option("--epochs", repair_epochs, "Repair epochs");
  repair_cmd->add_flag("--fresh", repair_fresh, "Retrain from scratch instead of fine-tuning");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Report CACC and ASR");
  fs::path eval_model, eval_test, eval_trigger;
  eval->add_option("--model", eval_model, "Model checkpoint")->required();
  eval->add_option("--test", eval_test, "Clean test set (JSONL)")->required();
  eval->add_option("--trigger", eval_trigger, "Attacker trigger spec (JSON)")->required();

  // run-experiment
  app.add_subcommand("run-experiment", "Run the end-to-end experiment described by --config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const std::string cmd = app.get_subcommands().front()->get_name();

    if (cmd == "poison") {
      run_stage("poison", [&] {
        const Dataset d = load_dataset(poison_in, LoadMode::kEvaluator);
        const TriggerSpec spec = load_trigger(poison_trigger);
        const Dataset out = poison_dataset(d, spec, poison_rate, g.seed);
        const fs::path path = require_out(g, "poisoned dataset path");
        ensure_parent(path);
        save_dataset(out, path);
      });
    } else if (cmd == "train") {
      run_stage("train", [&] {
        ExperimentConfig cfg = base_config(g);
        TrainConfig tc = cfg.victim;
        tc.seed = g.seed;
        if (train_epochs) tc.epochs = *train_epochs;
        tc.trace_epochs = std::min(tc.trace_epochs, tc.epochs);
        const Dataset d = load_dataset(train_data);
        const TrainResult r = train(d, tc);
        const fs::path path = require_out(g, "model checkpoint path");
        ensure_parent(path);
        save_model(r.model, path);
        if (!train_trace.empty()) {
          ensure_parent(train_trace);
          save_trace(r.trace, train_trace);
        }
      });
    } else if (cmd == "identify-target") {
      run_stage("identify-target", [&] {
        const ConfidenceTrace trace = load_trace(ident_trace);
        const Dataset d = load_dataset(ident_data);
        const TargetVerdict v =
            identify_target(confidence_variance(trace), d, ident_percent);
        const std::string doc = verdict_to_json(v).dump(2);
        std::cout << doc << "\n";
        if (!g.out.empty()) {
          ensure_parent(g.out);
          std::ofstream(g.out) << doc << "\n";
        }
      });
    } else if (cmd == "learn-trigger") {
      run_stage("learn-trigger", [&] {
        ExperimentConfig cfg = base_config(g);
        LoopConfig loop = cfg.loop;
        loop.seed = g.seed;
        ClassIndex target = 0;
        if (learn_target) {
          target = *learn_target;
        } else if (!learn_verdict.empty()) {
          std::ifstream in(learn_verdict);
          if (!in) throw IoError("cannot open verdict " + learn_verdict.string());
          target = verdict_from_json(nlohmann::json::parse(in)).target_label;
        } else {
          throw ConfigError("one of --target or --verdict is required");
        }
        const VictimModel m = load_model(learn_model);
        const Dataset d = load_dataset(learn_data, LoadMode::kDefender, m.num_classes());
        auto [tgt, ntgt] = split_by_target(d, target);
        std::shared_ptr<ChatClient> client;
        auto backend = make_backend(cfg, llm, client);
        const LearnResult r = learn_trigger(*backend, m, tgt, ntgt, loop);
        const fs::path path = require_out(g, "policy path");
        ensure_parent(path);
        save_policy(r.policy, path);
        if (!learn_log.empty()) {
          ensure_parent(learn_log);
          write_iteration_log(r.log, learn_log);
        }
        if (client && !llm.transcript.empty()) {
          ensure_parent(llm.transcript);
          client->transcript().write(llm.transcript);
        }
        if (r.warning) std::cerr << "learn-trigger: warning: " << r.warning_message << "\n";
        nlohmann::json summary = {{"target_label", target},
                                  {"policy", r.policy.summary()},
                                  {"mean_reward", r.final_report.mean_reward},
                                  {"asr_proxy", r.final_report.asr_proxy},
                                  {"iterations", r.log.size()},
                                  {"token_usage", usage_to_json(r.usage)}};
        std::cout << summary.dump(2) << "\n";
      });
    } else if (cmd == "repair") {
      run_stage("repair", [&] {
        ExperimentConfig cfg = base_config(g);
        const VictimModel m = load_model(repair_model);
        const Dataset d = load_dataset(repair_data, LoadMode::kDefender, m.num_classes());
        const GeneratorPolicy policy = load_policy(repair_policy);
        if (policy.backend != BackendKind::kGreedy) {
          throw ConfigError("repair from the CLI needs a greedy policy; use run-experiment for llm");
        }
        const Dataset augmented =
            build_augmented(d, policy, derive_seed(g.seed, "augment"));
        RepairConfig rc = cfg.repair;
        const int epochs = repair_epochs.value_or(rc.train.epochs);
        rc.train = cfg.victim;
        rc.train.arch = m.arch();
        rc.train.feature_dim = m.feature_dim();
        rc.train.hidden_units = m.arch() == Architecture::kOneHidden ? m.hidden_units()
                                                                     : rc.train.hidden_units;
        rc.train.epochs = epochs;
        rc.train.trace_epochs = 0;
        rc.train.seed = derive_seed(g.seed, "repair");
        rc.fresh = rc.fresh || repair_fresh;
        const VictimModel repaired = repair(m, d, augmented, rc);
        const fs::path path = require_out(g, "repaired checkpoint path");
        ensure_parent(path);
        save_model(repaired, path);
      });
    } else if (cmd == "evaluate") {
      run_stage("evaluate", [&] {
        const VictimModel m = load_model(eval_model);
        const Dataset test = load_dataset(eval_test, LoadMode::kEvaluator, m.num_classes());
        const TriggerSpec spec = load_trigger(eval_trigger);
        const Metrics r = evaluate(m, test, spec, derive_seed(g.seed, "asr-eval"));
        nlohmann::json doc = {{"cacc", r.cacc},
                              {"asr", r.asr},
                              {"n_clean_eval", r.n_clean_eval},
                              {"n_attack_eval", r.n_attack_eval}};
        std::cout << doc.dump(2) << "\n";
        if (!g.out.empty()) {
          ensure_parent(g.out);
          std::ofstream(g.out) << doc.dump(2) << "\n";
        }
      });
    } else if (cmd == "run-experiment") {
      run_stage("run-experiment", [&] {
        if (g.config.empty()) throw ConfigError("--config is required");
        ExperimentConfig cfg = load_experiment_config(g.config);
        if (app.count("--generator") > 0) cfg.generator = backend_kind_from_string(g.generator);
        const ExperimentReport report = run_experiment(cfg);
        const fs::path dir = require_out(g, "report directory");
        emit_report(report, dir);
        std::size_t failed = 0;
        for (const auto& r : report.rows) failed += r.status != "ok";
        std::cout << "wrote " << report.rows.size() << " rows (" << failed
                  << " failed) to " << dir.string() << "\n";
      });
    }
  } catch (const StageFailure& f) {
    std::cerr << "bdlab " << f.stage << ": " << f.message << "\n";
    return 1;
  }
  return 0;
}
