#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fshpo/cli_report.hpp"

namespace fs = std::filesystem;
using namespace fshpo;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

RunConfig load_config(const Globals& g) {
  if (g.config.empty()) throw std::invalid_argument("--config is required");
  auto c = RunConfig::load(g.config);
  if (g.seed) c.seed = *g.seed;
  return c;
}

void emit(const Globals& g, const std::string& name, const std::string& text) {
  fs::create_directories(g.out);
  const auto path = fs::path(g.out) / name;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  std::cout << text;
  if (!text.empty() && text.back() != '\n') std::cout << "\n";
}

std::pair<std::string, int> parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("endpoint must be host:port");
  return {s.substr(0, colon), std::stoi(s.substr(colon + 1))};
}

SplitKind parse_split(const std::string& s) {
  if (s == "train") return SplitKind::kTrain;
  if (s == "val") return SplitKind::kVal;
  if (s == "test") return SplitKind::kTest;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

SpaceVariant ledger_space(const RunLedger& ledger) {
  const auto h = ledger.header();
  if (!h) throw std::runtime_error("ledger has no run header");
  return parse_space_variant(h->at("space").get<std::string>());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot hyperparameter optimization with BOHB"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Run configuration JSON");
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_option("--out", g.out, "Output directory");

  auto* run = app.add_subcommand("run", "Run BOHB and evaluate the best model");
  auto* resume = app.add_subcommand("resume", "Continue the run in --out from its ledger");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on few-shot tasks");
  std::string ckpt, domain, split = "test", classifier;
  int n_tasks = 600;
  int ways = 5, shots = 5;
  bool variable = false;
  std::string run_dir;
  eval->add_option("checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--domain", domain, "Domain name from the config (default: first test domain)");
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--classifier", classifier, "ncentroid or linear (default: from config)");
  eval->add_option("--tasks", n_tasks, "Number of few-shot tasks");
  eval->add_option("--ways", ways);
  eval->add_option("--shots", shots);
  eval->add_flag("--variable", variable, "Variable ways/shots episodes");
  eval->add_option("--run-dir", run_dir, "Run directory whose ledger records the dataset hashes");

  auto* ens = app.add_subcommand("ensemble", "Ensemble the top-N models of a run");
  std::size_t top_n = 5;
  bool retrain = false;
  int ens_tasks = 600;
  ens->add_option("--top", top_n, "Ensemble size");
  ens->add_flag("--retrain", retrain, "Retrain the best configuration N times instead");
  ens->add_option("--split", split, "val or test");
  ens->add_option("--tasks", ens_tasks);

  auto* pcp = app.add_subcommand("pcp", "Parallel-coordinates CSV of the best trials");
  double window = 5.0;
  pcp->add_option("--window", window, "Accuracy window below the best trial");

  auto* sens = app.add_subcommand("sensitivity", "Variance when randomizing part of the best configuration");
  std::string frozen = "optimization";
  int n_models = 15;
  std::int64_t budget = 0;
  sens->add_option("--frozen", frozen, "optimization, optimization+nops, augmentation, augmentation+nops, all");
  sens->add_option("--models", n_models);
  sens->add_option("--budget", budget, "Base updates per model (default: b_max)");

  auto* nops = app.add_subcommand("nops-scatter", "CSV of (n_ops, accuracy) per finished trial");

  auto* make = app.add_subcommand("make-data", "Render the configured domains to --out/<name>");

  auto* worker = app.add_subcommand("worker", "Serve jobs from a master");
  std::string endpoint;
  std::string worker_id = "worker";
  std::int64_t heartbeat_ms = 10000;
  worker->add_option("--connect", endpoint, "Master host:port")->required();
  worker->add_option("--id", worker_id);
  worker->add_option("--heartbeat-ms", heartbeat_ms);

  CLI11_PARSE(app, argc, argv);

  try {
    const RunPaths paths{g.out};
    if (*run) {
      const auto s = cmd_run(load_config(g), g.out);
      std::cout << s.to_json().dump(2) << "\n";
    } else if (*resume) {
      const auto s = cmd_resume(g.out);
      std::cout << s.to_json().dump(2) << "\n";
    } else if (*eval) {
      const auto config = load_config(g);
      const Experiment exp(config);
      if (domain.empty()) domain = config.test_domains.front();
      if (!run_dir.empty()) {
        const auto ledger = RunLedger::load(RunPaths{run_dir}.ledger());
        const auto h = ledger.header();
        const auto hashes = exp.dataset_hashes();
        if (h && h->at("dataset_hashes").value(domain, std::uint32_t{0}) != hashes.at(domain))
          std::cerr << "warning: dataset '" << domain << "' differs from the one the run was trained with\n";
      }
      const auto kind = classifier.empty() ? config.classifier : parse_classifier(classifier);
      const auto spec = variable ? EpisodeSpec::variable() : EpisodeSpec::fixed(ways, shots);
      const auto report = cmd_eval(TrainState::load(ckpt), exp.subsets({domain}, parse_split(split)), kind, n_tasks,
                                   spec, config.test_seed());
      emit(g, "eval.json", report.to_json().dump(2));
    } else if (*ens) {
      const auto config = RunConfig::load(paths.config());
      const Experiment exp(config);
      const auto ledger = RunLedger::load(paths.ledger());
      const auto domains = split == "val" ? config.validation_domains : config.test_domains;
      const auto subsets = exp.subsets(domains, parse_split(split));
      EnsembleResult r;
      if (retrain) {
        const FewShotObjective objective(exp.objective_setup(), std::make_shared<MemoryCheckpointStore>());
        r = cmd_ensemble_retrain(ledger, objective, config.b_max, top_n, subsets, ens_tasks, config.episodes,
                                 config.classifier, config.test_seed());
      } else {
        const DirectoryCheckpointStore store(paths.checkpoints());
        r = cmd_ensemble(ledger, store, config.b_max, top_n, subsets, config.classifier, ens_tasks,
                         config.episodes, config.test_seed());
      }
      emit(g, retrain ? "ensemble_retrain.json" : "ensemble.json", r.to_json().dump(2));
    } else if (*pcp) {
      const auto ledger = RunLedger::load(paths.ledger());
      emit(g, "pcp.csv", cmd_pcp(ledger.trials(), window).to_csv());
    } else if (*nops) {
      const auto ledger = RunLedger::load(paths.ledger());
      emit(g, "nops_scatter.csv", cmd_nops_scatter(ledger.trials(), ledger_space(ledger)).to_csv());
    } else if (*sens) {
      const auto config = RunConfig::load(paths.config());
      const Experiment exp(config);
      const auto summary = RunSummary::from_json(nlohmann::json::parse(std::ifstream(paths.summary())));
      if (!summary.best_trial) throw std::runtime_error("run has no best model");
      const FewShotObjective objective(exp.objective_setup(), std::make_shared<MemoryCheckpointStore>());
      const auto report = cmd_sensitivity(objective, Configuration::from_json(summary.best_config),
                                          parse_frozen_subset(frozen), n_models, budget > 0 ? budget : config.b_max,
                                          g.seed.value_or(config.seed));
      emit(g, "sensitivity_" + frozen + ".json", report.to_json().dump(2));
    } else if (*make) {
      const auto config = load_config(g);
      for (const auto& [name, src] : config.domains) {
        if (!src.spec) continue;
        const auto data = make_domain(*src.spec);
        data.save(fs::path(g.out) / name);
        std::cout << name << ": " << data.images.count() << " images, hash " << data.content_hash() << "\n";
      }
    } else if (*worker) {
      const auto config = load_config(g);
      const Experiment exp(config);
      auto store = std::make_shared<DirectoryCheckpointStore>(paths.checkpoints());
      const FewShotObjective objective(exp.objective_setup(), store);
      const auto [host, port] = parse_endpoint(endpoint);
      WorkerOptions wo;
      wo.worker_id = worker_id;
      wo.heartbeat_interval = std::chrono::milliseconds(heartbeat_ms);
      const int jobs = run_worker(host, port, [&](const JobSpec& j) { return objective(j); }, wo);
      std::cerr << "worker " << worker_id << ": " << jobs << " jobs\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "fshpo: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
