#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fshpo/datagen.hpp"
#include "fshpo/episodes.hpp"
#include "fshpo/hpspace.hpp"
#include "fshpo/ledger.hpp"
#include "fshpo/objective.hpp"
#include "fshpo/runtime.hpp"
#include "fshpo/scheduler.hpp"

namespace fshpo {

/// A domain is either generated from a spec or loaded from a saved dataset.
struct DomainSource {
  std::optional<DomainSpec> spec;
  std::optional<std::filesystem::path> path;
};

struct ExecutorConfig {
  enum class Mode { kInProcess, kMaster } mode = Mode::kInProcess;
  int n_parallel = 1;
  std::string host = "127.0.0.1";
  int port = 0;
  std::int64_t heartbeat_ms = 10000;
};

struct RunConfig {
  SpaceVariant space = SpaceVariant::kS1;
  std::int64_t b_min = 444;
  std::int64_t b_max = 4000;
  int eta = 3;
  int n_sh_iterations = 12;
  bool model_based = true;
  ProposalConfig kde;

  std::map<std::string, DomainSource> domains;
  std::array<double, 3> split_fractions{0.7, 0.15, 0.15};
  std::string train_domain;
  std::vector<std::string> validation_domains;
  std::vector<std::string> test_domains;

  EpisodeSpec episodes = EpisodeSpec::fixed(5, 5);
  ClassifierKind classifier = ClassifierKind::kNearestCentroid;
  int n_val_tasks = 100;
  int n_test_tasks = 600;
  bool baseline_augmentation = false;
  std::uint64_t seed = 1;
  ExecutorConfig executor;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  SchedulerOptions scheduler_options() const;
  std::uint64_t split_seed() const;
  std::uint64_t val_seed() const;
  std::uint64_t test_seed() const;
};

enum class SplitKind { kTrain, kVal, kTest };

/// Datasets and the class split of one run, built from a RunConfig.
class Experiment {
 public:
  explicit Experiment(RunConfig config);
  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  const RunConfig& config() const { return config_; }
  const SplitSet& split() const { return split_; }
  const Dataset& domain(const std::string& name) const;
  std::map<std::string, std::uint32_t> dataset_hashes() const;

  std::vector<ClassSubset> subsets(const std::vector<std::string>& domains, SplitKind kind) const;
  NetSpec net_spec() const;
  FewShotSetup objective_setup() const;
  nlohmann::json run_header() const;

 private:
  RunConfig config_;
  std::map<std::string, std::unique_ptr<Dataset>> data_;
  SplitSet split_;
};

struct RunSummary {
  std::optional<std::int64_t> best_trial;
  nlohmann::json best_config;
  double best_val_accuracy = 0.0;
  std::optional<EvalReport> test;
  std::size_t n_trials = 0;
  bool completed = false;

  nlohmann::json to_json() const;
  static RunSummary from_json(const nlohmann::json& j);
};

/// Layout of a run directory.
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path config() const { return dir / "run_config.json"; }
  std::filesystem::path ledger() const { return dir / "ledger.jsonl"; }
  std::filesystem::path checkpoints() const { return dir / "checkpoints"; }
  std::filesystem::path best_checkpoint() const { return dir / "best.ckpt"; }
  std::filesystem::path summary() const { return dir / "summary.json"; }
};

/// BOHB run into `out_dir`: ledger, per-trial checkpoints, best.ckpt and
/// summary.json with the best model's test report.
RunSummary cmd_run(const RunConfig& config, const std::filesystem::path& out_dir);
/// Continues the run in `out_dir` from its ledger.
RunSummary cmd_resume(const std::filesystem::path& out_dir);

/// Evaluates a checkpoint on few-shot tasks of `subsets`.
EvalReport cmd_eval(const TrainState& checkpoint, const std::vector<ClassSubset>& subsets, ClassifierKind kind,
                    int n_tasks, const EpisodeSpec& spec, std::uint64_t seed);

/// Finished b_max trials ranked by accuracy (desc), ties to the smaller id.
std::vector<LedgerTrial> top_trials(const std::vector<LedgerTrial>& trials, std::int64_t b_max, std::size_t n);

/// Per query, class scores averaged over the members, then argmax.
EvalReport evaluate_ensemble(const std::vector<const NetParams*>& members, const std::vector<ClassSubset>& subsets,
                             int n_tasks, const EpisodeSpec& spec, ClassifierKind kind, std::uint64_t seed);

struct EnsembleResult {
  std::vector<std::int64_t> members;
  EvalReport ensemble;
  EvalReport best_single;
  nlohmann::json to_json() const;
};

/// Top-N b_max trials of the ledger, loaded from `store`. Throws listing the
/// trial ids whose checkpoints are missing.
EnsembleResult cmd_ensemble(const RunLedger& ledger, const CheckpointStore& store, std::int64_t b_max,
                            std::size_t top_n, const std::vector<ClassSubset>& subsets, ClassifierKind kind,
                            int n_tasks, const EpisodeSpec& spec, std::uint64_t seed);

/// The best trial's configuration retrained from scratch at b_max with n
/// different seeds, ensembled.
EnsembleResult cmd_ensemble_retrain(const RunLedger& ledger, const FewShotObjective& objective,
                                    std::int64_t b_max, std::size_t n, const std::vector<ClassSubset>& subsets,
                                    int n_tasks, const EpisodeSpec& spec, ClassifierKind kind, std::uint64_t seed);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string to_csv() const;
  static CsvTable parse(const std::string& text);
  bool operator==(const CsvTable&) const = default;
};

/// Finished trials with accuracy in (Vmax - window, Vmax]: accuracy, then
/// every hyperparameter, sorted by accuracy descending (ties by trial id).
CsvTable cmd_pcp(const std::vector<LedgerTrial>& trials, double window = 5.0);

/// (n_ops, val_accuracy) of every finished trial. Rejects ledgers whose
/// space has no n_ops parameter.
CsvTable cmd_nops_scatter(const std::vector<LedgerTrial>& trials, SpaceVariant space);

/// Hyperparameter groups pinned to the reference configuration; the rest is
/// sampled uniformly.
enum class FrozenSubset {
  kOptimization,        // sigmas and n_ops random
  kOptimizationNops,    // sigmas random
  kAugmentation,        // optimization and n_ops random
  kAugmentationNops,    // optimization random
  kAll,                 // nothing random, seeds differ
};

std::string to_string(FrozenSubset s);
FrozenSubset parse_frozen_subset(const std::string& s);

/// reference with the parameters outside `frozen` replaced by uniform draws.
Configuration randomize_complement(const SearchSpace& space, const Configuration& reference, FrozenSubset frozen,
                                   Rng& rng);

struct SensitivityReport {
  FrozenSubset frozen = FrozenSubset::kAll;
  std::vector<double> accuracies;
  std::vector<nlohmann::json> configs;
  double mean = 0.0;
  double sd = 0.0;
  double min = 0.0;
  double max = 0.0;

  nlohmann::json to_json() const;
};

/// Trains n_models extractors for `budget` base updates and scores them on
/// the objective's validation tasks.
SensitivityReport cmd_sensitivity(const FewShotObjective& objective, const Configuration& reference,
                                  FrozenSubset frozen, int n_models, std::int64_t budget, std::uint64_t seed);

}  // namespace fshpo
