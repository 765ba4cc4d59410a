#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fshpo/hpspace.hpp"
#include "fshpo/kde.hpp"
#include "fshpo/ledger.hpp"
#include "fshpo/random.hpp"

namespace fshpo {

/// Budgets are mini-batch updates at the base batch size of 16.
class BudgetLadder {
 public:
  BudgetLadder(std::int64_t b_min, std::int64_t b_max, int eta = 3);

  std::int64_t b_min() const { return b_min_; }
  std::int64_t b_max() const { return b_max_; }
  int eta() const { return eta_; }
  int s_max() const { return s_max_; }
  /// Ascending rung budgets b_max * eta^-s for s = s_max .. 0.
  const std::vector<std::int64_t>& rungs() const { return rungs_; }
  /// Budget b_max * eta^-s.
  std::int64_t budget_for(int s) const;

 private:
  std::int64_t b_min_;
  std::int64_t b_max_;
  int eta_;
  int s_max_;
  std::vector<std::int64_t> rungs_;
};

struct BracketStage {
  std::int64_t n_configs = 0;
  /// Exponent k such that the stage budget is b_max * eta^-k.
  int budget_exponent = 0;
};

struct BracketPlan {
  int s = 0;
  std::vector<BracketStage> stages;
};

BracketPlan plan_bracket(int s_max, int s, int eta);

enum class TrialOrigin { kRandom, kModel, kPromoted };
enum class TrialState { kQueued, kRunning, kDone, kFailed };

std::string to_string(TrialOrigin o);
TrialOrigin parse_trial_origin(const std::string& s);

struct Trial {
  std::int64_t id = 0;
  Configuration config;
  std::int64_t budget = 0;
  TrialOrigin origin = TrialOrigin::kRandom;
  TrialState state = TrialState::kQueued;
  std::optional<double> val_accuracy;
  std::uint64_t seed = 0;
  std::optional<std::int64_t> parent;
  int iteration = 0;
  int stage = 0;
  double train_loss = 0.0;
  bool diverged = false;
};

/// Top floor(n/eta) by accuracy, ties to the smaller id. Only done trials
/// participate.
std::vector<Trial> promote(std::vector<Trial> rung_results, int eta);

/// Scales an update count given for batch size 16 to `batch_size`.
std::int64_t scale_updates(std::int64_t base_updates, std::int64_t batch_size);

/// A unit of work handed to an objective.
struct JobSpec {
  std::int64_t trial_id = 0;
  Configuration config;
  std::int64_t budget = 0;
  std::uint64_t seed = 0;
  std::optional<std::int64_t> parent;
};

struct JobOutcome {
  std::int64_t trial_id = 0;
  bool ok = true;  // false: objective raised; error holds the message
  double val_accuracy = 0.0;
  double train_loss = 0.0;
  double wall_seconds = 0.0;
  bool diverged = false;
  std::string error;
};

using Objective = std::function<JobOutcome(const JobSpec&)>;

struct SchedulerOptions {
  std::int64_t b_min = 1;
  std::int64_t b_max = 1;
  int eta = 3;
  int n_iterations = 1;
  ProposalConfig kde;
  std::uint64_t seed = 0;
  /// false: plain Hyperband (uniform sampling only).
  bool model_based = true;

  nlohmann::json to_json() const;
  static SchedulerOptions from_json(const nlohmann::json& j);
};

class RunAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hyperband bracket schedule with KDE-guided sampling. Iterations run one
/// after another; all first-stage configurations of an iteration are sampled
/// when it starts, so the schedule is a deterministic function of the seed
/// and the multiset of results.
class BohbScheduler {
 public:
  BohbScheduler(SearchSpace space, SchedulerOptions options);

  const SearchSpace& space() const { return space_; }
  const SchedulerOptions& options() const { return options_; }
  const BudgetLadder& ladder() const { return ladder_; }

  /// Mirror sampling/start/terminal events into `ledger` (may be null).
  void set_ledger(RunLedger* ledger) { ledger_ = ledger; }

  /// Next queued trial (marked running), or nullopt when the current stage is
  /// waiting on results or the run is finished.
  std::optional<Trial> next_job(const std::string& worker = {});

  /// Returns false when the trial already has a terminal record (duplicate).
  bool record_result(const JobOutcome& outcome);
  /// Puts a running trial back in the queue (lost worker).
  void requeue(std::int64_t trial_id);

  bool finished() const { return finished_; }
  int current_iteration() const { return iteration_; }
  std::size_t in_flight() const;
  std::size_t queued() const { return queue_.size(); }

  const std::vector<Trial>& trials() const { return trials_; }
  const Trial& trial(std::int64_t id) const;

  /// Highest accuracy at b_max; ties to the smaller id.
  std::optional<Trial> best() const;

  /// Sampling rule for a fresh configuration given completed results.
  std::pair<Configuration, TrialOrigin> sample_configuration();

 private:
  void start_iteration();
  void maybe_advance();
  std::int64_t add_trial(Trial t);
  void log(EventType type, nlohmann::json payload);

  SearchSpace space_;
  SchedulerOptions options_;
  BudgetLadder ladder_;
  Rng rng_;
  RunLedger* ledger_ = nullptr;

  std::vector<Trial> trials_;
  std::vector<std::int64_t> queue_;
  int iteration_ = -1;
  int stage_ = 0;
  BracketPlan plan_;
  std::vector<std::int64_t> stage_trials_;
  int iteration_failures_ = 0;
  int iteration_trials_ = 0;
  bool finished_ = false;
};

nlohmann::json trial_sampled_payload(const Trial& t);

}  // namespace fshpo
