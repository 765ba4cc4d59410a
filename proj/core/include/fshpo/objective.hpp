#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>

#include "fshpo/datagen.hpp"
#include "fshpo/episodes.hpp"
#include "fshpo/hpspace.hpp"
#include "fshpo/scheduler.hpp"
#include "fshpo/tinynet.hpp"

namespace fshpo {

/// Training states keyed by trial id, used to continue promoted trials.
class CheckpointStore {
 public:
  virtual ~CheckpointStore() = default;
  virtual void put(std::int64_t trial_id, const TrainState& state) = 0;
  virtual std::optional<TrainState> get(std::int64_t trial_id) const = 0;
};

class MemoryCheckpointStore final : public CheckpointStore {
 public:
  void put(std::int64_t trial_id, const TrainState& state) override;
  std::optional<TrainState> get(std::int64_t trial_id) const override;

 private:
  mutable std::mutex mu_;
  std::map<std::int64_t, std::vector<std::byte>> states_;
};

/// One file per trial, `trial_<id>.ckpt`; shareable between processes.
class DirectoryCheckpointStore final : public CheckpointStore {
 public:
  explicit DirectoryCheckpointStore(std::filesystem::path dir);
  void put(std::int64_t trial_id, const TrainState& state) override;
  std::optional<TrainState> get(std::int64_t trial_id) const override;
  std::filesystem::path path_of(std::int64_t trial_id) const;

 private:
  std::filesystem::path dir_;
};

/// Classes of `data` relabeled 0..n-1 in the given order.
TrainSplit make_train_split(const Dataset& data, const std::vector<int>& classes);

struct FewShotSetup {
  SearchSpace space = define_space(SpaceVariant::kS1);
  TrainSplit train;
  NetSpec net;
  std::vector<ClassSubset> validation;
  EpisodeSpec episodes;
  ClassifierKind classifier = ClassifierKind::kNearestCentroid;
  int n_val_tasks = 100;
  std::uint64_t val_seed = 0;
  bool baseline_augmentation = false;
};

/// Trains the trial's configuration for its (batch-scaled) budget, continuing
/// from the parent's checkpoint when there is one, and scores the extractor
/// on validation episodes. Diverged training scores 0.
class FewShotObjective {
 public:
  FewShotObjective(FewShotSetup setup, std::shared_ptr<CheckpointStore> store);

  JobOutcome operator()(const JobSpec& job) const;

  /// Training state of a job without evaluation or checkpointing.
  TrainState train_job(const JobSpec& job) const;
  double validate(const NetParams& params) const;

  const FewShotSetup& setup() const { return setup_; }
  CheckpointStore& store() const { return *store_; }

 private:
  FewShotSetup setup_;
  std::shared_ptr<CheckpointStore> store_;
};

}  // namespace fshpo
