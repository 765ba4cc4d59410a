#include "fshpo/objective.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

#include "fshpo/augment.hpp"

namespace fshpo {

void MemoryCheckpointStore::put(std::int64_t trial_id, const TrainState& state) {
  auto bytes = state.serialize();
  std::lock_guard lock(mu_);
  states_[trial_id] = std::move(bytes);
}

std::optional<TrainState> MemoryCheckpointStore::get(std::int64_t trial_id) const {
  std::lock_guard lock(mu_);
  const auto it = states_.find(trial_id);
  if (it == states_.end()) return std::nullopt;
  return TrainState::deserialize(it->second);
}

DirectoryCheckpointStore::DirectoryCheckpointStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::filesystem::path DirectoryCheckpointStore::path_of(std::int64_t trial_id) const {
  return dir_ / ("trial_" + std::to_string(trial_id) + ".ckpt");
}

void DirectoryCheckpointStore::put(std::int64_t trial_id, const TrainState& state) {
  state.save(path_of(trial_id));
}

std::optional<TrainState> DirectoryCheckpointStore::get(std::int64_t trial_id) const {
  const auto p = path_of(trial_id);
  if (!std::filesystem::exists(p)) return std::nullopt;
  return TrainState::load(p);
}

TrainSplit make_train_split(const Dataset& data, const std::vector<int>& classes) {
  if (classes.empty()) throw std::invalid_argument("training split has no classes");
  TrainSplit split;
  split.images = &data.images;
  split.n_classes = static_cast<int>(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    for (auto idx : data.examples_of(classes[c])) {
      split.indices.push_back(idx);
      split.labels.push_back(static_cast<int>(c));
    }
  }
  return split;
}

FewShotObjective::FewShotObjective(FewShotSetup setup, std::shared_ptr<CheckpointStore> store)
    : setup_(std::move(setup)), store_(std::move(store)) {
  if (!store_) throw std::invalid_argument("objective needs a checkpoint store");
  if (setup_.validation.empty()) throw std::invalid_argument("objective needs a validation split");
  if (setup_.n_val_tasks < 1) throw std::invalid_argument("n_val_tasks must be >= 1");
  setup_.net.validate();
  if (setup_.net.n_classes != setup_.train.n_classes)
    throw std::invalid_argument("network head width does not match the training classes");
}

TrainState FewShotObjective::train_job(const JobSpec& job) const {
  const auto cfg = TrainConfig::from_configuration(job.config);
  const auto n_updates = scale_updates(job.budget, cfg.batch_size);
  TrainOptions options;
  options.baseline_augmentation = setup_.baseline_augmentation;
  options.policy = policy_from_config(setup_.space, job.config, job.seed);

  std::optional<TrainState> resume;
  if (job.parent) {
    resume = store_->get(*job.parent);
    if (!resume) throw std::runtime_error("missing checkpoint of parent trial " + std::to_string(*job.parent));
  }
  auto st = train(setup_.train, setup_.net, cfg, n_updates, job.seed, options, std::move(resume));
  st.extractor.config_id = std::to_string(job.config.checksum());
  return st;
}

double FewShotObjective::validate(const NetParams& params) const {
  return evaluate_mixture(params, setup_.validation, setup_.n_val_tasks, setup_.episodes, setup_.classifier,
                          setup_.val_seed)
      .mean_accuracy;
}

JobOutcome FewShotObjective::operator()(const JobSpec& job) const {
  const auto t0 = std::chrono::steady_clock::now();
  const auto st = train_job(job);
  store_->put(job.trial_id, st);
  JobOutcome out;
  out.trial_id = job.trial_id;
  out.train_loss = st.last_loss;
  out.diverged = st.diverged;
  out.val_accuracy = st.diverged ? 0.0 : validate(st.extractor.params);
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace fshpo
