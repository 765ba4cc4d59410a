#include "fshpo/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace fshpo {

namespace {

std::int64_t ipow(std::int64_t base, int exp) {
  std::int64_t r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

}  // namespace

BudgetLadder::BudgetLadder(std::int64_t b_min, std::int64_t b_max, int eta)
    : b_min_(b_min), b_max_(b_max), eta_(eta) {
  if (b_min < 1) throw std::invalid_argument("b_min must be a positive integer");
  if (b_min > b_max) throw std::invalid_argument("b_min must not exceed b_max");
  if (eta < 2) throw std::invalid_argument("eta must be >= 2");
  s_max_ = 0;
  while (b_min_ * ipow(eta_, s_max_ + 1) <= b_max_) ++s_max_;
  for (int s = s_max_; s >= 0; --s) rungs_.push_back(budget_for(s));
}

std::int64_t BudgetLadder::budget_for(int s) const {
  if (s < 0 || s > s_max_) throw std::out_of_range("bracket exponent out of range");
  return std::max<std::int64_t>(
      1, std::llround(static_cast<double>(b_max_) / static_cast<double>(ipow(eta_, s))));
}

BracketPlan plan_bracket(int s_max, int s, int eta) {
  if (eta < 2) throw std::invalid_argument("eta must be >= 2");
  if (s < 0 || s > s_max)
    throw std::invalid_argument("bracket index " + std::to_string(s) +
                                " outside [0, " + std::to_string(s_max) + "]");
  const std::int64_t num = static_cast<std::int64_t>(s_max + 1) * ipow(eta, s);
  const std::int64_t den = s + 1;
  std::int64_t n = (num + den - 1) / den;
  BracketPlan plan;
  plan.s = s;
  for (int i = 0; i <= s; ++i) {
    plan.stages.push_back({n, s - i});
    n /= eta;
  }
  return plan;
}

std::string to_string(TrialOrigin o) {
  switch (o) {
    case TrialOrigin::kRandom: return "random";
    case TrialOrigin::kModel: return "model";
    case TrialOrigin::kPromoted: return "promoted";
  }
  return "?";
}

TrialOrigin parse_trial_origin(const std::string& s) {
  if (s == "random") return TrialOrigin::kRandom;
  if (s == "model") return TrialOrigin::kModel;
  if (s == "promoted") return TrialOrigin::kPromoted;
  throw std::invalid_argument("unknown trial origin '" + s + "'");
}

std::vector<Trial> promote(std::vector<Trial> rung_results, int eta) {
  if (eta < 2) throw std::invalid_argument("eta must be >= 2");
  std::erase_if(rung_results, [](const Trial& t) {
    return t.state != TrialState::kDone || !t.val_accuracy.has_value();
  });
  std::sort(rung_results.begin(), rung_results.end(), [](const Trial& a, const Trial& b) {
    if (*a.val_accuracy != *b.val_accuracy) return *a.val_accuracy > *b.val_accuracy;
    return a.id < b.id;
  });
  rung_results.resize(rung_results.size() / static_cast<std::size_t>(eta));
  return rung_results;
}

std::int64_t scale_updates(std::int64_t base_updates, std::int64_t batch_size) {
  switch (batch_size) {
    case 4: case 8: case 16: case 32: case 64:
      return base_updates * 16 / batch_size;
    default:
      throw std::invalid_argument("batch size " + std::to_string(batch_size) +
                                  " not in {4, 8, 16, 32, 64}");
  }
}

nlohmann::json SchedulerOptions::to_json() const {
  return {
      {"b_min", b_min},
      {"b_max", b_max},
      {"eta", eta},
      {"n_iterations", n_iterations},
      {"seed", seed},
      {"model_based", model_based},
      {"kde",
       {{"n_candidates", kde.n_candidates},
        {"bandwidth_factor", kde.bandwidth_factor},
        {"random_fraction", kde.random_fraction},
        {"good_quantile", kde.good_quantile},
        {"min_points_per_model", kde.min_points_per_model}}},
  };
}

SchedulerOptions SchedulerOptions::from_json(const nlohmann::json& j) {
  SchedulerOptions o;
  o.b_min = j.at("b_min").get<std::int64_t>();
  o.b_max = j.at("b_max").get<std::int64_t>();
  o.eta = j.value("eta", 3);
  o.n_iterations = j.at("n_iterations").get<int>();
  o.seed = j.value("seed", std::uint64_t{0});
  o.model_based = j.value("model_based", true);
  if (j.contains("kde")) {
    const auto& k = j["kde"];
    o.kde.n_candidates = k.value("n_candidates", o.kde.n_candidates);
    o.kde.bandwidth_factor = k.value("bandwidth_factor", o.kde.bandwidth_factor);
    o.kde.random_fraction = k.value("random_fraction", o.kde.random_fraction);
    o.kde.good_quantile = k.value("good_quantile", o.kde.good_quantile);
    o.kde.min_points_per_model = k.value("min_points_per_model", o.kde.min_points_per_model);
  }
  return o;
}

nlohmann::json trial_sampled_payload(const Trial& t) {
  return {
      {"trial_id", t.id},
      {"config", t.config.to_json()},
      {"config_checksum", t.config.checksum()},
      {"budget", t.budget},
      {"origin", to_string(t.origin)},
      {"parent", t.parent ? nlohmann::json(*t.parent) : nlohmann::json(nullptr)},
      {"seed", t.seed},
      {"iteration", t.iteration},
      {"stage", t.stage},
  };
}

BohbScheduler::BohbScheduler(SearchSpace space, SchedulerOptions options)
    : space_(std::move(space)),
      options_(std::move(options)),
      ladder_(options_.b_min, options_.b_max, options_.eta),
      rng_(make_rng(derive_seed(options_.seed, tag_hash("sampler")))) {
  options_.kde.validate();
  if (options_.n_iterations < 0) throw std::invalid_argument("n_iterations must be >= 0");
}

const Trial& BohbScheduler::trial(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= trials_.size())
    throw std::out_of_range("unknown trial id " + std::to_string(id));
  return trials_[static_cast<std::size_t>(id)];
}

std::size_t BohbScheduler::in_flight() const {
  return static_cast<std::size_t>(std::count_if(trials_.begin(), trials_.end(), [](const Trial& t) {
    return t.state == TrialState::kRunning;
  }));
}

void BohbScheduler::log(EventType type, nlohmann::json payload) {
  if (ledger_ != nullptr) ledger_->append(type, std::move(payload));
}

std::int64_t BohbScheduler::add_trial(Trial t) {
  t.id = static_cast<std::int64_t>(trials_.size());
  if (t.origin != TrialOrigin::kPromoted)
    t.seed = derive_seed(options_.seed, tag_hash("trial"), static_cast<std::uint64_t>(t.id));
  t.iteration = iteration_;
  t.stage = stage_;
  log(EventType::kTrialSampled, trial_sampled_payload(t));
  trials_.push_back(std::move(t));
  queue_.push_back(trials_.back().id);
  stage_trials_.push_back(trials_.back().id);
  ++iteration_trials_;
  return trials_.back().id;
}

std::pair<Configuration, TrialOrigin> BohbScheduler::sample_configuration() {
  if (!options_.model_based) return {space_.sample_uniform(rng_), TrialOrigin::kRandom};
  const double u = uniform01(rng_);

  const auto min_points = static_cast<std::size_t>(options_.kde.min_points(space_.dim()));
  std::map<std::int64_t, std::vector<const Trial*>> by_budget;
  for (const auto& t : trials_)
    if (t.state == TrialState::kDone) by_budget[t.budget].push_back(&t);
  const std::vector<const Trial*>* model_data = nullptr;
  for (auto it = by_budget.rbegin(); it != by_budget.rend(); ++it) {
    if (it->second.size() >= 2 * min_points) {
      model_data = &it->second;
      break;
    }
  }
  if (u < options_.kde.random_fraction || model_data == nullptr)
    return {space_.sample_uniform(rng_), TrialOrigin::kRandom};

  std::vector<ScoredPoint> scored;
  scored.reserve(model_data->size());
  for (const Trial* t : *model_data)
    scored.push_back({space_.encode(t->config), t->val_accuracy.value_or(0.0), t->id});
  auto split = split_good_bad(std::move(scored), options_.kde, space_.dim());
  const auto good = KdeModel::fit(std::move(split.good));
  std::optional<KdeModel> bad;
  if (!split.bad.empty()) bad = KdeModel::fit(std::move(split.bad));
  const auto point = propose(good, bad ? &*bad : nullptr, options_.kde, rng_);
  return {space_.decode(point), TrialOrigin::kModel};
}

void BohbScheduler::start_iteration() {
  ++iteration_;
  stage_ = 0;
  stage_trials_.clear();
  iteration_failures_ = 0;
  iteration_trials_ = 0;
  if (iteration_ >= options_.n_iterations) {
    finished_ = true;
    return;
  }
  const int s_max = ladder_.s_max();
  const int s = s_max - (iteration_ % (s_max + 1));
  plan_ = plan_bracket(s_max, s, options_.eta);
  const auto& first = plan_.stages.front();
  for (std::int64_t i = 0; i < first.n_configs; ++i) {
    auto [config, origin] = sample_configuration();
    Trial t;
    t.config = std::move(config);
    t.origin = origin;
    t.budget = ladder_.budget_for(first.budget_exponent);
    add_trial(std::move(t));
  }
}

void BohbScheduler::maybe_advance() {
  while (!finished_) {
    const bool stage_done = std::all_of(stage_trials_.begin(), stage_trials_.end(), [&](std::int64_t id) {
      const auto st = trials_[static_cast<std::size_t>(id)].state;
      return st == TrialState::kDone || st == TrialState::kFailed;
    });
    if (!stage_done) return;
    if (2 * iteration_failures_ > iteration_trials_)
      throw RunAborted("iteration " + std::to_string(iteration_) + ": " +
                       std::to_string(iteration_failures_) + " of " +
                       std::to_string(iteration_trials_) + " trials failed");

    std::vector<Trial> promoted;
    if (static_cast<std::size_t>(stage_ + 1) < plan_.stages.size()) {
      std::vector<Trial> rung;
      for (auto id : stage_trials_) rung.push_back(trials_[static_cast<std::size_t>(id)]);
      promoted = promote(std::move(rung), options_.eta);
      const auto cap = static_cast<std::size_t>(plan_.stages[static_cast<std::size_t>(stage_ + 1)].n_configs);
      if (promoted.size() > cap) promoted.resize(cap);
    }
    if (promoted.empty()) {
      start_iteration();
      if (finished_ || !stage_trials_.empty()) return;
      continue;
    }
    ++stage_;
    stage_trials_.clear();
    const auto budget = ladder_.budget_for(plan_.stages[static_cast<std::size_t>(stage_)].budget_exponent);
    for (const auto& parent : promoted) {
      Trial t;
      t.config = parent.config;
      t.origin = TrialOrigin::kPromoted;
      t.seed = parent.seed;
      t.parent = parent.id;
      t.budget = budget;
      add_trial(std::move(t));
    }
    return;
  }
}

std::optional<Trial> BohbScheduler::next_job(const std::string& worker) {
  if (iteration_ < 0) {
    start_iteration();
    maybe_advance();
  }
  if (finished_ || queue_.empty()) return std::nullopt;
  const auto id = queue_.front();
  queue_.erase(queue_.begin());
  auto& t = trials_[static_cast<std::size_t>(id)];
  t.state = TrialState::kRunning;
  log(EventType::kTrialStarted,
      {{"trial_id", id}, {"config_checksum", t.config.checksum()}, {"worker", worker}});
  return t;
}

bool BohbScheduler::record_result(const JobOutcome& outcome) {
  if (outcome.trial_id < 0 || static_cast<std::size_t>(outcome.trial_id) >= trials_.size())
    throw std::out_of_range("result for unknown trial " + std::to_string(outcome.trial_id));
  auto& t = trials_[static_cast<std::size_t>(outcome.trial_id)];
  if (t.state == TrialState::kDone || t.state == TrialState::kFailed) return false;
  std::erase(queue_, t.id);
  const auto checksum = t.config.checksum();
  if (outcome.ok) {
    t.state = TrialState::kDone;
    t.val_accuracy = outcome.val_accuracy;
    t.train_loss = outcome.train_loss;
    t.diverged = outcome.diverged;
    log(EventType::kTrialFinished, {{"trial_id", t.id},
                                    {"config_checksum", checksum},
                                    {"budget", t.budget},
                                    {"val_accuracy", outcome.val_accuracy},
                                    {"train_loss", outcome.train_loss},
                                    {"wall_seconds", outcome.wall_seconds},
                                    {"diverged", outcome.diverged}});
  } else {
    t.state = TrialState::kFailed;
    ++iteration_failures_;
    log(EventType::kTrialFailed,
        {{"trial_id", t.id}, {"config_checksum", checksum}, {"message", outcome.error}});
  }
  maybe_advance();
  return true;
}

void BohbScheduler::requeue(std::int64_t trial_id) {
  auto& t = trials_.at(static_cast<std::size_t>(trial_id));
  if (t.state != TrialState::kRunning) return;
  t.state = TrialState::kQueued;
  queue_.insert(queue_.begin(), trial_id);
}

std::optional<Trial> BohbScheduler::best() const {
  const Trial* best = nullptr;
  for (const auto& t : trials_) {
    if (t.state != TrialState::kDone || t.budget != ladder_.b_max()) continue;
    if (best == nullptr || *t.val_accuracy > *best->val_accuracy) best = &t;
  }
  if (best == nullptr) return std::nullopt;
  return *best;
}

}  // namespace fshpo
