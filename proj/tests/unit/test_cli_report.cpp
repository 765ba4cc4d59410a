#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fshpo/cli_report.hpp"
#include "oracles.hpp"

using namespace fshpo;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fshpo_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

nlohmann::json photo_sketch_json() {
  return nlohmann::json::parse(R"({
    "space": "S2-full",
    "ladder": {"b_min": 22, "b_max": 200, "eta": 3},
    "n_sh_iterations": 4,
    "domains": {
      "photo": {"style": "photo", "seed": 1},
      "sketch": {"style": "sketch", "seed": 2}
    },
    "train_domain": "photo",
    "validation_domains": ["sketch"],
    "n_val_tasks": 20,
    "n_test_tasks": 100,
    "seed": 5
  })");
}

LedgerTrial finished(std::int64_t id, double acc, nlohmann::json config, std::int64_t budget = 9) {
  LedgerTrial t;
  t.id = id;
  t.config = std::move(config);
  t.budget = budget;
  t.finished = true;
  t.val_accuracy = acc;
  return t;
}

// Cosine to class-mean prototypes, summed over members, argmax per query.
double ensemble_oracle(const std::vector<const NetParams*>& members, const Dataset& data, const Episode& ep) {
  const auto dim = static_cast<std::size_t>(members.front()->spec.embedding_dim);
  std::vector<double> total(ep.query.size() * static_cast<std::size_t>(ep.ways), 0.0);
  auto emb = [&](const NetParams& p, std::size_t idx) {
    ImageBatch one(data.images.shape(), 1);
    std::copy_n(data.images.image(idx).begin(), data.images.shape().size(), one.pixels().begin());
    return embed(p, one);
  };
  for (const auto* m : members) {
    std::vector<std::vector<double>> proto(static_cast<std::size_t>(ep.ways), std::vector<double>(dim, 0.0));
    std::vector<int> count(static_cast<std::size_t>(ep.ways), 0);
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      const auto e = emb(*m, ep.support[i]);
      const auto c = static_cast<std::size_t>(ep.support_labels[i]);
      for (std::size_t d = 0; d < dim; ++d) proto[c][d] += e[d];
      ++count[c];
    }
    for (std::size_t c = 0; c < proto.size(); ++c)
      for (auto& v : proto[c]) v /= count[c];
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      const auto e = emb(*m, ep.query[q]);
      for (std::size_t c = 0; c < proto.size(); ++c) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t d = 0; d < dim; ++d) {
          dot += e[d] * proto[c][d];
          na += e[d] * e[d];
          nb += proto[c][d] * proto[c][d];
        }
        total[q * proto.size() + c] += (na == 0 || nb == 0) ? 0.0 : dot / std::sqrt(na * nb);
      }
    }
  }
  int correct = 0;
  for (std::size_t q = 0; q < ep.query.size(); ++q) {
    const auto row = total.begin() + static_cast<std::ptrdiff_t>(q * ep.ways);
    const auto pred = std::max_element(row, row + ep.ways) - row;
    correct += pred == ep.query_labels[q] ? 1 : 0;
  }
  return 100.0 * correct / static_cast<double>(ep.query.size());
}

struct SmallDomain {
  Dataset data;
  SplitSet split;
  std::vector<ClassSubset> val;
  NetSpec net;

  SmallDomain() {
    DomainSpec spec;
    spec.n_classes = 20;
    spec.images_per_class = 20;
    spec.image_size = 8;
    data = make_domain(spec);
    split = split_classes(20, {0.5, 0.25, 0.25}, 1);
    val = {{&data, split.val, 0}};
    net.input = data.images.shape();
    net.n_classes = 10;
  }
};

}  // namespace

TEST(RunConfig, CrossDomainConfigRoundTrips) {
  const auto c = RunConfig::from_json(photo_sketch_json());
  EXPECT_EQ(c.space, SpaceVariant::kS2Full);
  EXPECT_EQ(c.b_max, 200);
  EXPECT_EQ(c.test_domains, std::vector<std::string>{"sketch"});
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_EQ(c.scheduler_options().n_iterations, 4);
  EXPECT_NE(c.val_seed(), c.test_seed());
}

TEST(RunConfig, ErrorsNameTheField) {
  auto expect_field = [](nlohmann::json j, const std::string& field) {
    try {
      RunConfig::from_json(j);
      ADD_FAILURE() << "accepted config missing " << field;
    } catch (const std::invalid_argument& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  auto j = photo_sketch_json();
  j["train_domain"] = "clipart";
  expect_field(j, "train_domain");
  j = photo_sketch_json();
  j["validation_domains"] = nlohmann::json::array({"photo", "paint"});
  expect_field(j, "validation_domains");
  j = photo_sketch_json();
  j["validation_domains"] = nlohmann::json::array();
  expect_field(j, "validation_domains");
  j = photo_sketch_json();
  j["ladder"]["b_min"] = 500;
  expect_field(j, "ladder");
  j = photo_sketch_json();
  j["executor"] = {{"mode", "cluster"}};
  expect_field(j, "executor.mode");
  j = photo_sketch_json();
  j["domains"]["sketch"]["path"] = "x.bin";
  expect_field(j, "domains.sketch");
  j = photo_sketch_json();
  j.erase("domains");
  expect_field(j, "domains");
  j = photo_sketch_json();
  j["split_fractions"] = {0.5, 0.5, 0.5};
  expect_field(j, "split_fractions");
}

TEST(RunConfig, RelativeDatasetPathsResolveAgainstTheConfig) {
  const auto dir = scratch_dir("paths");
  auto j = photo_sketch_json();
  j["domains"]["sketch"] = {{"path", "data/sketch.bin"}};
  std::ofstream(dir / "run.json") << j.dump();
  const auto c = RunConfig::load(dir / "run.json");
  EXPECT_EQ(*c.domains.at("sketch").path, dir / "data/sketch.bin");
  fs::remove_all(dir);
}

TEST(Csv, RoundTripWithQuoting) {
  CsvTable t;
  t.header = {"val_accuracy", "name", "note"};
  t.rows = {{"61.5", "a,b", "say \"hi\""}, {"2", "", "line\nbreak"}};
  EXPECT_EQ(CsvTable::parse(t.to_csv()), t);
  EXPECT_EQ(t.to_csv().substr(0, 22), "val_accuracy,name,note");
}

TEST(Pcp, WindowMatchesRecount) {
  Rng rng = make_rng(3);
  std::uniform_real_distribution<double> acc(20.0, 60.0);
  std::vector<LedgerTrial> trials;
  for (int i = 0; i < 200; ++i) {
    auto t = finished(i, std::round(acc(rng) * 4) / 4, {{"learning_rate", 0.001 * (i + 1)}, {"optimizer", "SGD"}});
    if (i % 17 == 0) {
      t.finished = false;
      t.failed = true;
    }
    trials.push_back(t);
  }
  for (double window : {0.0, 1.0, 5.0, 100.0}) {
    const auto table = cmd_pcp(trials, window);
    double vmax = -1;
    for (const auto& t : trials)
      if (t.finished) vmax = std::max(vmax, t.val_accuracy);
    std::vector<std::pair<double, std::int64_t>> expect;
    for (const auto& t : trials)
      if (t.finished && t.val_accuracy > vmax - window) expect.emplace_back(-t.val_accuracy, t.id);
    std::sort(expect.begin(), expect.end());
    ASSERT_EQ(table.rows.size(), expect.size()) << "window " << window;
    EXPECT_EQ(table.header, (std::vector<std::string>{"val_accuracy", "learning_rate", "optimizer"}));
    for (std::size_t r = 0; r < expect.size(); ++r) {
      EXPECT_DOUBLE_EQ(std::stod(table.rows[r][0]), -expect[r].first);
      EXPECT_DOUBLE_EQ(std::stod(table.rows[r][1]), 0.001 * (expect[r].second + 1));
      EXPECT_EQ(table.rows[r][2], "SGD");
    }
  }
  EXPECT_THROW(cmd_pcp(trials, -1.0), std::invalid_argument);
}

TEST(Pcp, EdgeCases) {
  const nlohmann::json cfg = {{"l2", 1e-4}};
  EXPECT_EQ(cmd_pcp({finished(0, 42.0, cfg)}).rows.size(), 1u);
  auto failed = finished(1, 80.0, cfg);
  failed.finished = false;
  failed.failed = true;
  const auto none = cmd_pcp({failed});
  EXPECT_TRUE(none.rows.empty());
  EXPECT_EQ(none.header.front(), "val_accuracy");
  // Exactly at the lower edge is outside the half-open window.
  EXPECT_EQ(cmd_pcp({finished(0, 50.0, cfg), finished(1, 45.0, cfg), finished(2, 45.5, cfg)}, 5.0).rows.size(), 2u);
}

TEST(NopsScatter, CountsAndColumns) {
  std::vector<LedgerTrial> trials;
  for (int i = 0; i < 30; ++i) trials.push_back(finished(i, 30.0 + i, {{"n_ops", i % 4}, {"learning_rate", 0.1}}));
  trials[7].finished = false;
  const auto t = cmd_nops_scatter(trials, SpaceVariant::kS2Full);
  EXPECT_EQ(t.header, (std::vector<std::string>{"n_ops", "val_accuracy"}));
  ASSERT_EQ(t.rows.size(), 29u);
  std::multiset<std::pair<int, double>> got, want;
  for (const auto& r : t.rows) {
    ASSERT_EQ(r.size(), 2u);
    got.emplace(std::stoi(r[0]), std::stod(r[1]));
  }
  for (const auto& tr : trials)
    if (tr.finished) want.emplace(tr.config["n_ops"].get<int>(), tr.val_accuracy);
  EXPECT_EQ(got, want);
  EXPECT_THROW(cmd_nops_scatter(trials, SpaceVariant::kS1), std::invalid_argument);
  EXPECT_THROW(cmd_nops_scatter(trials, SpaceVariant::kS2FixedNopsRandomSigma), std::invalid_argument);
}

TEST(TopTrials, RanksFinishedBmaxTrials) {
  std::vector<LedgerTrial> trials = {finished(0, 50, {}, 9), finished(1, 70, {}, 3), finished(2, 60, {}, 9),
                                     finished(3, 60, {}, 9), finished(4, 55, {}, 9)};
  trials[4].finished = false;
  const auto top = top_trials(trials, 9, 3);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].id, 2);
  EXPECT_EQ(top[1].id, 3);
  EXPECT_EQ(top[2].id, 0);
  EXPECT_EQ(top_trials(trials, 9, 10).size(), 3u);
}

TEST(Ensemble, MatchesBruteForceAveraging) {
  const SmallDomain d;
  const auto a = init_params(d.net, 1);
  const auto b = init_params(d.net, 2);
  const auto spec = EpisodeSpec::fixed(5, 2, 3);
  const auto r = evaluate_ensemble({&a, &b}, d.val, 15, spec, ClassifierKind::kNearestCentroid, 9);
  ASSERT_EQ(r.task_accuracies.size(), 15u);
  for (int t = 0; t < 15; ++t)
    EXPECT_DOUBLE_EQ(r.task_accuracies[static_cast<std::size_t>(t)],
                     ensemble_oracle({&a, &b}, d.data, episode_for_task(d.val, spec, 9, t)))
        << "task " << t;
}

TEST(Ensemble, IdenticalMembersEqualTheSingleModel) {
  const SmallDomain d;
  const auto p = init_params(d.net, 4);
  const auto spec = EpisodeSpec::fixed(5, 1, 5);
  for (auto kind : {ClassifierKind::kNearestCentroid, ClassifierKind::kLinear}) {
    const auto single = evaluate_mixture(p, d.val, 20, spec, kind, 6);
    const auto triple = evaluate_ensemble({&p, &p, &p}, d.val, 20, spec, kind, 6);
    const auto one = evaluate_ensemble({&p}, d.val, 20, spec, kind, 6);
    EXPECT_EQ(one.task_accuracies, single.task_accuracies);
    EXPECT_EQ(triple.task_accuracies, single.task_accuracies);
  }
  EXPECT_THROW(evaluate_ensemble({}, d.val, 5, spec, ClassifierKind::kNearestCentroid, 6), std::invalid_argument);
}

TEST(Ensemble, SingleMemberEqualsEval) {
  const SmallDomain d;
  TrainState st;
  st.extractor.params = init_params(d.net, 8);
  MemoryCheckpointStore store;
  store.put(2, st);
  RunLedger ledger;
  for (std::int64_t id = 0; id < 3; ++id) {
    Trial t;
    t.id = id;
    t.budget = 9;
    ledger.append(EventType::kTrialSampled, trial_sampled_payload(t));
    ledger.append(EventType::kTrialFinished,
                  {{"trial_id", id}, {"config_checksum", t.config.checksum()}, {"budget", 9},
                   {"val_accuracy", 10.0 * static_cast<double>(id)}, {"train_loss", 1.0}, {"diverged", false}});
  }
  const auto spec = EpisodeSpec::fixed(5, 1, 5);
  const auto r = cmd_ensemble(ledger, store, 9, 1, d.val, ClassifierKind::kNearestCentroid, 12, spec, 3);
  EXPECT_EQ(r.members, std::vector<std::int64_t>{2});
  const auto e = cmd_eval(st, d.val, ClassifierKind::kNearestCentroid, 12, spec, 3);
  EXPECT_EQ(r.ensemble.task_accuracies, e.task_accuracies);
  EXPECT_EQ(r.best_single.task_accuracies, e.task_accuracies);
  try {
    cmd_ensemble(ledger, store, 9, 3, d.val, ClassifierKind::kNearestCentroid, 12, spec, 3);
    FAIL() << "missing checkpoints accepted";
  } catch (const std::runtime_error& err) {
    EXPECT_NE(std::string(err.what()).find("1, 0"), std::string::npos) << err.what();
  }
  EXPECT_THROW(cmd_ensemble(ledger, store, 9, 4, d.val, ClassifierKind::kNearestCentroid, 12, spec, 3),
               std::invalid_argument);
}

TEST(Sensitivity, RandomizeComplementPinsTheFrozenGroup) {
  const auto space = define_space(SpaceVariant::kS2Full);
  Rng rng = make_rng(11);
  const auto ref = space.sample_uniform(rng);
  const auto& opt = optimization_param_names();
  auto is_opt = [&](const std::string& n) { return std::find(opt.begin(), opt.end(), n) != opt.end(); };
  for (auto frozen : {FrozenSubset::kOptimization, FrozenSubset::kOptimizationNops, FrozenSubset::kAugmentation,
                      FrozenSubset::kAugmentationNops, FrozenSubset::kAll}) {
    EXPECT_EQ(parse_frozen_subset(to_string(frozen)), frozen);
    std::map<std::string, int> changed;
    for (int i = 0; i < 50; ++i) {
      const auto c = randomize_complement(space, ref, frozen, rng);
      space.validate(c);
      for (const auto& p : space.params()) changed[p.name] += c.values.at(p.name) != ref.values.at(p.name);
    }
    for (const auto& p : space.params()) {
      const bool nops = p.name == param_names::kNops;
      const bool aug = !is_opt(p.name) && !nops;
      bool pinned = true;
      switch (frozen) {
        case FrozenSubset::kOptimization: pinned = is_opt(p.name); break;
        case FrozenSubset::kOptimizationNops: pinned = is_opt(p.name) || nops; break;
        case FrozenSubset::kAugmentation: pinned = aug; break;
        case FrozenSubset::kAugmentationNops: pinned = aug || nops; break;
        case FrozenSubset::kAll: break;
      }
      if (pinned)
        EXPECT_EQ(changed[p.name], 0) << to_string(frozen) << " " << p.name;
      else
        EXPECT_GT(changed[p.name], 0) << to_string(frozen) << " " << p.name;
    }
  }
  EXPECT_THROW(parse_frozen_subset("everything"), std::invalid_argument);
}

TEST(Sensitivity, TrainsTheRequestedNumberOfModels) {
  DomainSpec spec;
  spec.n_classes = 20;
  spec.images_per_class = 20;
  spec.image_size = 8;
  const auto data = make_domain(spec);
  const auto split = split_classes(20, {0.5, 0.25, 0.25}, 1);
  FewShotSetup setup;
  setup.space = define_space(SpaceVariant::kS2Full);
  setup.train = make_train_split(data, split.train);
  setup.net.input = data.images.shape();
  setup.net.n_classes = static_cast<int>(split.train.size());
  setup.validation = {{&data, split.val, 0}};
  setup.episodes = EpisodeSpec::fixed(5, 1, 3);
  setup.n_val_tasks = 5;
  const FewShotObjective objective(setup, std::make_shared<MemoryCheckpointStore>());
  Rng rng = make_rng(2);
  const auto ref = setup.space.sample_uniform(rng);

  const auto r = cmd_sensitivity(objective, ref, FrozenSubset::kAll, 4, 5, 7);
  EXPECT_EQ(r.accuracies.size(), 4u);
  for (const auto& c : r.configs) EXPECT_EQ(c, ref.to_json());
  EXPECT_NEAR(r.sd, oracle::sample_sd(r.accuracies), 1e-12);
  EXPECT_LE(r.min, r.mean);
  EXPECT_GE(r.max, r.mean);
  const auto again = cmd_sensitivity(objective, ref, FrozenSubset::kAll, 4, 5, 7);
  EXPECT_EQ(again.accuracies, r.accuracies);
  const auto opt = cmd_sensitivity(objective, ref, FrozenSubset::kOptimization, 3, 5, 7);
  EXPECT_EQ(opt.accuracies.size(), 3u);
  EXPECT_THROW(cmd_sensitivity(objective, ref, FrozenSubset::kAll, 0, 5, 7), std::invalid_argument);
}

TEST(CmdRun, SmokeRunIsFastReproducibleAndResumable) {
  const auto config = RunConfig::from_json(photo_sketch_json());
  const auto a = scratch_dir("run_a");
  const auto b = scratch_dir("run_b");

  const auto start = std::chrono::steady_clock::now();
  const auto first = cmd_run(config, a);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(seconds, 60.0);
  EXPECT_TRUE(first.completed);
  ASSERT_TRUE(first.best_trial.has_value());
  ASSERT_TRUE(first.test.has_value());
  EXPECT_EQ(first.test->n_tasks, 100);
  EXPECT_TRUE(fs::exists(RunPaths{a}.best_checkpoint()));
  EXPECT_EQ(RunSummary::from_json(nlohmann::json::parse(std::ifstream(RunPaths{a}.summary()))).to_json(),
            first.to_json());

  const auto second = cmd_run(config, b);
  EXPECT_EQ(second.to_json(), first.to_json());

  // Resuming a completed run schedules nothing new.
  const auto lines_before = RunLedger::load(RunPaths{a}.ledger()).events().size();
  const auto resumed = cmd_resume(a);
  EXPECT_EQ(resumed.to_json(), first.to_json());
  EXPECT_EQ(RunLedger::load(RunPaths{a}.ledger()).events().size(), lines_before);

  const auto ledger = RunLedger::load(RunPaths{a}.ledger());
  const auto trials = ledger.trials();
  EXPECT_EQ(trials.size(), first.n_trials);
  const auto scatter = cmd_nops_scatter(trials, config.space);
  std::size_t done = 0;
  for (const auto& t : trials) done += t.finished ? 1 : 0;
  EXPECT_EQ(scatter.rows.size(), done);

  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(CmdRun, ResumeRejectsAChangedConfig) {
  auto j = photo_sketch_json();
  j["ladder"] = {{"b_min", 1}, {"b_max", 3}, {"eta", 3}};
  j["n_sh_iterations"] = 1;
  j["n_val_tasks"] = 2;
  j["n_test_tasks"] = 2;
  j["domains"]["photo"]["image_size"] = 8;
  j["domains"]["sketch"]["image_size"] = 8;
  const auto dir = scratch_dir("changed");
  cmd_run(RunConfig::from_json(j), dir);
  j["seed"] = 6;
  std::ofstream(RunPaths{dir}.config()) << RunConfig::from_json(j).to_json().dump();
  EXPECT_THROW(cmd_resume(dir), std::runtime_error);
  fs::remove_all(dir);
}
