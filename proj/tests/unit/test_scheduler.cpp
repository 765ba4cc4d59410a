#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "fshpo/scheduler.hpp"
#include "oracles.hpp"
#include "surrogate.hpp"

using namespace fshpo;

namespace {

std::vector<std::int64_t> counts(const BracketPlan& p) {
  std::vector<std::int64_t> out;
  for (const auto& s : p.stages) out.push_back(s.n_configs);
  return out;
}

Trial done_trial(std::int64_t id, double acc) {
  Trial t;
  t.id = id;
  t.state = TrialState::kDone;
  t.val_accuracy = acc;
  return t;
}

/// Runs a scheduler to completion, delivering each stage's results in an
/// order shuffled by `order_seed`.
void drive(BohbScheduler& s, const Objective& f, std::uint64_t order_seed) {
  Rng rng = make_rng(order_seed);
  while (!s.finished()) {
    std::vector<Trial> batch;
    while (auto t = s.next_job()) batch.push_back(*t);
    ASSERT_FALSE(batch.empty());
    std::shuffle(batch.begin(), batch.end(), rng);
    for (const auto& t : batch) s.record_result(f({t.id, t.config, t.budget, t.seed, t.parent}));
  }
}

SchedulerOptions small_options(std::uint64_t seed, int iterations) {
  SchedulerOptions o;
  o.b_min = 1;
  o.b_max = 9;
  o.eta = 3;
  o.n_iterations = iterations;
  o.seed = seed;
  return o;
}

}  // namespace

TEST(PlanBracket, HyperbandClosedFormForEtaThree) {
  for (int s_max = 1; s_max <= 4; ++s_max)
    for (int s = 0; s <= s_max; ++s) {
      const auto plan = plan_bracket(s_max, s, 3);
      const auto expected = oracle::hyperband_stages(s_max, s, 3);
      ASSERT_EQ(plan.stages.size(), expected.size());
      for (std::size_t i = 0; i < expected.size(); ++i) {
        EXPECT_EQ(plan.stages[i].n_configs, expected[i]) << s_max << "/" << s << " stage " << i;
        EXPECT_EQ(plan.stages[i].budget_exponent, s - static_cast<int>(i));
      }
    }
}

TEST(PlanBracket, SmaxTwoBrackets) {
  EXPECT_EQ(counts(plan_bracket(2, 2, 3)), (std::vector<std::int64_t>{9, 3, 1}));
  EXPECT_EQ(counts(plan_bracket(2, 1, 3)), (std::vector<std::int64_t>{5, 1}));
  EXPECT_EQ(counts(plan_bracket(2, 0, 3)), (std::vector<std::int64_t>{3}));
}

TEST(PlanBracket, BracketBeyondSmaxIsRejected) {
  EXPECT_THROW(plan_bracket(2, 3, 3), std::invalid_argument);
  EXPECT_THROW(plan_bracket(2, -1, 3), std::invalid_argument);
}

TEST(BudgetLadder, RungsAscendByEta) {
  const BudgetLadder l(4000 / 9, 4000, 3);
  EXPECT_EQ(l.s_max(), 2);
  EXPECT_EQ(l.rungs(), (std::vector<std::int64_t>{444, 1333, 4000}));
  const BudgetLadder exact(1, 27, 3);
  EXPECT_EQ(exact.rungs(), (std::vector<std::int64_t>{1, 3, 9, 27}));
  EXPECT_THROW(BudgetLadder(10, 9, 3), std::invalid_argument);
  EXPECT_THROW(BudgetLadder(1, 9, 1), std::invalid_argument);
}

TEST(Promote, KeepsTheTopThird) {
  const std::vector<double> accs{50, 60, 70, 40, 55, 65, 45, 35, 52};
  std::vector<Trial> rung;
  for (std::size_t i = 0; i < accs.size(); ++i) rung.push_back(done_trial(static_cast<std::int64_t>(i), accs[i]));
  const auto kept = promote(rung, 3);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[0].id, 2);
  EXPECT_EQ(kept[1].id, 5);
  EXPECT_EQ(kept[2].id, 1);
}

TEST(Promote, FloorAndTieBreak) {
  EXPECT_TRUE(promote({done_trial(0, 1), done_trial(1, 2)}, 3).empty());
  const auto kept = promote({done_trial(5, 70), done_trial(2, 70), done_trial(9, 10)}, 3);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].id, 2);
  EXPECT_TRUE(promote({}, 3).empty());
}

TEST(Promote, DependsOnlyOnTheSetOfResults) {
  std::vector<Trial> rung;
  Rng rng = make_rng(1);
  for (int i = 0; i < 27; ++i) rung.push_back(done_trial(i, std::floor(uniform01(rng) * 10)));
  const auto reference = promote(rung, 3);
  for (int k = 0; k < 20; ++k) {
    std::shuffle(rung.begin(), rung.end(), rng);
    const auto kept = promote(rung, 3);
    ASSERT_EQ(kept.size(), reference.size());
    for (std::size_t i = 0; i < kept.size(); ++i) EXPECT_EQ(kept[i].id, reference[i].id);
  }
}

TEST(ScaleUpdates, BatchSizeScaling) {
  EXPECT_EQ(scale_updates(480000, 16), 480000);
  EXPECT_EQ(scale_updates(480000, 8), 960000);
  EXPECT_EQ(scale_updates(480000, 32), 240000);
  EXPECT_EQ(scale_updates(480000, 4), 1920000);
  EXPECT_EQ(scale_updates(480000, 64), 120000);
  EXPECT_THROW(scale_updates(480000, 12), std::invalid_argument);
}

TEST(BohbScheduler, FreshRunSamplesRandomly) {
  BohbScheduler s(surrogate::cube_space(3), small_options(1, 1));
  const auto t = s.next_job();
  ASSERT_TRUE(t);
  EXPECT_EQ(t->origin, TrialOrigin::kRandom);
  EXPECT_EQ(t->budget, 1);
}

TEST(BohbScheduler, ConstantObjectivePicksTheFirstFullBudgetTrial) {
  BohbScheduler s(surrogate::cube_space(2), small_options(2, 3));
  drive(s, [](const JobSpec& j) { return JobOutcome{j.trial_id, true, 42.0}; }, 1);
  const auto best = s.best();
  ASSERT_TRUE(best);
  std::int64_t first = -1;
  for (const auto& t : s.trials())
    if (t.budget == 9) {
      first = t.id;
      break;
    }
  EXPECT_EQ(best->id, first);
}

TEST(BohbScheduler, FullBudgetCountFollowsThePlans) {
  const int iterations = 7;
  BohbScheduler s(surrogate::cube_space(2), small_options(3, iterations));
  const auto q = surrogate::NoisyQuadratic::hidden(2, 3, 1.0, 1.0);
  drive(s, q, 2);
  std::int64_t expected = 0, expected_total = 0;
  for (int it = 0; it < iterations; ++it) {
    const auto plan = plan_bracket(2, 2 - it % 3, 3);
    expected += plan.stages.back().n_configs;
    for (const auto& st : plan.stages) expected_total += st.n_configs;
  }
  const auto at_max = std::count_if(s.trials().begin(), s.trials().end(), [](const Trial& t) { return t.budget == 9; });
  EXPECT_EQ(at_max, expected);
  EXPECT_EQ(static_cast<std::int64_t>(s.trials().size()), expected_total);
}

TEST(BohbScheduler, PromotedTrialsContinueTheirParent) {
  BohbScheduler s(surrogate::cube_space(2), small_options(4, 6));
  drive(s, surrogate::NoisyQuadratic::hidden(2, 4, 1.0, 1.0), 3);
  for (const auto& t : s.trials()) {
    if (t.origin != TrialOrigin::kPromoted) {
      EXPECT_FALSE(t.parent);
      continue;
    }
    ASSERT_TRUE(t.parent);
    const auto& p = s.trial(*t.parent);
    EXPECT_EQ(p.budget * 3, t.budget);
    EXPECT_EQ(p.config, t.config);
    EXPECT_EQ(p.seed, t.seed);
    EXPECT_EQ(p.iteration, t.iteration);
  }
}

TEST(BohbScheduler, ResultDeliveryOrderDoesNotMatter) {
  const auto q = surrogate::NoisyQuadratic::hidden(3, 5, 1.0, 1.0);
  BohbScheduler a(surrogate::cube_space(3), small_options(5, 9));
  BohbScheduler b(surrogate::cube_space(3), small_options(5, 9));
  drive(a, q, 10);
  drive(b, q, 99);
  ASSERT_EQ(a.trials().size(), b.trials().size());
  for (std::size_t i = 0; i < a.trials().size(); ++i) {
    EXPECT_EQ(a.trials()[i].config, b.trials()[i].config);
    EXPECT_EQ(a.trials()[i].val_accuracy, b.trials()[i].val_accuracy);
  }
}

TEST(BohbScheduler, ModelSamplingStartsOnceARungHasEnoughResults) {
  const int d = 3;
  auto opts = small_options(6, 12);
  BohbScheduler s(surrogate::cube_space(d), opts);
  const auto q = surrogate::NoisyQuadratic::hidden(d, 6, 1.0, 1.0);
  const std::size_t needed = 2 * static_cast<std::size_t>(d + 1);
  bool saw_model = false;
  while (!s.finished()) {
    std::vector<Trial> batch;
    while (auto t = s.next_job()) batch.push_back(*t);
    for (const auto& t : batch) {
      if (t.origin != TrialOrigin::kModel) continue;
      saw_model = true;
      // Completed results per budget among trials sampled before this one.
      std::map<std::int64_t, std::size_t> done;
      for (const auto& o : s.trials())
        if (o.id < t.id && o.state == TrialState::kDone) ++done[o.budget];
      const bool enough = std::any_of(done.begin(), done.end(), [&](const auto& kv) { return kv.second >= needed; });
      EXPECT_TRUE(enough) << "trial " << t.id;
    }
    for (const auto& t : batch) s.record_result(q({t.id, t.config, t.budget, t.seed, t.parent}));
  }
  EXPECT_TRUE(saw_model);
  // With random_fraction 1 every fresh configuration is uniform.
  opts.kde.random_fraction = 1.0;
  BohbScheduler r(surrogate::cube_space(d), opts);
  drive(r, q, 1);
  for (const auto& t : r.trials()) EXPECT_NE(t.origin, TrialOrigin::kModel);
}

TEST(BohbScheduler, SameSeedAndResultsGiveTheSameJobs) {
  const auto q = surrogate::NoisyQuadratic::hidden(2, 7, 1.0, 1.0);
  BohbScheduler a(surrogate::cube_space(2), small_options(7, 5));
  BohbScheduler b(surrogate::cube_space(2), small_options(7, 5));
  drive(a, q, 1);
  drive(b, q, 1);
  ASSERT_EQ(a.trials().size(), b.trials().size());
  for (std::size_t i = 0; i < a.trials().size(); ++i) {
    EXPECT_EQ(a.trials()[i].config.checksum(), b.trials()[i].config.checksum());
    EXPECT_EQ(a.trials()[i].seed, b.trials()[i].seed);
  }
}

TEST(BohbScheduler, DuplicateResultsAreIgnored) {
  BohbScheduler s(surrogate::cube_space(2), small_options(8, 1));
  const auto t = s.next_job();
  ASSERT_TRUE(t);
  EXPECT_TRUE(s.record_result({t->id, true, 10.0}));
  EXPECT_FALSE(s.record_result({t->id, true, 90.0}));
  EXPECT_EQ(*s.trial(t->id).val_accuracy, 10.0);
}

TEST(BohbScheduler, FailuresAreToleratedUpToHalfTheIteration) {
  // Fail every third trial: the run completes.
  BohbScheduler ok(surrogate::cube_space(2), small_options(9, 3));
  drive(ok,
        [](const JobSpec& j) {
          JobOutcome o{j.trial_id, j.trial_id % 3 != 0, 50.0};
          if (!o.ok) o.error = "boom";
          return o;
        },
        1);
  EXPECT_TRUE(ok.finished());
  EXPECT_GT(std::count_if(ok.trials().begin(), ok.trials().end(),
                          [](const Trial& t) { return t.state == TrialState::kFailed; }),
            0);

  BohbScheduler bad(surrogate::cube_space(2), small_options(9, 3));
  EXPECT_THROW(drive(bad,
                     [](const JobSpec& j) {
                       JobOutcome o{j.trial_id, j.trial_id % 3 == 0, 50.0};
                       return o;
                     },
                     1),
               RunAborted);
}

TEST(BohbScheduler, RequeuedTrialIsHandedOutAgain) {
  BohbScheduler s(surrogate::cube_space(2), small_options(10, 1));
  const auto a = s.next_job();
  ASSERT_TRUE(a);
  EXPECT_EQ(s.in_flight(), 1u);
  s.requeue(a->id);
  EXPECT_EQ(s.in_flight(), 0u);
  const auto b = s.next_job();
  ASSERT_TRUE(b);
  EXPECT_EQ(b->id, a->id);
}
