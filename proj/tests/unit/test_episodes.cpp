#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fshpo/episodes.hpp"
#include "oracles.hpp"

using namespace fshpo;

namespace {

Dataset small_domain(int n_classes = 20, int per_class = 30) {
  DomainSpec spec;
  spec.n_classes = n_classes;
  spec.images_per_class = per_class;
  spec.image_size = 16;
  spec.seed = 3;
  return make_domain(spec);
}

/// Pixels are independent of the label.
Dataset noise_domain(int n_classes, int per_class, std::uint64_t seed) {
  Dataset d;
  d.spec.n_classes = n_classes;
  d.spec.images_per_class = per_class;
  d.spec.image_size = 16;
  d.images = ImageBatch(ImageShape{16, 16, 3}, static_cast<std::size_t>(n_classes * per_class));
  Rng rng = make_rng(seed);
  for (double& v : d.images.pixels()) v = uniform01(rng);
  for (int c = 0; c < n_classes; ++c)
    for (int i = 0; i < per_class; ++i) d.labels.push_back(c);
  return d;
}

ClassSubset all_classes(const Dataset& d, int split_id = 0) {
  ClassSubset s{&d, {}, split_id};
  for (int c = 0; c < d.spec.n_classes; ++c) s.classes.push_back(c);
  return s;
}

std::vector<std::vector<double>> rows(const std::vector<double>& flat, int d) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < flat.size(); i += static_cast<std::size_t>(d))
    out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(i), flat.begin() + static_cast<std::ptrdiff_t>(i) + d);
  return out;
}

NetSpec net16(int n_classes = 10) {
  NetSpec s;
  s.input = {16, 16, 3};
  s.n_classes = n_classes;
  return s;
}

}  // namespace

TEST(SampleEpisode, FixedSizes) {
  const auto d = small_domain();
  Rng rng = make_rng(1);
  const auto e = sample_episode(all_classes(d), EpisodeSpec::fixed(5, 1), rng);
  EXPECT_EQ(e.support.size(), 5u);
  EXPECT_EQ(e.query.size(), 75u);
  const auto e5 = sample_episode(all_classes(d), EpisodeSpec::fixed(5, 5), rng);
  EXPECT_EQ(e5.support.size(), 25u);
  for (int c = 0; c < 5; ++c) {
    EXPECT_EQ(std::count(e5.support_labels.begin(), e5.support_labels.end(), c), 5);
    EXPECT_EQ(std::count(e5.query_labels.begin(), e5.query_labels.end(), c), 15);
  }
}

TEST(SampleEpisode, SupportAndQueryAreDisjointAndConsistent) {
  const auto d = small_domain();
  Rng rng = make_rng(2);
  for (int k = 0; k < 200; ++k) {
    const auto e = sample_episode(all_classes(d), k % 2 ? EpisodeSpec::variable() : EpisodeSpec::fixed(5, 5), rng);
    std::set<std::size_t> s(e.support.begin(), e.support.end());
    ASSERT_EQ(s.size(), e.support.size());
    for (auto q : e.query) ASSERT_FALSE(s.count(q));
    // One dataset class per relabeled way.
    std::map<int, int> way_of_class;
    auto check = [&](std::size_t ex, int way) {
      const int cls = d.labels[ex];
      auto [it, fresh] = way_of_class.emplace(cls, way);
      ASSERT_EQ(it->second, way);
    };
    for (std::size_t i = 0; i < e.support.size(); ++i) check(e.support[i], e.support_labels[i]);
    for (std::size_t i = 0; i < e.query.size(); ++i) check(e.query[i], e.query_labels[i]);
    ASSERT_EQ(way_of_class.size(), static_cast<std::size_t>(e.ways));
  }
}

TEST(SampleEpisode, VariableModeRanges) {
  const auto d = small_domain(20, 30);
  Rng rng = make_rng(3);
  std::set<int> ways_seen, shots_seen;
  for (int k = 0; k < 400; ++k) {
    const auto e = sample_episode(all_classes(d), EpisodeSpec::variable(), rng);
    ASSERT_GE(e.ways, 5);
    ASSERT_LE(e.ways, 20);
    ASSERT_GE(e.shots, 1);
    ASSERT_LE(e.shots, 10);
    ASSERT_EQ(e.support.size(), static_cast<std::size_t>(e.ways * e.shots));
    ASSERT_EQ(e.query.size(), static_cast<std::size_t>(e.ways * 10));
    ways_seen.insert(e.ways);
    shots_seen.insert(e.shots);
  }
  EXPECT_EQ(ways_seen.size(), 16u);
  EXPECT_EQ(shots_seen.size(), 10u);
}

TEST(SampleEpisode, SameSeedSameEpisode) {
  const auto d = small_domain();
  Rng a = make_rng(4), b = make_rng(4);
  const auto ea = sample_episode(all_classes(d), EpisodeSpec::fixed(5, 5), a);
  const auto eb = sample_episode(all_classes(d), EpisodeSpec::fixed(5, 5), b);
  EXPECT_EQ(ea.support, eb.support);
  EXPECT_EQ(ea.query, eb.query);
  EXPECT_EQ(ea.query_labels, eb.query_labels);
}

TEST(SampleEpisode, InsufficientDataIsRejected) {
  const auto d = small_domain(20, 10);
  Rng rng = make_rng(5);
  ClassSubset four{&d, {0, 1, 2, 3}, 0};
  EXPECT_THROW(sample_episode(four, EpisodeSpec::fixed(5, 1), rng), std::invalid_argument);
  // 5 shots + 15 queries need 20 examples per class.
  EXPECT_THROW(sample_episode(all_classes(d), EpisodeSpec::fixed(5, 5), rng), std::invalid_argument);
}

TEST(NearestCentroid, HandComputedCosines) {
  const std::vector<double> support{1, 0, 0, 1};
  const std::vector<int> labels{0, 1};
  const std::vector<double> query{0.9, 0.1};
  const auto scores = ncentroid_scores({support, 2}, labels, {query, 2}, 2);
  EXPECT_NEAR(scores[0], 0.9 / std::sqrt(0.82), 1e-12);
  EXPECT_NEAR(scores[0], 0.9939, 1e-4);
  EXPECT_NEAR(scores[1], 0.1104, 1e-4);
  EXPECT_EQ(ncentroid_classify({support, 2}, labels, {query, 2}, 2), std::vector<int>{0});
}

TEST(NearestCentroid, SelfSimilarityAndZeroNorm) {
  const std::vector<double> support{0.3, 0.7, 0.0, 2.0, 0.1, 0.0, 0.0, 0.0, 5.0};
  const std::vector<int> labels{0, 1, 2};
  EXPECT_EQ(ncentroid_classify({support, 3}, labels, {support, 3}, 3), (std::vector<int>{0, 1, 2}));
  const std::vector<double> zero{0, 0, 0};
  const auto s = ncentroid_scores({support, 3}, labels, {zero, 3}, 3);
  EXPECT_EQ(s, (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(ncentroid_classify({support, 3}, labels, {zero, 3}, 3), std::vector<int>{0});
}

TEST(NearestCentroid, MatchesBruteForceOracle) {
  Rng rng = make_rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const int dim = static_cast<int>(uniform_int(rng, 1, 8));
    const int ways = static_cast<int>(uniform_int(rng, 1, 6));
    const int shots = static_cast<int>(uniform_int(rng, 1, 4));
    std::vector<double> s, q;
    std::vector<int> labels;
    for (int c = 0; c < ways; ++c)
      for (int k = 0; k < shots; ++k) {
        for (int j = 0; j < dim; ++j) s.push_back(normal(rng));
        labels.push_back(c);
      }
    const int nq = 7;
    for (int i = 0; i < nq * dim; ++i) q.push_back(trial % 10 == 0 ? std::round(normal(rng)) : normal(rng));
    const auto got = ncentroid_classify({s, dim}, labels, {q, dim}, ways);
    ASSERT_EQ(got, oracle::ncentroid(rows(s, dim), labels, rows(q, dim), ways)) << "trial " << trial;
  }
}

TEST(NearestCentroid, PositiveScaleInvariance) {
  Rng rng = make_rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(5 * 3 * 6), q(20 * 6);
    std::vector<int> labels;
    for (auto& v : s) v = normal(rng);
    for (auto& v : q) v = normal(rng);
    for (int c = 0; c < 5; ++c)
      for (int k = 0; k < 3; ++k) labels.push_back(c);
    const auto base = ncentroid_classify({s, 6}, labels, {q, 6}, 5);
    const double a = std::exp(normal(rng, 0.0, 3.0));
    for (auto& v : s) v *= a;
    for (auto& v : q) v *= a;
    ASSERT_EQ(ncentroid_classify({s, 6}, labels, {q, 6}, 5), base);
  }
}

TEST(LinearHead, StartsAtLogWaysAndSeparatesClusters) {
  std::vector<double> s, q;
  std::vector<int> labels, q_labels;
  Rng rng = make_rng(8);
  for (int c = 0; c < 2; ++c) {
    const double centre = c == 0 ? 1.0 : -1.0;
    for (int k = 0; k < 5; ++k) {
      s.push_back(centre + 0.2 * normal(rng));
      labels.push_back(c);
    }
    for (int k = 0; k < 15; ++k) {
      q.push_back(centre + 0.2 * normal(rng));
      q_labels.push_back(c);
    }
  }
  const auto r = linear_classify({s, 1}, labels, {q, 1}, 2);
  EXPECT_NEAR(r.initial_loss, std::log(2.0), 1e-12);
  EXPECT_LT(r.final_loss, r.initial_loss);
  EXPECT_EQ(r.predictions, q_labels);
  EXPECT_EQ(r.weights.size(), 2u);
}

TEST(LinearHead, DescendsOnRandomEpisodes) {
  Rng rng = make_rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const int ways = static_cast<int>(uniform_int(rng, 2, 10));
    std::vector<double> s, q(3 * 16);
    std::vector<int> labels;
    for (int c = 0; c < ways; ++c)
      for (int k = 0; k < 2; ++k) {
        for (int j = 0; j < 16; ++j) s.push_back(std::max(0.0, normal(rng, 0.2 * c * (j % ways == c), 1.0)));
        labels.push_back(c);
      }
    for (auto& v : q) v = normal(rng);
    const auto r = linear_classify({s, 16}, labels, {q, 16}, ways);
    EXPECT_NEAR(r.initial_loss, std::log(static_cast<double>(ways)), 1e-12);
    EXPECT_LT(r.final_loss, r.initial_loss);
    for (std::size_t i = 0; i < 3; ++i) {
      double total = 0.0;
      for (int c = 0; c < ways; ++c) total += r.probabilities[i * static_cast<std::size_t>(ways) + static_cast<std::size_t>(c)];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Classifier, NamesAndScores) {
  EXPECT_EQ(parse_classifier("ncentroid"), ClassifierKind::kNearestCentroid);
  EXPECT_EQ(parse_classifier(to_string(ClassifierKind::kLinear)), ClassifierKind::kLinear);
  EXPECT_THROW(parse_classifier("svm"), std::invalid_argument);
  EXPECT_EQ(argmax_rows(std::vector<double>{0.1, 0.5, 0.5, 2.0, 1.0, 0.0}, 3), (std::vector<int>{1, 0}));
}

TEST(EvalReport, AggregationConventions) {
  const auto one = EvalReport::aggregate({40.0});
  EXPECT_EQ(one.ci95, 0.0);
  EXPECT_EQ(one.mean_accuracy, 40.0);
  const std::vector<double> accs{20, 40, 60, 80, 100, 33.3};
  const auto r = EvalReport::aggregate(accs);
  EXPECT_NEAR(r.ci95, 1.96 * oracle::sample_sd(accs) / std::sqrt(6.0), 1e-12);
  const auto back = EvalReport::from_json(r.to_json());
  EXPECT_EQ(back.task_accuracies, accs);
  EXPECT_NEAR(EvalReport::aggregate(back.task_accuracies).ci95, r.ci95, 1e-12);
}

TEST(Evaluate, DeterministicAndSingleSplitMixture) {
  const auto d = small_domain();
  const auto p = init_params(net16(), 1);
  const auto split = all_classes(d);
  const auto a = evaluate(p, split, 30, EpisodeSpec::fixed(5, 1), ClassifierKind::kNearestCentroid, 11);
  const auto b = evaluate(p, split, 30, EpisodeSpec::fixed(5, 1), ClassifierKind::kNearestCentroid, 11);
  const auto m = evaluate_mixture(p, {split}, 30, EpisodeSpec::fixed(5, 1), ClassifierKind::kNearestCentroid, 11);
  EXPECT_EQ(a.task_accuracies, b.task_accuracies);
  EXPECT_EQ(a.task_accuracies, m.task_accuracies);
  EXPECT_EQ(a.n_tasks, 30);
  EXPECT_NEAR(a.ci95, EvalReport::aggregate(a.task_accuracies).ci95, 1e-12);
  const auto one = evaluate(p, split, 1, EpisodeSpec::fixed(5, 1), ClassifierKind::kLinear, 11);
  EXPECT_EQ(one.ci95, 0.0);
}

TEST(Evaluate, MixturePicksSplitsUniformly) {
  const auto d = small_domain();
  ClassSubset first{&d, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 0};
  ClassSubset second{&d, {10, 11, 12, 13, 14, 15, 16, 17, 18, 19}, 1};
  int from_first = 0;
  for (int t = 0; t < 1000; ++t) from_first += episode_for_task({first, second}, EpisodeSpec::fixed(5, 1), 12, t).split_id == 0;
  const auto [lo, hi] = oracle::binomial_band99(1000, 0.5);
  EXPECT_GE(from_first, lo);
  EXPECT_LE(from_first, hi);
}

TEST(Evaluate, RandomExtractorOnStructurelessDataIsNearChance) {
  const auto d = noise_domain(20, 30, 13);
  const auto p = init_params(net16(), 13);
  const auto r = evaluate(p, all_classes(d), 200, EpisodeSpec::fixed(5, 5), ClassifierKind::kNearestCentroid, 13);
  EXPECT_GE(r.mean_accuracy, 12.0);
  EXPECT_LE(r.mean_accuracy, 32.0);
}

TEST(Evaluate, ShuffledSupportLabelsScoreAtChance) {
  const auto d = small_domain();
  const auto p = init_params(net16(), 14);
  const auto split = all_classes(d);
  const EmbeddingCache cache(p, {split});
  Rng rng = make_rng(14);
  const int n = 500;
  int correct = 0;
  std::vector<double> sbuf, qbuf;
  for (int t = 0; t < n; ++t) {
    auto e = episode_for_task({split}, EpisodeSpec::fixed(5, 1, 1), 14, t);
    std::vector<int> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    for (auto& y : e.support_labels) y = perm[static_cast<std::size_t>(y)];
    const auto s = cache.gather(&d, e.support, sbuf);
    const std::vector<std::size_t> one_query{e.query.front()};
    const auto q = cache.gather(&d, one_query, qbuf);
    correct += ncentroid_classify(s, e.support_labels, q, 5).front() == e.query_labels.front();
  }
  const auto [lo, hi] = oracle::binomial_band99(n, 0.2);
  EXPECT_GE(correct, lo);
  EXPECT_LE(correct, hi);
}

TEST(EpisodeSpec, JsonRoundTrip) {
  const auto v = EpisodeSpec::variable();
  const auto back = EpisodeSpec::from_json(v.to_json());
  EXPECT_EQ(back.mode, EpisodeMode::kVariable);
  EXPECT_EQ(back.max_ways, 20);
  const auto f = EpisodeSpec::from_json(EpisodeSpec::fixed(5, 5).to_json());
  EXPECT_EQ(f.shots, 5);
  EXPECT_EQ(f.queries_per_class, 15);
}
