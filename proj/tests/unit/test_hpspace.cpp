#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fshpo/hpspace.hpp"

using namespace fshpo;

TEST(DefineSpace, S1HasTheFiveTrainingParameters) {
  const auto s = define_space(SpaceVariant::kS1);
  ASSERT_EQ(s.dim(), 5u);
  const auto& lr = s.param(param_names::kLearningRate);
  EXPECT_EQ(lr.kind, ParamKind::kLogUniform);
  EXPECT_EQ(lr.lo, 1e-4);
  EXPECT_EQ(lr.hi, 0.05);
  const auto& l2 = s.param(param_names::kL2);
  EXPECT_EQ(l2.lo, 1e-5);
  EXPECT_EQ(l2.hi, 5e-3);
  EXPECT_EQ(s.param(param_names::kOptimizer).choices, (std::vector<std::string>{"SGD", "ADAM"}));
  const auto& decay = s.param(param_names::kDecayEvery);
  EXPECT_EQ(decay.n_bins(), 1000u);
  EXPECT_EQ(decay.int_values.front(), 100);
  EXPECT_EQ(decay.int_values.back(), 100000);
  EXPECT_EQ(s.param(param_names::kBatchSize).int_values, (std::vector<std::int64_t>{4, 8, 16, 32, 64}));
}

TEST(DefineSpace, S2FullAddsNopsAndTenSigmas) {
  const auto s = define_space(SpaceVariant::kS2Full);
  ASSERT_EQ(s.dim(), 16u);
  const auto& nops = s.param(param_names::kNops);
  EXPECT_EQ(nops.kind, ParamKind::kIntRange);
  EXPECT_EQ(nops.lo, 1);
  EXPECT_EQ(nops.hi, 10);
  for (std::size_t i = 0; i < kAugOpNames.size(); ++i) {
    const auto& p = s.param(sigma_param_name(i));
    EXPECT_EQ(p.lo, 1.0);
    EXPECT_EQ(p.hi, 25.0);
  }
}

TEST(DefineSpace, SharedSigmaHasSevenParameters) {
  const auto s = define_space(SpaceVariant::kS2SharedSigma);
  EXPECT_EQ(s.dim(), 7u);
  EXPECT_TRUE(s.has_param(param_names::kSigmaCommon));
  EXPECT_TRUE(s.has_param(param_names::kNops));
}

TEST(DefineSpace, FixedNopsVariantSearchesOnlyOptimization) {
  const auto s = define_space(SpaceVariant::kS2FixedNopsRandomSigma);
  EXPECT_EQ(s.dim(), 5u);
  EXPECT_TRUE(s.random_sigma());
  EXPECT_FALSE(define_space(SpaceVariant::kS1).random_sigma());
}

TEST(DefineSpace, NamesParseAndUnknownIsRejected) {
  EXPECT_EQ(define_space("S2-full").dim(), 16u);
  EXPECT_EQ(parse_space_variant("S2-shared-sigma"), SpaceVariant::kS2SharedSigma);
  EXPECT_THROW(define_space("S3"), std::invalid_argument);
}

TEST(ParamDescriptor, MalformedDomainsAreRejected) {
  EXPECT_THROW(ParamDescriptor::log_uniform("x", 1.0, 1.0).validate(), std::invalid_argument);
  EXPECT_THROW(ParamDescriptor::log_uniform("x", 0.0, 1.0).validate(), std::invalid_argument);
  EXPECT_THROW(ParamDescriptor::categorical("x", {}).validate(), std::invalid_argument);
  EXPECT_THROW(ParamDescriptor::categorical("x", {"a", "a"}).validate(), std::invalid_argument);
  EXPECT_THROW(ParamDescriptor::stepped("x", 100, 100, 100).validate(), std::invalid_argument);
  EXPECT_THROW(ParamDescriptor::int_range("x", 3, 2).validate(), std::invalid_argument);
}

TEST(SearchSpace, DuplicateNamesAreRejected) {
  EXPECT_THROW(SearchSpace(SpaceVariant::kCustom, {ParamDescriptor::uniform("a", 0, 1),
                                                   ParamDescriptor::uniform("a", 0, 2)}),
               std::invalid_argument);
}

TEST(SampleUniform, SameSeedSameConfiguration) {
  const auto s = define_space(SpaceVariant::kS2Full);
  Rng a = make_rng(17), b = make_rng(17);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(s.sample_uniform(a), s.sample_uniform(b));
}

TEST(SampleUniform, OptimizerIsAFairCoin) {
  const auto s = define_space(SpaceVariant::kS1);
  Rng rng = make_rng(3);
  int sgd = 0;
  for (int i = 0; i < 10000; ++i) sgd += s.sample_uniform(rng).category(param_names::kOptimizer) == "SGD";
  EXPECT_GE(sgd / 10000.0, 0.47);
  EXPECT_LE(sgd / 10000.0, 0.53);
}

TEST(SampleUniform, LearningRateMedianIsTheLogMidpoint) {
  const auto s = define_space(SpaceVariant::kS1);
  Rng rng = make_rng(4);
  std::vector<double> lrs;
  for (int i = 0; i < 10000; ++i) lrs.push_back(s.sample_uniform(rng).real(param_names::kLearningRate));
  std::nth_element(lrs.begin(), lrs.begin() + 5000, lrs.end());
  EXPECT_GE(lrs[5000], 1.8e-3);
  EXPECT_LE(lrs[5000], 2.7e-3);
}

TEST(SampleUniform, SamplesPassValidation) {
  for (auto v : {SpaceVariant::kS1, SpaceVariant::kS2Full, SpaceVariant::kS2SharedSigma,
                 SpaceVariant::kS2FixedNopsRandomSigma}) {
    const auto s = define_space(v);
    Rng rng = make_rng(5);
    for (int i = 0; i < 1000; ++i) EXPECT_NO_THROW(s.validate(s.sample_uniform(rng)));
  }
}

namespace {
Configuration s1_config(double lr, std::int64_t batch) {
  Configuration c;
  c.values[param_names::kOptimizer] = std::string("SGD");
  c.values[param_names::kLearningRate] = lr;
  c.values[param_names::kL2] = 1e-4;
  c.values[param_names::kDecayEvery] = std::int64_t{1000};
  c.values[param_names::kBatchSize] = batch;
  return c;
}
}  // namespace

TEST(Encode, LogRangeEndpointsAndMidpoint) {
  const auto s = define_space(SpaceVariant::kS1);
  const auto i = s.index_of(param_names::kLearningRate);
  EXPECT_EQ(s.encode(s1_config(1e-4, 16)).coords[i], 0.0);
  EXPECT_EQ(s.encode(s1_config(0.05, 16)).coords[i], 1.0);
  EXPECT_NEAR(s.encode(s1_config(std::sqrt(1e-4 * 0.05), 16)).coords[i], 0.5, 1e-9);
}

TEST(Encode, BatchSizeUsesBinCenters) {
  const auto s = define_space(SpaceVariant::kS1);
  const auto i = s.index_of(param_names::kBatchSize);
  EXPECT_DOUBLE_EQ(s.encode(s1_config(0.01, 4)).coords[i], 0.1);
  EXPECT_DOUBLE_EQ(s.encode(s1_config(0.01, 64)).coords[i], 0.9);
}

TEST(Decode, SnapsToTheNearestBin) {
  const auto s = define_space(SpaceVariant::kS1);
  UnitPoint p = s.encode(s1_config(0.01, 16));
  p.coords[s.index_of(param_names::kBatchSize)] = 0.41;  // inside bin 2
  EXPECT_EQ(s.decode(p).integer(param_names::kBatchSize), 16);
  p.coords[s.index_of(param_names::kBatchSize)] = 1.0;
  EXPECT_EQ(s.decode(p).integer(param_names::kBatchSize), 64);
}

TEST(Decode, CoordinatesOutsideTheCubeAreRejected) {
  const auto s = define_space(SpaceVariant::kS1);
  UnitPoint p = s.encode(s1_config(0.01, 16));
  p.coords[0] = 1.0000001;
  EXPECT_THROW(s.decode(p), std::invalid_argument);
  p.coords[0] = -1e-12;
  EXPECT_THROW(s.decode(p), std::invalid_argument);
  p.coords.pop_back();
  EXPECT_THROW(s.decode(p), std::invalid_argument);
}

TEST(Encode, RoundTripIsExactForEveryVariant) {
  for (auto v : {SpaceVariant::kS1, SpaceVariant::kS2Full, SpaceVariant::kS2SharedSigma,
                 SpaceVariant::kS2FixedNopsRandomSigma}) {
    const auto s = define_space(v);
    Rng rng = make_rng(11);
    for (int i = 0; i < 1000; ++i) {
      const auto c = s.sample_uniform(rng);
      const auto p = s.encode(c);
      for (double x : p.coords) {
        ASSERT_GE(x, 0.0);
        ASSERT_LE(x, 1.0);
      }
      ASSERT_EQ(s.decode(p), c) << c.canonical_string();
    }
  }
}

TEST(Configuration, JsonIsKeySortedAndRoundTrips) {
  const auto s = define_space(SpaceVariant::kS2SharedSigma);
  Rng rng = make_rng(8);
  const auto c = s.sample_uniform(rng);
  const auto j = c.to_json();
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
  EXPECT_EQ(Configuration::from_json(j), c);
  EXPECT_EQ(Configuration::from_json(nlohmann::json::parse(j.dump())).checksum(), c.checksum());
}

TEST(Configuration, ValidationRejectsMissingAndOutOfRangeValues) {
  const auto s = define_space(SpaceVariant::kS1);
  auto c = s1_config(0.01, 16);
  EXPECT_NO_THROW(s.validate(c));
  c.values[param_names::kLearningRate] = 0.2;
  EXPECT_THROW(s.validate(c), std::invalid_argument);
  c = s1_config(0.01, 12);
  EXPECT_THROW(s.validate(c), std::invalid_argument);
  c = s1_config(0.01, 16);
  c.values.erase(param_names::kL2);
  EXPECT_THROW(s.validate(c), std::invalid_argument);
}
