#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "fshpo/hpspace.hpp"
#include "fshpo/random.hpp"

namespace fshpo {

inline constexpr double kMinBandwidth = 1e-3;

/// Gaussian product-kernel density over unit-hypercube points, with Scott's
/// rule bandwidths floored at kMinBandwidth.
class KdeModel {
 public:
  static KdeModel fit(std::vector<UnitPoint> points);

  std::size_t dim() const { return bandwidths_.size(); }
  std::size_t size() const { return points_.size(); }
  const std::vector<UnitPoint>& points() const { return points_; }
  const std::vector<double>& bandwidths() const { return bandwidths_; }

  double density(std::span<const double> x) const;
  /// log density, stable for tiny bandwidths in high dimension.
  double log_density(std::span<const double> x) const;

  /// Draw from the kernel mixture with bandwidths scaled by `factor`,
  /// coordinates clamped to [0,1].
  UnitPoint sample(Rng& rng, double factor) const;

 private:
  std::vector<UnitPoint> points_;
  std::vector<double> bandwidths_;
};

struct ProposalConfig {
  int n_candidates = 64;
  double bandwidth_factor = 3.0;
  double random_fraction = 1.0 / 3.0;
  double good_quantile = 0.15;
  /// 0 means d + 1.
  int min_points_per_model = 0;

  int min_points(std::size_t dim) const {
    return min_points_per_model > 0 ? min_points_per_model
                                    : static_cast<int>(dim) + 1;
  }
  void validate() const;
};

struct ScoredPoint {
  UnitPoint point;
  double accuracy = 0.0;
  std::int64_t trial_id = 0;
};

struct GoodBadSplit {
  std::vector<UnitPoint> good;
  std::vector<UnitPoint> bad;
};

/// Top max(min_points, ceil(q*n)) by accuracy are good (ties: smaller trial
/// id first), the remainder bad.
GoodBadSplit split_good_bad(std::vector<ScoredPoint> results,
                            const ProposalConfig& cfg, std::size_t dim);

/// Returns the widened-good-model candidate that maximizes
/// good(x) / max(bad(x), 1e-32). A null `bad` model means an empty bad set.
UnitPoint propose(const KdeModel& good, const KdeModel* bad,
                  const ProposalConfig& cfg, Rng& rng);

}  // namespace fshpo
