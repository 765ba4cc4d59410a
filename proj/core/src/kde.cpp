#include "fshpo/kde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace fshpo {

namespace {

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

KdeModel KdeModel::fit(std::vector<UnitPoint> points) {
  if (points.empty()) throw std::invalid_argument("KDE fit needs at least one point");
  const std::size_t d = points.front().dim();
  if (d == 0) throw std::invalid_argument("KDE points must have dimension >= 1");
  for (const auto& p : points)
    if (p.dim() != d) throw std::invalid_argument("KDE points differ in dimension");

  const auto n = static_cast<double>(points.size());
  const double scott = std::pow(n, -1.0 / (static_cast<double>(d) + 4.0));
  KdeModel m;
  m.bandwidths_.assign(d, kMinBandwidth);
  if (points.size() > 1) {
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (const auto& p : points) mean += p.coords[j];
      mean /= n;
      double ss = 0.0;
      for (const auto& p : points) ss += (p.coords[j] - mean) * (p.coords[j] - mean);
      const double sd = std::sqrt(ss / (n - 1.0));
      m.bandwidths_[j] = std::max(kMinBandwidth, scott * sd);
    }
  }
  m.points_ = std::move(points);
  return m;
}

double KdeModel::log_density(std::span<const double> x) const {
  if (x.size() != dim()) throw std::invalid_argument("KDE query has wrong dimension");
  double log_norm = 0.0;
  for (double h : bandwidths_) log_norm -= std::log(h) + 0.5 * std::log(2.0 * std::numbers::pi);
  std::vector<double> terms;
  terms.reserve(points_.size());
  for (const auto& p : points_) {
    double e = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double z = (x[j] - p.coords[j]) / bandwidths_[j];
      e -= 0.5 * z * z;
    }
    terms.push_back(e);
  }
  return log_norm + log_sum_exp(terms) - std::log(static_cast<double>(points_.size()));
}

double KdeModel::density(std::span<const double> x) const {
  return std::exp(log_density(x));
}

UnitPoint KdeModel::sample(Rng& rng, double factor) const {
  const auto& center =
      points_[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(points_.size()) - 1))];
  UnitPoint out;
  out.coords.resize(dim());
  for (std::size_t j = 0; j < dim(); ++j)
    out.coords[j] = std::clamp(normal(rng, center.coords[j], factor * bandwidths_[j]), 0.0, 1.0);
  return out;
}

void ProposalConfig::validate() const {
  if (n_candidates < 1) throw std::invalid_argument("n_candidates must be positive");
  if (!(bandwidth_factor >= 1.0)) throw std::invalid_argument("bandwidth_factor must be >= 1");
  if (!(random_fraction >= 0.0 && random_fraction <= 1.0))
    throw std::invalid_argument("random_fraction must lie in [0,1]");
  if (!(good_quantile > 0.0 && good_quantile < 1.0))
    throw std::invalid_argument("good_quantile must lie in (0,1)");
  if (min_points_per_model < 0) throw std::invalid_argument("min_points_per_model must be positive");
}

GoodBadSplit split_good_bad(std::vector<ScoredPoint> results,
                            const ProposalConfig& cfg, std::size_t dim) {
  std::sort(results.begin(), results.end(), [](const ScoredPoint& a, const ScoredPoint& b) {
    if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
    return a.trial_id < b.trial_id;
  });
  const auto n = results.size();
  const auto by_quantile =
      static_cast<std::size_t>(std::ceil(cfg.good_quantile * static_cast<double>(n)));
  const auto n_good =
      std::min(n, std::max(static_cast<std::size_t>(cfg.min_points(dim)), by_quantile));
  GoodBadSplit split;
  for (std::size_t i = 0; i < n; ++i)
    (i < n_good ? split.good : split.bad).push_back(std::move(results[i].point));
  return split;
}

UnitPoint propose(const KdeModel& good, const KdeModel* bad,
                  const ProposalConfig& cfg, Rng& rng) {
  constexpr double kLogFloor = -73.68272297580946;  // log(1e-32)
  UnitPoint best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < cfg.n_candidates; ++i) {
    UnitPoint cand = good.sample(rng, cfg.bandwidth_factor);
    double score = good.log_density(cand.coords);
    if (bad != nullptr) score -= std::max(bad->log_density(cand.coords), kLogFloor);
    if (best.coords.empty() || score > best_score) {
      best_score = score;
      best = std::move(cand);
    }
  }
  return best;
}

}  // namespace fshpo
