#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>

#include "fshpo/hpspace.hpp"
#include "fshpo/image.hpp"
#include "fshpo/random.hpp"

namespace fshpo {

enum class AugOp {
  kRotate,
  kPosterize,
  kSolarize,
  kColor,
  kContrast,
  kBrightness,
  kSharpness,
  kShear,
  kTranslate,
  kCutout,
};

inline constexpr std::size_t kNumAugOps = 10;
inline constexpr double kMaxMagnitude = 30.0;

std::string to_string(AugOp op);
AugOp parse_aug_op(const std::string& name);

struct AugPolicy {
  int n_ops = 1;
  std::array<double, kNumAugOps> sigmas{};

  static AugPolicy shared(int n_ops, double sigma_common);
  void validate() const;
};

/// Zero-clipped Gaussian magnitude: min(max(N(0, sigma^2), 0), 30).
double sample_magnitude(double sigma, Rng& rng);

/// Applies `op` at magnitude m in [0, 30] to one HWC image in place.
/// m == 0 leaves the image untouched.
void apply_op(std::span<double> image, const ImageShape& shape, AugOp op,
              double magnitude, Rng& rng);

/// Picks n_ops distinct ops for the whole batch, then applies them in the
/// drawn order with one magnitude per image. Returns the ops used.
std::vector<AugOp> apply_policy(ImageBatch& batch, const AugPolicy& policy, Rng& rng);

/// Non-searched baseline: 4-pixel padded random crop, horizontal flip with
/// p = 0.5 and brightness jitter of +-0.1.
void apply_baseline(ImageBatch& batch, Rng& rng);

/// Policy encoded by an S2-family configuration; nullopt for S1.
/// For the random-sigma variant the sigmas are drawn from `seed`.
std::optional<AugPolicy> policy_from_config(const SearchSpace& space,
                                            const Configuration& config,
                                            std::uint64_t seed);

}  // namespace fshpo
