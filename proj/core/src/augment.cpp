#include "fshpo/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace fshpo {

std::string to_string(AugOp op) { return kAugOpNames.at(static_cast<std::size_t>(op)); }

AugOp parse_aug_op(const std::string& name) {
  for (std::size_t i = 0; i < kAugOpNames.size(); ++i)
    if (name == kAugOpNames[i]) return static_cast<AugOp>(i);
  throw std::invalid_argument("unknown augmentation op '" + name + "'");
}

AugPolicy AugPolicy::shared(int n_ops, double sigma_common) {
  AugPolicy p;
  p.n_ops = n_ops;
  p.sigmas.fill(sigma_common);
  return p;
}

void AugPolicy::validate() const {
  if (n_ops < 1 || n_ops > static_cast<int>(kNumAugOps))
    throw std::invalid_argument("n_ops must lie in [1, 10]");
  for (double s : sigmas)
    if (!(s >= 1.0 && s <= 25.0)) throw std::invalid_argument("sigma must lie in [1, 25]");
}

double sample_magnitude(double sigma, Rng& rng) {
  return std::clamp(normal(rng, 0.0, sigma), 0.0, kMaxMagnitude);
}

namespace {

constexpr double kFill = 0.5;

double sign(Rng& rng) { return uniform01(rng) < 0.5 ? -1.0 : 1.0; }

/// Bilinear sample of channel ch at (x, y); samples outside the image read kFill.
double bilinear(std::span<const double> img, const ImageShape& s, double x, double y, int ch) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int yy, int xx) {
    if (xx < 0 || yy < 0 || xx >= s.width || yy >= s.height) return kFill;
    return img[(static_cast<std::size_t>(yy) * s.width + xx) * s.channels + ch];
  };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

/// out(x, y) = in(map(x, y)) with bilinear sampling.
template <typename Map>
void warp(std::span<double> image, const ImageShape& s, Map map) {
  const std::vector<double> src(image.begin(), image.end());
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const auto [sx, sy] = map(static_cast<double>(x), static_cast<double>(y));
      for (int ch = 0; ch < s.channels; ++ch)
        image[(static_cast<std::size_t>(y) * s.width + x) * s.channels + ch] =
            bilinear(src, s, sx, sy, ch);
    }
  }
}

double luminance(std::span<const double> img, std::size_t pixel, int channels) {
  const double* p = img.data() + pixel * static_cast<std::size_t>(channels);
  if (channels != 3) return p[0];
  return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
}

/// out = base + f * (img - base), per pixel/channel.
template <typename Base>
void blend(std::span<double> image, double f, Base base) {
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = base(i) + f * (image[i] - base(i));
}

void clamp01(std::span<double> image) {
  for (double& v : image) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

void apply_op(std::span<double> image, const ImageShape& shape, AugOp op, double magnitude,
              Rng& rng) {
  if (image.size() != shape.size()) throw std::invalid_argument("image does not match its shape");
  if (!(magnitude >= 0.0 && magnitude <= kMaxMagnitude))
    throw std::invalid_argument("magnitude must lie in [0, 30]");
  if (magnitude == 0.0) return;
  const double level = magnitude / kMaxMagnitude;
  const double cx = 0.5 * (shape.width - 1), cy = 0.5 * (shape.height - 1);
  const auto n_pixels = static_cast<std::size_t>(shape.height) * static_cast<std::size_t>(shape.width);
  const int c = shape.channels;

  switch (op) {
    case AugOp::kRotate: {
      const double theta = sign(rng) * level * 30.0 * std::numbers::pi / 180.0;
      const double cs = std::cos(theta), sn = std::sin(theta);
      warp(image, shape, [&](double x, double y) {
        const double dx = x - cx, dy = y - cy;
        return std::pair{cx + cs * dx + sn * dy, cy - sn * dx + cs * dy};
      });
      break;
    }
    case AugOp::kShear: {
      const double k = sign(rng) * level * 0.3;
      warp(image, shape, [&](double x, double y) { return std::pair{x + k * (y - cy), y}; });
      break;
    }
    case AugOp::kTranslate: {
      const double shift = sign(rng) * level * 0.3 * shape.width;
      const bool horizontal = uniform01(rng) < 0.5;
      warp(image, shape, [&](double x, double y) {
        return horizontal ? std::pair{x - shift, y} : std::pair{x, y - shift};
      });
      break;
    }
    case AugOp::kBrightness: {
      const double f = 1.0 + sign(rng) * level * 0.9;
      blend(image, f, [](std::size_t) { return 0.0; });
      break;
    }
    case AugOp::kContrast: {
      const double f = 1.0 + sign(rng) * level * 0.9;
      double mean = 0.0;
      for (std::size_t p = 0; p < n_pixels; ++p) mean += luminance(image, p, c);
      mean /= static_cast<double>(n_pixels);
      blend(image, f, [mean](std::size_t) { return mean; });
      break;
    }
    case AugOp::kColor: {
      const double f = 1.0 + sign(rng) * level * 0.9;
      std::vector<double> gray(n_pixels);
      for (std::size_t p = 0; p < n_pixels; ++p) gray[p] = luminance(image, p, c);
      blend(image, f, [&](std::size_t i) { return gray[i / static_cast<std::size_t>(c)]; });
      break;
    }
    case AugOp::kSharpness: {
      const double f = 1.0 + sign(rng) * level * 0.9;
      // 3x3 smoothing kernel (1s around a centre weight of 5); border pixels kept.
      std::vector<double> smooth(image.begin(), image.end());
      for (int y = 1; y + 1 < shape.height; ++y) {
        for (int x = 1; x + 1 < shape.width; ++x) {
          for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx)
                acc += (dx == 0 && dy == 0 ? 5.0 : 1.0) *
                       image[(static_cast<std::size_t>(y + dy) * shape.width + x + dx) * c + ch];
            smooth[(static_cast<std::size_t>(y) * shape.width + x) * c + ch] = acc / 13.0;
          }
        }
      }
      blend(image, f, [&](std::size_t i) { return smooth[i]; });
      break;
    }
    case AugOp::kPosterize: {
      const int bits = 8 - static_cast<int>(std::lround(level * 4.0));
      const double top = std::ldexp(1.0, bits) - 1.0;
      for (double& v : image) v = std::round(std::clamp(v, 0.0, 1.0) * top) / top;
      break;
    }
    case AugOp::kSolarize: {
      const double threshold = 1.0 - level;
      for (double& v : image)
        if (v >= threshold) v = 1.0 - v;
      break;
    }
    case AugOp::kCutout: {
      const int side = static_cast<int>(std::lround(level * 0.5 * shape.width));
      const auto px = uniform_int(rng, 0, shape.width - 1);
      const auto py = uniform_int(rng, 0, shape.height - 1);
      if (side < 1) break;
      const auto x0 = std::max<std::int64_t>(0, px - side / 2);
      const auto y0 = std::max<std::int64_t>(0, py - side / 2);
      const auto x1 = std::min<std::int64_t>(shape.width, px - side / 2 + side);
      const auto y1 = std::min<std::int64_t>(shape.height, py - side / 2 + side);
      for (auto y = y0; y < y1; ++y)
        for (auto x = x0; x < x1; ++x)
          for (int ch = 0; ch < c; ++ch)
            image[(static_cast<std::size_t>(y) * shape.width + static_cast<std::size_t>(x)) * c + ch] = kFill;
      break;
    }
    default:
      throw std::invalid_argument("unknown augmentation op");
  }
  clamp01(image);
}

std::vector<AugOp> apply_policy(ImageBatch& batch, const AugPolicy& policy, Rng& rng) {
  policy.validate();
  std::array<std::size_t, kNumAugOps> order{};
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<AugOp> chosen;
  for (int i = 0; i < policy.n_ops; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, i, static_cast<std::int64_t>(kNumAugOps) - 1));
    std::swap(order[static_cast<std::size_t>(i)], order[j]);
    chosen.push_back(static_cast<AugOp>(order[static_cast<std::size_t>(i)]));
  }
  for (const auto op : chosen) {
    const double sigma = policy.sigmas[static_cast<std::size_t>(op)];
    for (std::size_t n = 0; n < batch.count(); ++n) {
      const double m = sample_magnitude(sigma, rng);
      apply_op(batch.image(n), batch.shape(), op, m, rng);
    }
  }
  return chosen;
}

void apply_baseline(ImageBatch& batch, Rng& rng) {
  constexpr int kPad = 4;
  const auto& s = batch.shape();
  std::vector<double> src(s.size());
  for (std::size_t n = 0; n < batch.count(); ++n) {
    auto img = batch.image(n);
    std::copy(img.begin(), img.end(), src.begin());
    const auto dx = uniform_int(rng, -kPad, kPad);
    const auto dy = uniform_int(rng, -kPad, kPad);
    const bool flip = uniform01(rng) < 0.5;
    const double gain = 1.0 + (2.0 * uniform01(rng) - 1.0) * 0.1;
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        const auto sx0 = x + dx;
        const auto sy = y + dy;
        const auto sx = flip ? (s.width - 1 - sx0) : sx0;
        for (int ch = 0; ch < s.channels; ++ch) {
          double v = 0.0;
          if (sx >= 0 && sy >= 0 && sx < s.width && sy < s.height)
            v = src[(static_cast<std::size_t>(sy) * s.width + static_cast<std::size_t>(sx)) * s.channels + ch];
          img[(static_cast<std::size_t>(y) * s.width + x) * s.channels + ch] = std::clamp(v * gain, 0.0, 1.0);
        }
      }
    }
  }
}

std::optional<AugPolicy> policy_from_config(const SearchSpace& space, const Configuration& config,
                                            std::uint64_t seed) {
  switch (space.variant()) {
    case SpaceVariant::kS2Full: {
      AugPolicy p;
      p.n_ops = static_cast<int>(config.integer(param_names::kNops));
      for (std::size_t i = 0; i < kNumAugOps; ++i) p.sigmas[i] = config.real(sigma_param_name(i));
      return p;
    }
    case SpaceVariant::kS2SharedSigma:
      return AugPolicy::shared(static_cast<int>(config.integer(param_names::kNops)),
                               config.real(param_names::kSigmaCommon));
    case SpaceVariant::kS2FixedNopsRandomSigma: {
      AugPolicy p;
      p.n_ops = 1;
      Rng rng = make_rng(derive_seed(seed, tag_hash("sigma")));
      for (auto& s : p.sigmas) s = 1.0 + 24.0 * uniform01(rng);
      return p;
    }
    default:
      return std::nullopt;
  }
}

}  // namespace fshpo
