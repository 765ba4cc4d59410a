#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fshpo/augment.hpp"
#include "fshpo/hpspace.hpp"
#include "fshpo/image.hpp"

namespace fshpo {

/// conv3x3(c1)+relu+pool2 -> conv3x3(c2)+relu+pool2 -> fc(embedding)+relu
/// -> fc(n_classes). Height and width must be multiples of 4.
struct NetSpec {
  ImageShape input{32, 32, 3};
  int conv1_channels = 8;
  int conv2_channels = 16;
  int embedding_dim = 64;
  int n_classes = 10;

  void validate() const;
  std::uint64_t hash() const;
  int flat_features() const {
    return (input.height / 4) * (input.width / 4) * conv2_channels;
  }
  bool operator==(const NetSpec&) const = default;
};

/// Placement of one tensor inside the flat parameter vector (row-major).
struct TensorSlot {
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  bool is_weight = true;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

struct NetLayout {
  TensorSlot conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b, head_w, head_b;
  std::size_t total = 0;

  static NetLayout of(const NetSpec& spec);
  std::array<TensorSlot, 8> slots() const {
    return {conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b, head_w, head_b};
  }
};

struct NetParams {
  NetSpec spec;
  std::vector<double> values;

  bool all_finite() const;
  bool operator==(const NetParams&) const = default;
};

/// He-style fan-in scaled Gaussian weights, zero biases.
NetParams init_params(const NetSpec& spec, std::uint64_t seed);

struct ForwardResult {
  int batch = 0;
  std::vector<double> embeddings;  // batch x embedding_dim, post-ReLU
  std::vector<double> logits;      // batch x n_classes
};

ForwardResult forward(const NetParams& params, const ImageBatch& images);

/// Embeddings only, bitwise equal to forward().embeddings.
std::vector<double> embed(const NetParams& params, const ImageBatch& images);

struct LossAndGrad {
  double loss = 0.0;  // mean cross-entropy + l2 * sum of squared weights
  double data_loss = 0.0;
  std::vector<double> grads;
};

/// Scratch buffers reused across steps.
struct NetWorkspace;

LossAndGrad loss_and_grad(const NetParams& params, const ImageBatch& images,
                          std::span<const int> labels, double l2);
void loss_and_grad(const NetParams& params, const ImageBatch& images,
                   std::span<const int> labels, double l2, NetWorkspace& ws,
                   LossAndGrad& out);

/// Cosine annealing with warm restarts every `period` updates.
double lr_at(std::int64_t t, double lr0, std::int64_t period);

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer(const std::string& s);
std::string to_string(OptimizerKind k);

inline constexpr double kSgdMomentum = 0.9;
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kSgd;
  std::vector<double> m;  // SGD velocity, or ADAM first moment
  std::vector<double> v;  // ADAM second moment
  std::int64_t t = 0;

  static OptimizerState zeros(OptimizerKind kind, std::size_t n);
  bool operator==(const OptimizerState&) const = default;
};

/// One optimizer update in place. Returns false if any updated parameter is
/// non-finite.
bool step(OptimizerState& state, std::span<double> params,
          std::span<const double> grads, double lr);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double lr0 = 0.01;
  double l2 = 1e-4;
  std::int64_t batch_size = 16;
  std::int64_t decay_every = 1000;

  static TrainConfig from_configuration(const Configuration& config);
  void validate() const;
};

/// Labeled training examples: images addressed by index into `images`.
struct TrainSplit {
  const ImageBatch* images = nullptr;
  std::vector<std::size_t> indices;
  std::vector<int> labels;  // 0 .. n_classes-1, parallel to indices
  int n_classes = 0;
};

struct FeatureExtractor {
  NetParams params;
  std::string config_id;
  std::int64_t updates_trained = 0;

  std::vector<double> embed(const ImageBatch& images) const {
    return fshpo::embed(params, images);
  }
  int embedding_dim() const { return params.spec.embedding_dim; }
  bool operator==(const FeatureExtractor&) const = default;
};

/// Everything needed to continue a training run bit-exactly.
struct TrainState {
  FeatureExtractor extractor;
  OptimizerState opt;
  std::uint64_t seed = 0;
  double last_loss = 0.0;
  bool diverged = false;

  std::vector<std::byte> serialize() const;
  static TrainState deserialize(std::span<const std::byte> bytes);
  void save(const std::filesystem::path& path) const;
  static TrainState load(const std::filesystem::path& path);

  bool operator==(const TrainState&) const = default;
};

struct TrainOptions {
  bool baseline_augmentation = false;
  std::optional<AugPolicy> policy;
};

/// Runs the optimizer until `n_updates` total updates. When `resume` is
/// given, training continues from it (same seed required); otherwise the
/// network is initialized from `seed`. Divergence stops training and sets
/// TrainState::diverged.
TrainState train(const TrainSplit& split, const NetSpec& spec, const TrainConfig& cfg,
                 std::int64_t n_updates, std::uint64_t seed, const TrainOptions& options,
                 std::optional<TrainState> resume = std::nullopt);

/// Fraction of `split` classified correctly by the training head.
double training_accuracy(const NetParams& params, const TrainSplit& split);

}  // namespace fshpo
