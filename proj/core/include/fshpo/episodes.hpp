#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fshpo/datagen.hpp"
#include "fshpo/random.hpp"
#include "fshpo/tinynet.hpp"

namespace fshpo {

enum class EpisodeMode { kFixed, kVariable };

struct EpisodeSpec {
  EpisodeMode mode = EpisodeMode::kFixed;
  int ways = 5;
  int shots = 1;
  int queries_per_class = 15;
  // Variable mode: ways ~ U{min_ways..min(max_ways, #classes)}, shots ~ U{1..max_shots}.
  int min_ways = 5;
  int max_ways = 20;
  int max_shots = 10;
  int variable_queries_per_class = 10;

  static EpisodeSpec fixed(int ways, int shots, int queries_per_class = 15);
  static EpisodeSpec variable();

  nlohmann::json to_json() const;
  static EpisodeSpec from_json(const nlohmann::json& j);
};

/// One few-shot task. Examples are dataset indices; labels are relabeled
/// 0 .. ways-1.
struct Episode {
  int ways = 0;
  int shots = 0;
  int split_id = 0;
  std::vector<std::size_t> support;
  std::vector<int> support_labels;
  std::vector<std::size_t> query;
  std::vector<int> query_labels;
};

Episode sample_episode(const ClassSubset& split, const EpisodeSpec& spec, Rng& rng);

/// Row-major embedding matrix view.
struct Embeddings {
  std::span<const double> data;
  int dim = 0;
  std::size_t rows() const { return dim == 0 ? 0 : data.size() / static_cast<std::size_t>(dim); }
  std::span<const double> row(std::size_t i) const {
    return data.subspan(i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
  }
};

/// cosine(query, class-mean prototype) for every query and class
/// (n_query x ways, row-major). Zero-norm vectors score 0.
std::vector<double> ncentroid_scores(Embeddings support, std::span<const int> support_labels,
                                     Embeddings query, int ways);

/// argmax per row of the prototype cosine scores; ties go to the lowest class.
std::vector<int> ncentroid_classify(Embeddings support, std::span<const int> support_labels,
                                    Embeddings query, int ways);

struct LinearHeadConfig {
  int steps = 75;
  double momentum = 0.9;
  double lr = 0.01;
  double l2 = 0.001;
};

struct LinearHeadResult {
  std::vector<double> weights;  // dim x ways, row-major
  double initial_loss = 0.0;    // loss before the first update
  double final_loss = 0.0;      // loss after the last update
  std::vector<double> probabilities;  // n_query x ways softmax
  std::vector<int> predictions;
};

/// Zero-initialized W (dim x ways, no bias) trained by full-batch
/// cross-entropy + l2*|W|^2 with SGD momentum.
LinearHeadResult linear_classify(Embeddings support, std::span<const int> support_labels,
                                 Embeddings query, int ways,
                                 const LinearHeadConfig& cfg = {});

enum class ClassifierKind { kNearestCentroid, kLinear };

std::string to_string(ClassifierKind k);
ClassifierKind parse_classifier(const std::string& s);

/// Normalized class scores used for prediction and ensembling: cosine for
/// nearest-centroid, softmax probabilities for the linear head.
std::vector<double> class_scores(ClassifierKind kind, Embeddings support,
                                 std::span<const int> support_labels, Embeddings query, int ways);

std::vector<int> argmax_rows(std::span<const double> scores, int cols);

struct EvalReport {
  double mean_accuracy = 0.0;  // percent
  double ci95 = 0.0;           // percent, 1.96 * sd / sqrt(n)
  int n_tasks = 0;
  std::vector<double> task_accuracies;

  static EvalReport aggregate(std::vector<double> task_accuracies);
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Embeddings of every image of the given subsets, addressed by dataset
/// index. The extractor is only read.
class EmbeddingCache {
 public:
  EmbeddingCache(const NetParams& params, const std::vector<ClassSubset>& splits);

  Embeddings gather(const Dataset* data, std::span<const std::size_t> examples,
                    std::vector<double>& buffer) const;
  int dim() const { return dim_; }

 private:
  struct Block {
    const Dataset* data = nullptr;
    std::vector<std::int32_t> row_of;  // dataset index -> row, -1 if absent
    std::vector<double> rows;
  };
  std::vector<Block> blocks_;
  int dim_ = 0;
};

/// Task t is drawn with an rng derived from (seed, t).
EvalReport evaluate(const NetParams& params, const ClassSubset& split, int n_tasks,
                    const EpisodeSpec& spec, ClassifierKind kind, std::uint64_t seed);

/// Each task first picks one of `splits` uniformly.
EvalReport evaluate_mixture(const NetParams& params, const std::vector<ClassSubset>& splits,
                            int n_tasks, const EpisodeSpec& spec, ClassifierKind kind,
                            std::uint64_t seed);

/// Episode of task t of an evaluation, reproducing evaluate_mixture's draw.
Episode episode_for_task(const std::vector<ClassSubset>& splits, const EpisodeSpec& spec,
                         std::uint64_t seed, int task);

}  // namespace fshpo
