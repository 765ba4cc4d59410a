#include "fshpo/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fshpo {

EpisodeSpec EpisodeSpec::fixed(int ways, int shots, int queries_per_class) {
  EpisodeSpec s;
  s.mode = EpisodeMode::kFixed;
  s.ways = ways;
  s.shots = shots;
  s.queries_per_class = queries_per_class;
  return s;
}

EpisodeSpec EpisodeSpec::variable() {
  EpisodeSpec s;
  s.mode = EpisodeMode::kVariable;
  return s;
}

nlohmann::json EpisodeSpec::to_json() const {
  if (mode == EpisodeMode::kFixed)
    return {{"mode", "fixed"}, {"ways", ways}, {"shots", shots}, {"queries", queries_per_class}};
  return {{"mode", "variable"}, {"min_ways", min_ways}, {"max_ways", max_ways},
          {"max_shots", max_shots}, {"queries", variable_queries_per_class}};
}

EpisodeSpec EpisodeSpec::from_json(const nlohmann::json& j) {
  const auto mode = j.value("mode", std::string("fixed"));
  if (mode == "fixed")
    return fixed(j.value("ways", 5), j.value("shots", 1), j.value("queries", 15));
  if (mode == "variable") {
    auto s = variable();
    s.min_ways = j.value("min_ways", s.min_ways);
    s.max_ways = j.value("max_ways", s.max_ways);
    s.max_shots = j.value("max_shots", s.max_shots);
    s.variable_queries_per_class = j.value("queries", s.variable_queries_per_class);
    return s;
  }
  throw std::invalid_argument("unknown episode mode '" + mode + "'");
}

Episode sample_episode(const ClassSubset& split, const EpisodeSpec& spec, Rng& rng) {
  if (split.data == nullptr) throw std::invalid_argument("episode split has no dataset");
  const int n_classes = static_cast<int>(split.classes.size());
  const int per_class = split.data->spec.images_per_class;

  int ways = 0, shots = 0, queries = 0;
  if (spec.mode == EpisodeMode::kFixed) {
    ways = spec.ways;
    shots = spec.shots;
    queries = spec.queries_per_class;
  } else {
    queries = spec.variable_queries_per_class;
    const int hi_ways = std::min(spec.max_ways, n_classes);
    if (hi_ways < spec.min_ways)
      throw std::invalid_argument("split has " + std::to_string(n_classes) + " classes; variable episodes need " +
                                  std::to_string(spec.min_ways));
    ways = static_cast<int>(uniform_int(rng, spec.min_ways, hi_ways));
    const int hi_shots = std::min(spec.max_shots, per_class - queries);
    if (hi_shots < 1)
      throw std::invalid_argument("classes have too few examples for " + std::to_string(queries) + " queries");
    shots = static_cast<int>(uniform_int(rng, 1, hi_shots));
  }
  if (ways < 1 || shots < 1 || queries < 1) throw std::invalid_argument("ways, shots and queries must be >= 1");
  if (ways > n_classes)
    throw std::invalid_argument("episode needs " + std::to_string(ways) + " classes, split has " +
                                std::to_string(n_classes));
  if (shots + queries > per_class)
    throw std::invalid_argument("episode needs " + std::to_string(shots + queries) +
                                " examples per class, classes have " + std::to_string(per_class));

  std::vector<int> classes = split.classes;
  for (int i = 0; i < ways; ++i) {
    const auto j = uniform_int(rng, i, n_classes - 1);
    std::swap(classes[static_cast<std::size_t>(i)], classes[static_cast<std::size_t>(j)]);
  }
  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.split_id = split.split_id;
  for (int w = 0; w < ways; ++w) {
    auto examples = split.data->examples_of(classes[static_cast<std::size_t>(w)]);
    const int take = shots + queries;
    for (int i = 0; i < take; ++i) {
      const auto j = uniform_int(rng, i, static_cast<std::int64_t>(examples.size()) - 1);
      std::swap(examples[static_cast<std::size_t>(i)], examples[static_cast<std::size_t>(j)]);
    }
    for (int i = 0; i < shots; ++i) {
      ep.support.push_back(examples[static_cast<std::size_t>(i)]);
      ep.support_labels.push_back(w);
    }
    for (int i = shots; i < take; ++i) {
      ep.query.push_back(examples[static_cast<std::size_t>(i)]);
      ep.query_labels.push_back(w);
    }
  }
  return ep;
}

namespace {

void check_embeddings(Embeddings support, std::span<const int> labels, Embeddings query, int ways) {
  if (support.dim <= 0 || support.dim != query.dim) throw std::invalid_argument("embedding dimensions differ");
  if (support.rows() != labels.size()) throw std::invalid_argument("support label count mismatch");
  if (ways < 1) throw std::invalid_argument("ways must be >= 1");
  std::vector<int> count(static_cast<std::size_t>(ways), 0);
  for (int y : labels) {
    if (y < 0 || y >= ways) throw std::invalid_argument("support label out of range");
    ++count[static_cast<std::size_t>(y)];
  }
  if (std::find(count.begin(), count.end(), 0) != count.end())
    throw std::invalid_argument("every class needs at least one support example");
}

}  // namespace

std::vector<double> ncentroid_scores(Embeddings support, std::span<const int> support_labels,
                                     Embeddings query, int ways) {
  check_embeddings(support, support_labels, query, ways);
  const auto d = static_cast<std::size_t>(support.dim);
  std::vector<double> proto(static_cast<std::size_t>(ways) * d, 0.0);
  std::vector<int> count(static_cast<std::size_t>(ways), 0);
  for (std::size_t i = 0; i < support.rows(); ++i) {
    const auto y = static_cast<std::size_t>(support_labels[i]);
    const auto r = support.row(i);
    for (std::size_t k = 0; k < d; ++k) proto[y * d + k] += r[k];
    ++count[y];
  }
  std::vector<double> proto_norm(static_cast<std::size_t>(ways));
  for (std::size_t c = 0; c < static_cast<std::size_t>(ways); ++c) {
    double nn = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      proto[c * d + k] /= count[c];
      nn += proto[c * d + k] * proto[c * d + k];
    }
    proto_norm[c] = std::sqrt(nn);
  }
  std::vector<double> scores(query.rows() * static_cast<std::size_t>(ways), 0.0);
  for (std::size_t q = 0; q < query.rows(); ++q) {
    const auto r = query.row(q);
    double qn = 0.0;
    for (double v : r) qn += v * v;
    qn = std::sqrt(qn);
    for (std::size_t c = 0; c < static_cast<std::size_t>(ways); ++c) {
      if (qn == 0.0 || proto_norm[c] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += r[k] * proto[c * d + k];
      scores[q * static_cast<std::size_t>(ways) + c] = dot / (qn * proto_norm[c]);
    }
  }
  return scores;
}

std::vector<int> argmax_rows(std::span<const double> scores, int cols) {
  const auto c = static_cast<std::size_t>(cols);
  std::vector<int> out(scores.size() / c);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (scores[i * c + j] > scores[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> ncentroid_classify(Embeddings support, std::span<const int> support_labels,
                                    Embeddings query, int ways) {
  return argmax_rows(ncentroid_scores(support, support_labels, query, ways), ways);
}

namespace {

/// Softmax rows of x*W (n x ways) into probs; returns mean cross-entropy.
double softmax_ce(Embeddings x, std::span<const int> labels, const std::vector<double>& w, int ways,
                  std::vector<double>& probs) {
  const auto d = static_cast<std::size_t>(x.dim);
  const auto k = static_cast<std::size_t>(ways);
  probs.assign(x.rows() * k, 0.0);
  double ce = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    double* p = probs.data() + i * k;
    for (std::size_t c = 0; c < k; ++c) {
      double z = 0.0;
      for (std::size_t j = 0; j < d; ++j) z += r[j] * w[j * k + c];
      p[c] = z;
    }
    const double m = *std::max_element(p, p + k);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(p[c] - m);
    const double lse = m + std::log(s);
    if (!labels.empty()) ce -= p[static_cast<std::size_t>(labels[i])] - lse;
    for (std::size_t c = 0; c < k; ++c) p[c] = std::exp(p[c] - lse);
  }
  return x.rows() == 0 ? 0.0 : ce / static_cast<double>(x.rows());
}

}  // namespace

LinearHeadResult linear_classify(Embeddings support, std::span<const int> support_labels, Embeddings query,
                                 int ways, const LinearHeadConfig& cfg) {
  check_embeddings(support, support_labels, query, ways);
  const auto d = static_cast<std::size_t>(support.dim);
  const auto k = static_cast<std::size_t>(ways);
  const auto n = static_cast<double>(support.rows());
  LinearHeadResult r;
  r.weights.assign(d * k, 0.0);
  std::vector<double> velocity(d * k, 0.0), grad(d * k), probs;

  auto loss_of = [&](const std::vector<double>& w) {
    double reg = 0.0;
    for (double v : w) reg += v * v;
    return softmax_ce(support, support_labels, w, ways, probs) + cfg.l2 * reg;
  };

  r.initial_loss = loss_of(r.weights);
  for (int step = 0; step < cfg.steps; ++step) {
    softmax_ce(support, support_labels, r.weights, ways, probs);
    for (std::size_t i = 0; i < d * k; ++i) grad[i] = 2.0 * cfg.l2 * r.weights[i];
    for (std::size_t i = 0; i < support.rows(); ++i) {
      const auto x = support.row(i);
      for (std::size_t c = 0; c < k; ++c) {
        const double g = (probs[i * k + c] - (static_cast<int>(c) == support_labels[i] ? 1.0 : 0.0)) / n;
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) grad[j * k + c] += x[j] * g;
      }
    }
    for (std::size_t i = 0; i < d * k; ++i) {
      velocity[i] = cfg.momentum * velocity[i] - cfg.lr * grad[i];
      r.weights[i] += velocity[i];
    }
  }
  r.final_loss = loss_of(r.weights);
  softmax_ce(query, {}, r.weights, ways, r.probabilities);
  r.predictions = argmax_rows(r.probabilities, ways);
  return r;
}

std::string to_string(ClassifierKind k) { return k == ClassifierKind::kLinear ? "linear" : "ncentroid"; }

ClassifierKind parse_classifier(const std::string& s) {
  if (s == "ncentroid") return ClassifierKind::kNearestCentroid;
  if (s == "linear") return ClassifierKind::kLinear;
  throw std::invalid_argument("unknown classifier '" + s + "' (expected ncentroid or linear)");
}

std::vector<double> class_scores(ClassifierKind kind, Embeddings support, std::span<const int> support_labels,
                                 Embeddings query, int ways) {
  if (kind == ClassifierKind::kNearestCentroid) return ncentroid_scores(support, support_labels, query, ways);
  return linear_classify(support, support_labels, query, ways).probabilities;
}

EvalReport EvalReport::aggregate(std::vector<double> task_accuracies) {
  EvalReport r;
  r.n_tasks = static_cast<int>(task_accuracies.size());
  if (r.n_tasks == 0) return r;
  const double n = static_cast<double>(r.n_tasks);
  r.mean_accuracy = std::accumulate(task_accuracies.begin(), task_accuracies.end(), 0.0) / n;
  if (r.n_tasks > 1) {
    double ss = 0.0;
    for (double a : task_accuracies) ss += (a - r.mean_accuracy) * (a - r.mean_accuracy);
    r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  r.task_accuracies = std::move(task_accuracies);
  return r;
}

nlohmann::json EvalReport::to_json() const {
  return {{"mean_accuracy", mean_accuracy}, {"ci95", ci95}, {"n_tasks", n_tasks},
          {"task_accuracies", task_accuracies}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.mean_accuracy = j.at("mean_accuracy").get<double>();
  r.ci95 = j.at("ci95").get<double>();
  r.n_tasks = j.at("n_tasks").get<int>();
  r.task_accuracies = j.at("task_accuracies").get<std::vector<double>>();
  return r;
}

EmbeddingCache::EmbeddingCache(const NetParams& params, const std::vector<ClassSubset>& splits)
    : dim_(params.spec.embedding_dim) {
  for (const auto& split : splits) {
    if (split.data == nullptr) throw std::invalid_argument("split has no dataset");
    auto it = std::find_if(blocks_.begin(), blocks_.end(), [&](const Block& b) { return b.data == split.data; });
    if (it == blocks_.end()) {
      blocks_.push_back({split.data, std::vector<std::int32_t>(split.data->images.count(), -1), {}});
      it = blocks_.end() - 1;
    }
    std::vector<std::size_t> fresh;
    for (int c : split.classes)
      for (auto idx : split.data->examples_of(c))
        if (it->row_of[idx] < 0) fresh.push_back(idx);
    if (fresh.empty()) continue;
    const auto& shape = split.data->images.shape();
    ImageBatch imgs(shape, fresh.size());
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      const auto src = split.data->images.image(fresh[i]);
      std::copy(src.begin(), src.end(), imgs.image(i).begin());
    }
    const auto e = embed(params, imgs);
    const auto base = static_cast<std::int32_t>(it->rows.size() / static_cast<std::size_t>(dim_));
    it->rows.insert(it->rows.end(), e.begin(), e.end());
    for (std::size_t i = 0; i < fresh.size(); ++i) it->row_of[fresh[i]] = base + static_cast<std::int32_t>(i);
  }
}

Embeddings EmbeddingCache::gather(const Dataset* data, std::span<const std::size_t> examples,
                                  std::vector<double>& buffer) const {
  const auto it = std::find_if(blocks_.begin(), blocks_.end(), [&](const Block& b) { return b.data == data; });
  if (it == blocks_.end()) throw std::invalid_argument("dataset not in embedding cache");
  const auto d = static_cast<std::size_t>(dim_);
  buffer.resize(examples.size() * d);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto row = it->row_of.at(examples[i]);
    if (row < 0) throw std::invalid_argument("example not in embedding cache");
    std::copy_n(it->rows.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(row) * d), d,
                buffer.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return {buffer, dim_};
}

Episode episode_for_task(const std::vector<ClassSubset>& splits, const EpisodeSpec& spec, std::uint64_t seed,
                         int task) {
  if (splits.empty()) throw std::invalid_argument("evaluation needs at least one split");
  Rng rng = make_rng(derive_seed(seed, tag_hash("task"), static_cast<std::uint64_t>(task)));
  const auto which = splits.size() == 1
                         ? std::size_t{0}
                         : static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(splits.size()) - 1));
  auto ep = sample_episode(splits[which], spec, rng);
  ep.split_id = static_cast<int>(which);
  return ep;
}

EvalReport evaluate_mixture(const NetParams& params, const std::vector<ClassSubset>& splits, int n_tasks,
                            const EpisodeSpec& spec, ClassifierKind kind, std::uint64_t seed) {
  if (n_tasks < 1) throw std::invalid_argument("n_tasks must be >= 1");
  const EmbeddingCache cache(params, splits);
  std::vector<double> accs;
  accs.reserve(static_cast<std::size_t>(n_tasks));
  std::vector<double> sbuf, qbuf;
  for (int t = 0; t < n_tasks; ++t) {
    const auto ep = episode_for_task(splits, spec, seed, t);
    const auto* data = splits[static_cast<std::size_t>(ep.split_id)].data;
    const auto s = cache.gather(data, ep.support, sbuf);
    const auto q = cache.gather(data, ep.query, qbuf);
    const auto scores = class_scores(kind, s, ep.support_labels, q, ep.ways);
    const auto pred = argmax_rows(scores, ep.ways);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ep.query_labels[i] ? 1 : 0;
    accs.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(pred.size()));
  }
  return EvalReport::aggregate(std::move(accs));
}

EvalReport evaluate(const NetParams& params, const ClassSubset& split, int n_tasks, const EpisodeSpec& spec,
                    ClassifierKind kind, std::uint64_t seed) {
  return evaluate_mixture(params, {split}, n_tasks, spec, kind, seed);
}

}  // namespace fshpo
