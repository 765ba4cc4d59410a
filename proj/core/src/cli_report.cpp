#include "fshpo/cli_report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fshpo {

namespace {

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

std::string executor_mode_name(ExecutorConfig::Mode m) {
  return m == ExecutorConfig::Mode::kMaster ? "master" : "in-process";
}

}  // namespace

// --- run configuration ---------------------------------------------------

void RunConfig::validate() const {
  if (b_min < 1 || b_min > b_max) throw std::invalid_argument("ladder: need 1 <= b_min <= b_max");
  if (eta < 2) throw std::invalid_argument("ladder: eta must be >= 2");
  if (n_sh_iterations < 1) throw std::invalid_argument("n_sh_iterations must be >= 1");
  kde.validate();
  if (domains.empty()) throw std::invalid_argument("domains: at least one domain required");
  for (const auto& [name, src] : domains) {
    if (src.spec.has_value() == src.path.has_value())
      throw std::invalid_argument("domains." + name + ": give either a spec or a path");
    if (src.spec) src.spec->validate();
  }
  auto known = [&](const std::string& field, const std::string& name) {
    if (!domains.count(name)) throw std::invalid_argument(field + ": unknown domain '" + name + "'");
  };
  known("train_domain", train_domain);
  if (validation_domains.empty()) throw std::invalid_argument("validation_domains: at least one domain required");
  if (test_domains.empty()) throw std::invalid_argument("test_domains: at least one domain required");
  for (const auto& d : validation_domains) known("validation_domains", d);
  for (const auto& d : test_domains) known("test_domains", d);
  const double sum = split_fractions[0] + split_fractions[1] + split_fractions[2];
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split_fractions must sum to 1");
  if (n_val_tasks < 1 || n_test_tasks < 1) throw std::invalid_argument("task counts must be >= 1");
  if (executor.n_parallel < 1) throw std::invalid_argument("executor.n_parallel must be >= 1");
  if (executor.heartbeat_ms < 1) throw std::invalid_argument("executor.heartbeat_ms must be >= 1");
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json doms = nlohmann::json::object();
  for (const auto& [name, src] : domains)
    doms[name] = src.spec ? src.spec->to_json() : nlohmann::json{{"path", src.path->string()}};
  return {
      {"space", fshpo::to_string(space)},
      {"ladder", {{"b_min", b_min}, {"b_max", b_max}, {"eta", eta}}},
      {"n_sh_iterations", n_sh_iterations},
      {"model_based", model_based},
      {"kde",
       {{"n_candidates", kde.n_candidates},
        {"bandwidth_factor", kde.bandwidth_factor},
        {"random_fraction", kde.random_fraction},
        {"good_quantile", kde.good_quantile},
        {"min_points_per_model", kde.min_points_per_model}}},
      {"domains", doms},
      {"split_fractions", split_fractions},
      {"train_domain", train_domain},
      {"validation_domains", validation_domains},
      {"test_domains", test_domains},
      {"episodes", episodes.to_json()},
      {"classifier", fshpo::to_string(classifier)},
      {"n_val_tasks", n_val_tasks},
      {"n_test_tasks", n_test_tasks},
      {"baseline_augmentation", baseline_augmentation},
      {"seed", seed},
      {"executor",
       {{"mode", executor_mode_name(executor.mode)},
        {"n_parallel", executor.n_parallel},
        {"host", executor.host},
        {"port", executor.port},
        {"heartbeat_ms", executor.heartbeat_ms}}},
  };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.space = parse_space_variant(j.value("space", std::string("S1")));
    if (j.contains("ladder")) {
      const auto& l = j["ladder"];
      c.b_min = l.value("b_min", c.b_min);
      c.b_max = l.value("b_max", c.b_max);
      c.eta = l.value("eta", c.eta);
    }
    c.n_sh_iterations = j.value("n_sh_iterations", c.n_sh_iterations);
    c.model_based = j.value("model_based", c.model_based);
    if (j.contains("kde")) {
      const auto& k = j["kde"];
      c.kde.n_candidates = k.value("n_candidates", c.kde.n_candidates);
      c.kde.bandwidth_factor = k.value("bandwidth_factor", c.kde.bandwidth_factor);
      c.kde.random_fraction = k.value("random_fraction", c.kde.random_fraction);
      c.kde.good_quantile = k.value("good_quantile", c.kde.good_quantile);
      c.kde.min_points_per_model = k.value("min_points_per_model", c.kde.min_points_per_model);
    }
    for (const auto& [name, d] : j.at("domains").items()) {
      DomainSource src;
      if (d.contains("path") && d.size() > 1)
        throw std::invalid_argument("domains." + name + ": give either a spec or a path");
      if (d.contains("path"))
        src.path = d["path"].get<std::string>();
      else
        src.spec = DomainSpec::from_json(d);
      c.domains[name] = src;
    }
    if (j.contains("split_fractions")) c.split_fractions = j["split_fractions"].get<std::array<double, 3>>();
    c.train_domain = j.at("train_domain").get<std::string>();
    c.validation_domains = j.at("validation_domains").get<std::vector<std::string>>();
    c.test_domains = j.value("test_domains", c.validation_domains);
    if (j.contains("episodes")) c.episodes = EpisodeSpec::from_json(j["episodes"]);
    c.classifier = parse_classifier(j.value("classifier", std::string("ncentroid")));
    c.n_val_tasks = j.value("n_val_tasks", c.n_val_tasks);
    c.n_test_tasks = j.value("n_test_tasks", c.n_test_tasks);
    c.baseline_augmentation = j.value("baseline_augmentation", c.baseline_augmentation);
    c.seed = j.value("seed", c.seed);
    if (j.contains("executor")) {
      const auto& e = j["executor"];
      const auto mode = e.value("mode", std::string("in-process"));
      if (mode == "in-process")
        c.executor.mode = ExecutorConfig::Mode::kInProcess;
      else if (mode == "master")
        c.executor.mode = ExecutorConfig::Mode::kMaster;
      else
        throw std::invalid_argument("executor.mode: unknown mode '" + mode + "'");
      c.executor.n_parallel = e.value("n_parallel", c.executor.n_parallel);
      c.executor.host = e.value("host", c.executor.host);
      c.executor.port = e.value("port", c.executor.port);
      c.executor.heartbeat_ms = e.value("heartbeat_ms", c.executor.heartbeat_ms);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  auto c = from_json(read_json(path));
  for (auto& [name, src] : c.domains)
    if (src.path && src.path->is_relative()) src.path = path.parent_path() / *src.path;
  return c;
}

SchedulerOptions RunConfig::scheduler_options() const {
  SchedulerOptions o;
  o.b_min = b_min;
  o.b_max = b_max;
  o.eta = eta;
  o.n_iterations = n_sh_iterations;
  o.kde = kde;
  o.seed = seed;
  o.model_based = model_based;
  return o;
}

std::uint64_t RunConfig::split_seed() const { return derive_seed(seed, tag_hash("split")); }
std::uint64_t RunConfig::val_seed() const { return derive_seed(seed, tag_hash("val")); }
std::uint64_t RunConfig::test_seed() const { return derive_seed(seed, tag_hash("test")); }

// --- experiment ----------------------------------------------------------

Experiment::Experiment(RunConfig config) : config_(std::move(config)) {
  config_.validate();
  int n_classes = -1;
  for (const auto& [name, src] : config_.domains) {
    auto data = std::make_unique<Dataset>(src.spec ? make_domain(*src.spec) : Dataset::load(*src.path));
    if (n_classes >= 0 && data->spec.n_classes != n_classes)
      throw std::invalid_argument("domains must have the same number of classes ('" + name + "' has " +
                                  std::to_string(data->spec.n_classes) + ")");
    n_classes = data->spec.n_classes;
    data_[name] = std::move(data);
  }
  const auto& shape = data_.at(config_.train_domain)->images.shape();
  for (const auto& [name, d] : data_)
    if (!(d->images.shape() == shape))
      throw std::invalid_argument("domain '" + name + "' has a different image shape than the train domain");
  split_ = split_classes(n_classes, config_.split_fractions, config_.split_seed());
}

const Dataset& Experiment::domain(const std::string& name) const {
  const auto it = data_.find(name);
  if (it == data_.end()) throw std::invalid_argument("unknown domain '" + name + "'");
  return *it->second;
}

std::map<std::string, std::uint32_t> Experiment::dataset_hashes() const {
  std::map<std::string, std::uint32_t> out;
  for (const auto& [name, d] : data_) out[name] = d->content_hash();
  return out;
}

std::vector<ClassSubset> Experiment::subsets(const std::vector<std::string>& domains, SplitKind kind) const {
  const auto& classes = kind == SplitKind::kTrain ? split_.train : kind == SplitKind::kVal ? split_.val : split_.test;
  std::vector<ClassSubset> out;
  for (std::size_t i = 0; i < domains.size(); ++i) out.push_back({&domain(domains[i]), classes, static_cast<int>(i)});
  return out;
}

NetSpec Experiment::net_spec() const {
  NetSpec spec;
  spec.input = domain(config_.train_domain).images.shape();
  spec.n_classes = static_cast<int>(split_.train.size());
  return spec;
}

FewShotSetup Experiment::objective_setup() const {
  FewShotSetup s;
  s.space = define_space(config_.space);
  s.train = make_train_split(domain(config_.train_domain), split_.train);
  s.net = net_spec();
  s.validation = subsets(config_.validation_domains, SplitKind::kVal);
  s.episodes = config_.episodes;
  s.classifier = config_.classifier;
  s.n_val_tasks = config_.n_val_tasks;
  s.val_seed = config_.val_seed();
  s.baseline_augmentation = config_.baseline_augmentation;
  return s;
}

nlohmann::json Experiment::run_header() const {
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& [name, h] : dataset_hashes()) hashes[name] = h;
  return {{"run_config", config_.to_json()},
          {"space", to_string(config_.space)},
          {"scheduler", config_.scheduler_options().to_json()},
          {"split", split_.to_json()},
          {"dataset_hashes", hashes}};
}

// --- run / resume --------------------------------------------------------

nlohmann::json RunSummary::to_json() const {
  nlohmann::json j = {{"best_trial", nullptr},
                      {"best_config", best_config},
                      {"best_val_accuracy", best_val_accuracy},
                      {"test", nullptr},
                      {"n_trials", n_trials},
                      {"completed", completed}};
  if (best_trial) j["best_trial"] = *best_trial;
  if (test) j["test"] = test->to_json();
  return j;
}

RunSummary RunSummary::from_json(const nlohmann::json& j) {
  RunSummary s;
  if (!j.at("best_trial").is_null()) s.best_trial = j["best_trial"].get<std::int64_t>();
  s.best_config = j.at("best_config");
  s.best_val_accuracy = j.at("best_val_accuracy").get<double>();
  if (!j.at("test").is_null()) s.test = EvalReport::from_json(j["test"]);
  s.n_trials = j.at("n_trials").get<std::size_t>();
  s.completed = j.at("completed").get<bool>();
  return s;
}

namespace {

void drive_configured(const RunConfig& config, BohbScheduler& sched, const Objective& objective) {
  if (config.executor.mode == ExecutorConfig::Mode::kInProcess) {
    InProcessExecutor(config.executor.n_parallel).drive(sched, objective);
    return;
  }
  MasterOptions mo;
  mo.host = config.executor.host;
  mo.port = config.executor.port;
  mo.heartbeat_interval = std::chrono::milliseconds(config.executor.heartbeat_ms);
  serve_master(sched, mo, [](int port) { std::cerr << "master listening on port " << port << "\n"; });
}

RunSummary finish_run(const Experiment& exp, const BohbScheduler& sched, const CheckpointStore& store,
                      const RunPaths& paths) {
  RunSummary s;
  s.n_trials = sched.trials().size();
  s.completed = sched.finished();
  if (const auto best = sched.best()) {
    s.best_trial = best->id;
    s.best_config = best->config.to_json();
    s.best_val_accuracy = *best->val_accuracy;
    const auto state = store.get(best->id);
    if (!state) throw std::runtime_error("missing checkpoint of best trial " + std::to_string(best->id));
    state->save(paths.best_checkpoint());
    const auto& cfg = exp.config();
    s.test = cmd_eval(*state, exp.subsets(cfg.test_domains, SplitKind::kTest), cfg.classifier, cfg.n_test_tasks,
                      cfg.episodes, cfg.test_seed());
  }
  write_json(paths.summary(), s.to_json());
  return s;
}

}  // namespace

RunSummary cmd_run(const RunConfig& config, const std::filesystem::path& out_dir) {
  const RunPaths paths{out_dir};
  std::filesystem::create_directories(out_dir);
  write_json(paths.config(), config.to_json());
  const Experiment exp(config);
  auto store = std::make_shared<DirectoryCheckpointStore>(paths.checkpoints());
  const FewShotObjective objective(exp.objective_setup(), store);
  const Objective fn = [&objective](const JobSpec& j) { return objective(j); };

  RunLedger ledger;
  ledger.attach_file(paths.ledger(), true);
  ledger.append(EventType::kHeader, exp.run_header());
  BohbScheduler sched(define_space(config.space), config.scheduler_options());
  sched.set_ledger(&ledger);
  drive_configured(config, sched, fn);
  return finish_run(exp, sched, *store, paths);
}

RunSummary cmd_resume(const std::filesystem::path& out_dir) {
  const RunPaths paths{out_dir};
  const auto config = RunConfig::load(paths.config());
  auto ledger = RunLedger::load(paths.ledger());
  const auto header = ledger.header();
  if (!header) throw std::runtime_error(paths.ledger().string() + ": no run header");
  const Experiment exp(config);
  if (header->at("run_config") != config.to_json())
    throw std::runtime_error("ledger header does not match " + paths.config().string());
  if (header->at("dataset_hashes") != exp.run_header().at("dataset_hashes"))
    throw std::runtime_error("datasets differ from the ones recorded in the ledger header");
  // Rewrite rather than append so a torn last line does not survive.
  ledger.attach_file(paths.ledger(), true);

  auto store = std::make_shared<DirectoryCheckpointStore>(paths.checkpoints());
  const FewShotObjective objective(exp.objective_setup(), store);
  const Objective fn = [&objective](const JobSpec& j) { return objective(j); };
  BohbScheduler sched(define_space(config.space), config.scheduler_options());
  replay(sched, ledger);
  drive_configured(config, sched, fn);
  return finish_run(exp, sched, *store, paths);
}

EvalReport cmd_eval(const TrainState& checkpoint, const std::vector<ClassSubset>& subsets, ClassifierKind kind,
                    int n_tasks, const EpisodeSpec& spec, std::uint64_t seed) {
  for (const auto& s : subsets)
    if (!(s.data->images.shape() == checkpoint.extractor.params.spec.input))
      throw std::invalid_argument("checkpoint input shape does not match the dataset");
  return evaluate_mixture(checkpoint.extractor.params, subsets, n_tasks, spec, kind, seed);
}

// --- ensembles -----------------------------------------------------------

std::vector<LedgerTrial> top_trials(const std::vector<LedgerTrial>& trials, std::int64_t b_max, std::size_t n) {
  std::vector<LedgerTrial> done;
  for (const auto& t : trials)
    if (t.finished && t.budget == b_max) done.push_back(t);
  std::sort(done.begin(), done.end(), [](const LedgerTrial& a, const LedgerTrial& b) {
    if (a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
    return a.id < b.id;
  });
  if (done.size() > n) done.resize(n);
  return done;
}

EvalReport evaluate_ensemble(const std::vector<const NetParams*>& members, const std::vector<ClassSubset>& subsets,
                             int n_tasks, const EpisodeSpec& spec, ClassifierKind kind, std::uint64_t seed) {
  if (members.empty()) throw std::invalid_argument("ensemble needs at least one member");
  if (n_tasks < 1) throw std::invalid_argument("n_tasks must be >= 1");
  std::vector<EmbeddingCache> caches;
  caches.reserve(members.size());
  for (const auto* m : members) caches.emplace_back(*m, subsets);

  std::vector<double> accs;
  std::vector<double> sbuf, qbuf, total;
  for (int t = 0; t < n_tasks; ++t) {
    const auto ep = episode_for_task(subsets, spec, seed, t);
    const auto* data = subsets[static_cast<std::size_t>(ep.split_id)].data;
    total.assign(ep.query.size() * static_cast<std::size_t>(ep.ways), 0.0);
    for (const auto& cache : caches) {
      const auto s = cache.gather(data, ep.support, sbuf);
      const auto q = cache.gather(data, ep.query, qbuf);
      const auto scores = class_scores(kind, s, ep.support_labels, q, ep.ways);
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += scores[i];
    }
    const auto pred = argmax_rows(total, ep.ways);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ep.query_labels[i] ? 1 : 0;
    accs.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(pred.size()));
  }
  return EvalReport::aggregate(std::move(accs));
}

nlohmann::json EnsembleResult::to_json() const {
  return {{"members", members}, {"ensemble", ensemble.to_json()}, {"best_single", best_single.to_json()}};
}

EnsembleResult cmd_ensemble(const RunLedger& ledger, const CheckpointStore& store, std::int64_t b_max,
                            std::size_t top_n, const std::vector<ClassSubset>& subsets, ClassifierKind kind,
                            int n_tasks, const EpisodeSpec& spec, std::uint64_t seed) {
  if (top_n < 1) throw std::invalid_argument("top_n must be >= 1");
  const auto top = top_trials(ledger.trials(), b_max, top_n);
  if (top.size() < top_n)
    throw std::invalid_argument("ledger has " + std::to_string(top.size()) + " finished b_max trials, need " +
                                std::to_string(top_n));
  std::vector<TrainState> states;
  std::vector<std::int64_t> missing;
  EnsembleResult r;
  for (const auto& t : top) {
    r.members.push_back(t.id);
    if (auto st = store.get(t.id))
      states.push_back(std::move(*st));
    else
      missing.push_back(t.id);
  }
  if (!missing.empty()) {
    std::string ids;
    for (auto id : missing) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
    throw std::runtime_error("missing checkpoints for trials " + ids);
  }
  std::vector<const NetParams*> params;
  for (const auto& st : states) params.push_back(&st.extractor.params);
  r.ensemble = evaluate_ensemble(params, subsets, n_tasks, spec, kind, seed);
  r.best_single = evaluate_mixture(*params.front(), subsets, n_tasks, spec, kind, seed);
  return r;
}

EnsembleResult cmd_ensemble_retrain(const RunLedger& ledger, const FewShotObjective& objective,
                                    std::int64_t b_max, std::size_t n, const std::vector<ClassSubset>& subsets,
                                    int n_tasks, const EpisodeSpec& spec, ClassifierKind kind, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("retrain count must be >= 1");
  const auto top = top_trials(ledger.trials(), b_max, 1);
  if (top.empty()) throw std::invalid_argument("ledger has no finished b_max trial");
  const auto config = Configuration::from_json(top.front().config);
  EnsembleResult r;
  std::vector<TrainState> states;
  for (std::size_t i = 0; i < n; ++i) {
    JobSpec job;
    job.trial_id = -1;
    job.config = config;
    job.budget = b_max;
    job.seed = derive_seed(seed, tag_hash("retrain"), i);
    states.push_back(objective.train_job(job));
    r.members.push_back(top.front().id);
  }
  std::vector<const NetParams*> params;
  for (const auto& st : states) params.push_back(&st.extractor.params);
  r.ensemble = evaluate_ensemble(params, subsets, n_tasks, spec, kind, seed);
  r.best_single = evaluate_mixture(*params.front(), subsets, n_tasks, spec, kind, seed);
  return r;
}

// --- CSV reports ---------------------------------------------------------

namespace {

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string raw_value(const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

}  // namespace

std::string CsvTable::to_csv() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out.push_back(',');
      out += csv_cell(cells[i]);
    }
    out.push_back('\n');
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

CsvTable CsvTable::parse(const std::string& text) {
  std::vector<std::vector<std::string>> lines;
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cell.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell.push_back(c);
      }
      continue;
    }
    any = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(cell));
      cell.clear();
    } else if (c == '\n') {
      row.push_back(std::move(cell));
      cell.clear();
      lines.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  if (quoted) throw std::invalid_argument("csv: unterminated quoted cell");
  if (any) {
    row.push_back(std::move(cell));
    lines.push_back(std::move(row));
  }
  if (lines.empty()) throw std::invalid_argument("csv: missing header");
  CsvTable t;
  t.header = std::move(lines.front());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].size() != t.header.size())
      throw std::invalid_argument("csv: row " + std::to_string(i) + " has " + std::to_string(lines[i].size()) +
                                  " cells, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(lines[i]));
  }
  return t;
}

CsvTable cmd_pcp(const std::vector<LedgerTrial>& trials, double window) {
  if (!(window >= 0.0)) throw std::invalid_argument("pcp window must be >= 0");
  std::vector<const LedgerTrial*> done;
  for (const auto& t : trials)
    if (t.finished) done.push_back(&t);
  CsvTable table;
  table.header.push_back("val_accuracy");
  std::set<std::string> keys;
  for (const auto* t : done)
    for (const auto& [k, v] : t->config.items()) keys.insert(k);
  table.header.insert(table.header.end(), keys.begin(), keys.end());
  if (done.empty()) return table;

  double vmax = done.front()->val_accuracy;
  for (const auto* t : done) vmax = std::max(vmax, t->val_accuracy);
  std::vector<const LedgerTrial*> kept;
  for (const auto* t : done)
    if (t->val_accuracy > vmax - window && t->val_accuracy <= vmax) kept.push_back(t);
  std::stable_sort(kept.begin(), kept.end(), [](const LedgerTrial* a, const LedgerTrial* b) {
    if (a->val_accuracy != b->val_accuracy) return a->val_accuracy > b->val_accuracy;
    return a->id < b->id;
  });
  for (const auto* t : kept) {
    std::vector<std::string> row{nlohmann::json(t->val_accuracy).dump()};
    for (const auto& k : keys) row.push_back(t->config.contains(k) ? raw_value(t->config[k]) : "");
    table.rows.push_back(std::move(row));
  }
  return table;
}

CsvTable cmd_nops_scatter(const std::vector<LedgerTrial>& trials, SpaceVariant space) {
  if (space == SpaceVariant::kCustom || !define_space(space).has_param(param_names::kNops))
    throw std::invalid_argument("nops-scatter needs a ledger from a space that searches n_ops (got " +
                                to_string(space) + ")");
  CsvTable table;
  table.header = {param_names::kNops, "val_accuracy"};
  for (const auto& t : trials) {
    if (!t.finished) continue;
    table.rows.push_back({raw_value(t.config.at(param_names::kNops)), nlohmann::json(t.val_accuracy).dump()});
  }
  return table;
}

// --- sensitivity ---------------------------------------------------------

std::string to_string(FrozenSubset s) {
  switch (s) {
    case FrozenSubset::kOptimization: return "optimization";
    case FrozenSubset::kOptimizationNops: return "optimization+nops";
    case FrozenSubset::kAugmentation: return "augmentation";
    case FrozenSubset::kAugmentationNops: return "augmentation+nops";
    case FrozenSubset::kAll: return "all";
  }
  return "?";
}

FrozenSubset parse_frozen_subset(const std::string& s) {
  for (auto f : {FrozenSubset::kOptimization, FrozenSubset::kOptimizationNops, FrozenSubset::kAugmentation,
                 FrozenSubset::kAugmentationNops, FrozenSubset::kAll})
    if (to_string(f) == s) return f;
  throw std::invalid_argument("unknown frozen subset '" + s +
                              "' (expected optimization, optimization+nops, augmentation, augmentation+nops, all)");
}

Configuration randomize_complement(const SearchSpace& space, const Configuration& reference, FrozenSubset frozen,
                                   Rng& rng) {
  space.validate(reference);
  const auto& opt_names = optimization_param_names();
  auto frozen_param = [&](const std::string& name) {
    const bool is_opt = std::find(opt_names.begin(), opt_names.end(), name) != opt_names.end();
    const bool is_nops = name == param_names::kNops;
    const bool is_aug = !is_opt && !is_nops;
    switch (frozen) {
      case FrozenSubset::kOptimization: return is_opt;
      case FrozenSubset::kOptimizationNops: return is_opt || is_nops;
      case FrozenSubset::kAugmentation: return is_aug;
      case FrozenSubset::kAugmentationNops: return is_aug || is_nops;
      case FrozenSubset::kAll: return true;
    }
    return true;
  };
  const auto draw = space.sample_uniform(rng);
  Configuration out = reference;
  for (const auto& p : space.params())
    if (!frozen_param(p.name)) out.values[p.name] = draw.values.at(p.name);
  return out;
}

nlohmann::json SensitivityReport::to_json() const {
  return {{"frozen", to_string(frozen)}, {"accuracies", accuracies}, {"configs", configs},
          {"mean", mean},                {"sd", sd},                 {"min", min},
          {"max", max}};
}

SensitivityReport cmd_sensitivity(const FewShotObjective& objective, const Configuration& reference,
                                  FrozenSubset frozen, int n_models, std::int64_t budget, std::uint64_t seed) {
  if (n_models < 1) throw std::invalid_argument("n_models must be >= 1");
  const auto& space = objective.setup().space;
  Rng rng = make_rng(derive_seed(seed, tag_hash("sensitivity"), tag_hash(to_string(frozen))));
  SensitivityReport r;
  r.frozen = frozen;
  for (int i = 0; i < n_models; ++i) {
    const auto config = randomize_complement(space, reference, frozen, rng);
    JobSpec job;
    job.trial_id = i;
    job.config = config;
    job.budget = budget;
    job.seed = derive_seed(seed, tag_hash("model"), static_cast<std::uint64_t>(i));
    const auto st = objective.train_job(job);
    r.accuracies.push_back(st.diverged ? 0.0 : objective.validate(st.extractor.params));
    r.configs.push_back(config.to_json());
  }
  const auto n = static_cast<double>(r.accuracies.size());
  r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
  double ss = 0.0;
  for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
  r.sd = r.accuracies.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  const auto [lo, hi] = std::minmax_element(r.accuracies.begin(), r.accuracies.end());
  r.min = *lo;
  r.max = *hi;
  return r;
}

}  // namespace fshpo
