#include "fshpo/hpspace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <stdexcept>

#include "fshpo/checksum.hpp"

namespace fshpo {

std::string to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::kCategorical: return "categorical";
    case ParamKind::kLogUniform: return "log-uniform";
    case ParamKind::kUniform: return "uniform";
    case ParamKind::kSteppedInt: return "stepped-integer";
    case ParamKind::kIntRange: return "integer-range";
  }
  return "?";
}

ParamDescriptor ParamDescriptor::categorical(std::string name,
                                             std::vector<std::string> choices) {
  ParamDescriptor d;
  d.name = std::move(name);
  d.kind = ParamKind::kCategorical;
  d.choices = std::move(choices);
  d.validate();
  return d;
}

ParamDescriptor ParamDescriptor::log_uniform(std::string name, double lo,
                                             double hi) {
  ParamDescriptor d;
  d.name = std::move(name);
  d.kind = ParamKind::kLogUniform;
  d.lo = lo;
  d.hi = hi;
  d.validate();
  return d;
}

ParamDescriptor ParamDescriptor::uniform(std::string name, double lo, double hi) {
  ParamDescriptor d;
  d.name = std::move(name);
  d.kind = ParamKind::kUniform;
  d.lo = lo;
  d.hi = hi;
  d.validate();
  return d;
}

ParamDescriptor ParamDescriptor::stepped(std::string name, std::int64_t lo,
                                         std::int64_t hi, std::int64_t step) {
  if (step <= 0) throw std::invalid_argument(name + ": step must be positive");
  std::vector<std::int64_t> values;
  for (std::int64_t v = lo; v <= hi; v += step) values.push_back(v);
  auto d = int_choices(std::move(name), std::move(values));
  d.step = step;
  return d;
}

ParamDescriptor ParamDescriptor::int_choices(std::string name,
                                             std::vector<std::int64_t> values) {
  ParamDescriptor d;
  d.name = std::move(name);
  d.kind = ParamKind::kSteppedInt;
  d.int_values = std::move(values);
  if (!d.int_values.empty()) {
    d.lo = static_cast<double>(d.int_values.front());
    d.hi = static_cast<double>(d.int_values.back());
  }
  d.validate();
  return d;
}

ParamDescriptor ParamDescriptor::int_range(std::string name, std::int64_t lo,
                                           std::int64_t hi) {
  ParamDescriptor d;
  d.name = std::move(name);
  d.kind = ParamKind::kIntRange;
  d.lo = static_cast<double>(lo);
  d.hi = static_cast<double>(hi);
  d.validate();
  return d;
}

void ParamDescriptor::validate() const {
  if (name.empty()) throw std::invalid_argument("parameter with empty name");
  switch (kind) {
    case ParamKind::kCategorical: {
      if (choices.empty())
        throw std::invalid_argument(name + ": categorical domain is empty");
      std::set<std::string> seen(choices.begin(), choices.end());
      if (seen.size() != choices.size())
        throw std::invalid_argument(name + ": duplicate categorical choice");
      break;
    }
    case ParamKind::kLogUniform:
      if (!(lo > 0.0))
        throw std::invalid_argument(name + ": log-uniform lower bound must be > 0");
      [[fallthrough]];
    case ParamKind::kUniform:
    case ParamKind::kIntRange:
      if (!(lo < hi)) throw std::invalid_argument(name + ": requires lo < hi");
      break;
    case ParamKind::kSteppedInt:
      if (int_values.size() < 2)
        throw std::invalid_argument(name + ": stepped domain needs >= 2 values");
      if (!std::is_sorted(int_values.begin(), int_values.end()) ||
          std::adjacent_find(int_values.begin(), int_values.end()) !=
              int_values.end())
        throw std::invalid_argument(name + ": stepped values must ascend strictly");
      break;
  }
}

std::size_t ParamDescriptor::n_bins() const {
  switch (kind) {
    case ParamKind::kCategorical: return choices.size();
    case ParamKind::kSteppedInt: return int_values.size();
    case ParamKind::kIntRange:
      return static_cast<std::size_t>(std::llround(hi - lo)) + 1;
    default: return 0;
  }
}

std::string to_string(SpaceVariant v) {
  switch (v) {
    case SpaceVariant::kS1: return "S1";
    case SpaceVariant::kS2Full: return "S2-full";
    case SpaceVariant::kS2SharedSigma: return "S2-shared-sigma";
    case SpaceVariant::kS2FixedNopsRandomSigma: return "S2-fixed-nops-random-sigma";
    case SpaceVariant::kCustom: return "custom";
  }
  return "?";
}

SpaceVariant parse_space_variant(const std::string& name) {
  for (auto v : {SpaceVariant::kS1, SpaceVariant::kS2Full,
                 SpaceVariant::kS2SharedSigma,
                 SpaceVariant::kS2FixedNopsRandomSigma}) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument(
      "unknown search space variant '" + name +
      "' (expected S1, S2-full, S2-shared-sigma or S2-fixed-nops-random-sigma)");
}

const std::vector<std::string>& optimization_param_names() {
  static const std::vector<std::string> names = {
      param_names::kOptimizer, param_names::kLearningRate, param_names::kL2,
      param_names::kDecayEvery, param_names::kBatchSize};
  return names;
}

std::string sigma_param_name(std::size_t op_index) {
  return std::string("sigma_") + kAugOpNames.at(op_index);
}

double canonical_real(double x) {
  if (!std::isfinite(x) || x == 0.0) return x;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9e", x);
  return std::strtod(buf, nullptr);
}

namespace {

std::vector<ParamDescriptor> optimization_params() {
  return {
      ParamDescriptor::categorical(param_names::kOptimizer, {"SGD", "ADAM"}),
      ParamDescriptor::log_uniform(param_names::kLearningRate, 1e-4, 0.05),
      ParamDescriptor::log_uniform(param_names::kL2, 1e-5, 5e-3),
      ParamDescriptor::stepped(param_names::kDecayEvery, 100, 100000, 100),
      ParamDescriptor::int_choices(param_names::kBatchSize, {4, 8, 16, 32, 64}),
  };
}

std::size_t bin_of(double u, std::size_t n) {
  const auto b = static_cast<std::size_t>(std::floor(u * static_cast<double>(n)));
  return std::min(b, n - 1);
}

double bin_center(std::size_t index, std::size_t n) {
  return (static_cast<double>(index) + 0.5) / static_cast<double>(n);
}

}  // namespace

SearchSpace define_space(SpaceVariant variant) {
  auto params = optimization_params();
  switch (variant) {
    case SpaceVariant::kS1:
    case SpaceVariant::kS2FixedNopsRandomSigma:
      break;
    case SpaceVariant::kS2Full:
      params.push_back(ParamDescriptor::int_range(param_names::kNops, 1, 10));
      for (std::size_t i = 0; i < kAugOpNames.size(); ++i)
        params.push_back(ParamDescriptor::uniform(sigma_param_name(i), 1.0, 25.0));
      break;
    case SpaceVariant::kS2SharedSigma:
      params.push_back(ParamDescriptor::int_range(param_names::kNops, 1, 10));
      params.push_back(
          ParamDescriptor::uniform(param_names::kSigmaCommon, 1.0, 25.0));
      break;
    case SpaceVariant::kCustom:
      throw std::invalid_argument("custom spaces are built from descriptors");
  }
  return SearchSpace(variant, std::move(params));
}

SearchSpace define_space(const std::string& variant_name) {
  return define_space(parse_space_variant(variant_name));
}

SearchSpace::SearchSpace(SpaceVariant variant, std::vector<ParamDescriptor> params)
    : variant_(variant), params_(std::move(params)) {
  if (params_.empty()) throw std::invalid_argument("search space has no parameters");
  std::set<std::string> names;
  for (const auto& p : params_) {
    p.validate();
    if (!names.insert(p.name).second)
      throw std::invalid_argument("duplicate parameter name '" + p.name + "'");
  }
}

std::size_t SearchSpace::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw std::out_of_range("no parameter named '" + name + "'");
}

const ParamDescriptor& SearchSpace::param(const std::string& name) const {
  return params_[index_of(name)];
}

bool SearchSpace::has_param(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const ParamDescriptor& p) { return p.name == name; });
}

Configuration SearchSpace::sample_uniform(Rng& rng) const {
  Configuration c;
  for (const auto& p : params_) {
    switch (p.kind) {
      case ParamKind::kCategorical: {
        const auto i = uniform_int(rng, 0, static_cast<std::int64_t>(p.choices.size()) - 1);
        c.values[p.name] = p.choices[static_cast<std::size_t>(i)];
        break;
      }
      case ParamKind::kLogUniform: {
        const double u = uniform01(rng);
        const double x = std::exp(std::log(p.lo) + u * (std::log(p.hi) - std::log(p.lo)));
        c.values[p.name] = std::clamp(canonical_real(x), p.lo, p.hi);
        break;
      }
      case ParamKind::kUniform: {
        const double u = uniform01(rng);
        c.values[p.name] = std::clamp(canonical_real(p.lo + u * (p.hi - p.lo)), p.lo, p.hi);
        break;
      }
      case ParamKind::kSteppedInt: {
        const auto i = uniform_int(rng, 0, static_cast<std::int64_t>(p.int_values.size()) - 1);
        c.values[p.name] = p.int_values[static_cast<std::size_t>(i)];
        break;
      }
      case ParamKind::kIntRange:
        c.values[p.name] = uniform_int(rng, std::llround(p.lo), std::llround(p.hi));
        break;
    }
  }
  return c;
}

UnitPoint SearchSpace::encode(const Configuration& config) const {
  validate(config);
  UnitPoint point;
  point.coords.reserve(params_.size());
  for (const auto& p : params_) {
    const auto& v = config.values.at(p.name);
    double u = 0.0;
    switch (p.kind) {
      case ParamKind::kCategorical: {
        const auto& s = std::get<std::string>(v);
        const auto it = std::find(p.choices.begin(), p.choices.end(), s);
        u = bin_center(static_cast<std::size_t>(it - p.choices.begin()), p.n_bins());
        break;
      }
      case ParamKind::kLogUniform: {
        const double x = std::get<double>(v);
        u = (std::log(x) - std::log(p.lo)) / (std::log(p.hi) - std::log(p.lo));
        break;
      }
      case ParamKind::kUniform:
        u = (std::get<double>(v) - p.lo) / (p.hi - p.lo);
        break;
      case ParamKind::kSteppedInt: {
        const auto x = std::get<std::int64_t>(v);
        const auto it = std::lower_bound(p.int_values.begin(), p.int_values.end(), x);
        u = bin_center(static_cast<std::size_t>(it - p.int_values.begin()), p.n_bins());
        break;
      }
      case ParamKind::kIntRange: {
        const auto x = std::get<std::int64_t>(v);
        u = bin_center(static_cast<std::size_t>(x - std::llround(p.lo)), p.n_bins());
        break;
      }
    }
    point.coords.push_back(std::clamp(u, 0.0, 1.0));
  }
  return point;
}

Configuration SearchSpace::decode(const UnitPoint& point) const {
  if (point.dim() != params_.size())
    throw std::invalid_argument("unit point has dimension " +
                                std::to_string(point.dim()) + ", space has " +
                                std::to_string(params_.size()));
  Configuration c;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    const double u = point.coords[i];
    if (!(u >= 0.0 && u <= 1.0))
      throw std::invalid_argument("coordinate " + std::to_string(i) + " (" + p.name +
                                  ") outside [0,1]");
    switch (p.kind) {
      case ParamKind::kCategorical:
        c.values[p.name] = p.choices[bin_of(u, p.n_bins())];
        break;
      case ParamKind::kLogUniform: {
        const double x = std::exp(std::log(p.lo) + u * (std::log(p.hi) - std::log(p.lo)));
        c.values[p.name] = std::clamp(canonical_real(x), p.lo, p.hi);
        break;
      }
      case ParamKind::kUniform:
        c.values[p.name] = std::clamp(canonical_real(p.lo + u * (p.hi - p.lo)), p.lo, p.hi);
        break;
      case ParamKind::kSteppedInt:
        c.values[p.name] = p.int_values[bin_of(u, p.n_bins())];
        break;
      case ParamKind::kIntRange:
        c.values[p.name] =
            std::llround(p.lo) + static_cast<std::int64_t>(bin_of(u, p.n_bins()));
        break;
    }
  }
  return c;
}

void SearchSpace::validate(const Configuration& config) const {
  if (config.values.size() != params_.size())
    throw std::invalid_argument("configuration has " +
                                std::to_string(config.values.size()) +
                                " values, space has " + std::to_string(params_.size()));
  for (const auto& p : params_) {
    const auto it = config.values.find(p.name);
    if (it == config.values.end())
      throw std::invalid_argument("configuration is missing '" + p.name + "'");
    const auto& v = it->second;
    bool ok = false;
    switch (p.kind) {
      case ParamKind::kCategorical:
        ok = std::holds_alternative<std::string>(v) &&
             std::find(p.choices.begin(), p.choices.end(), std::get<std::string>(v)) !=
                 p.choices.end();
        break;
      case ParamKind::kLogUniform:
      case ParamKind::kUniform:
        ok = std::holds_alternative<double>(v) && std::get<double>(v) >= p.lo &&
             std::get<double>(v) <= p.hi;
        break;
      case ParamKind::kSteppedInt:
        ok = std::holds_alternative<std::int64_t>(v) &&
             std::binary_search(p.int_values.begin(), p.int_values.end(),
                                std::get<std::int64_t>(v));
        break;
      case ParamKind::kIntRange:
        ok = std::holds_alternative<std::int64_t>(v) &&
             std::get<std::int64_t>(v) >= std::llround(p.lo) &&
             std::get<std::int64_t>(v) <= std::llround(p.hi);
        break;
    }
    if (!ok) throw std::invalid_argument("value of '" + p.name + "' outside its domain");
  }
}

double Configuration::real(const std::string& name) const {
  const auto& v = values.at(name);
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  throw std::invalid_argument("'" + name + "' is not numeric");
}

std::int64_t Configuration::integer(const std::string& name) const {
  const auto& v = values.at(name);
  if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
  throw std::invalid_argument("'" + name + "' is not an integer");
}

const std::string& Configuration::category(const std::string& name) const {
  const auto& v = values.at(name);
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  throw std::invalid_argument("'" + name + "' is not categorical");
}

nlohmann::json Configuration::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values)
    std::visit([&](const auto& x) { j[k] = x; }, v);
  return j;
}

Configuration Configuration::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("configuration JSON must be an object");
  Configuration c;
  for (const auto& [k, v] : j.items()) {
    if (v.is_string()) {
      c.values[k] = v.get<std::string>();
    } else if (v.is_number_integer()) {
      c.values[k] = v.get<std::int64_t>();
    } else if (v.is_number_float()) {
      c.values[k] = v.get<double>();
    } else {
      throw std::invalid_argument("configuration value '" + k + "' has unsupported type");
    }
  }
  return c;
}

std::string Configuration::canonical_string() const { return to_json().dump(); }

std::uint32_t Configuration::checksum() const { return crc32(canonical_string()); }

}  // namespace fshpo
