#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "fshpo/random.hpp"

namespace fshpo {

enum class ParamKind {
  kCategorical,
  kLogUniform,
  kUniform,
  kSteppedInt,
  kIntRange,
};

std::string to_string(ParamKind kind);

struct ParamDescriptor {
  std::string name;
  ParamKind kind = ParamKind::kUniform;
  std::vector<std::string> choices;  // categorical only
  double lo = 0.0;                   // ranged kinds
  double hi = 1.0;
  std::int64_t step = 1;             // stepped only
  std::vector<std::int64_t> int_values;  // stepped grid, ascending

  static ParamDescriptor categorical(std::string name,
                                     std::vector<std::string> choices);
  static ParamDescriptor log_uniform(std::string name, double lo, double hi);
  static ParamDescriptor uniform(std::string name, double lo, double hi);
  static ParamDescriptor stepped(std::string name, std::int64_t lo,
                                 std::int64_t hi, std::int64_t step);
  /// Stepped grid given by an explicit list of integers (e.g. powers of two).
  static ParamDescriptor int_choices(std::string name,
                                     std::vector<std::int64_t> values);
  static ParamDescriptor int_range(std::string name, std::int64_t lo,
                                   std::int64_t hi);

  /// Throws std::invalid_argument when the descriptor is malformed.
  void validate() const;

  bool is_discrete() const {
    return kind != ParamKind::kLogUniform && kind != ParamKind::kUniform;
  }
  /// Number of encoding bins for discrete kinds.
  std::size_t n_bins() const;
};

enum class SpaceVariant {
  kS1,
  kS2Full,
  kS2SharedSigma,
  kS2FixedNopsRandomSigma,
  kCustom,
};

std::string to_string(SpaceVariant v);
SpaceVariant parse_space_variant(const std::string& name);

using ParamValue = std::variant<std::int64_t, double, std::string>;

struct Configuration;

/// Unit-hypercube encoding of a configuration.
struct UnitPoint {
  std::vector<double> coords;
  std::size_t dim() const { return coords.size(); }
};

class SearchSpace {
 public:
  SearchSpace(SpaceVariant variant, std::vector<ParamDescriptor> params);

  SpaceVariant variant() const { return variant_; }
  const std::vector<ParamDescriptor>& params() const { return params_; }
  std::size_t dim() const { return params_.size(); }
  const ParamDescriptor& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  /// True for the variant that trains with N_ops = 1 and randomly drawn
  /// per-op sigmas instead of searched ones.
  bool random_sigma() const {
    return variant_ == SpaceVariant::kS2FixedNopsRandomSigma;
  }

  Configuration sample_uniform(Rng& rng) const;
  UnitPoint encode(const Configuration& config) const;
  Configuration decode(const UnitPoint& point) const;

  /// Throws std::invalid_argument naming the offending parameter.
  void validate(const Configuration& config) const;

 private:
  SpaceVariant variant_;
  std::vector<ParamDescriptor> params_;
};

SearchSpace define_space(SpaceVariant variant);
SearchSpace define_space(const std::string& variant_name);

/// Continuous values are stored at 10 significant digits so that the
/// decode(encode(c)) round trip is exact in floating point.
double canonical_real(double x);

struct Configuration {
  std::map<std::string, ParamValue> values;

  double real(const std::string& name) const;
  std::int64_t integer(const std::string& name) const;
  const std::string& category(const std::string& name) const;

  bool operator==(const Configuration&) const = default;

  /// Canonical key-sorted JSON object.
  nlohmann::json to_json() const;
  static Configuration from_json(const nlohmann::json& j);
  std::string canonical_string() const;
  std::uint32_t checksum() const;
};

namespace param_names {
inline constexpr const char* kOptimizer = "optimizer";
inline constexpr const char* kLearningRate = "learning_rate";
inline constexpr const char* kL2 = "l2";
inline constexpr const char* kDecayEvery = "decay_every";
inline constexpr const char* kBatchSize = "batch_size";
inline constexpr const char* kNops = "n_ops";
inline constexpr const char* kSigmaCommon = "sigma_common";
}  // namespace param_names

/// Names of the five optimization parameters shared by every variant.
const std::vector<std::string>& optimization_param_names();

/// The ten augmentation operations, in canonical order.
inline constexpr std::array<const char*, 10> kAugOpNames = {
    "rotate",   "posterize", "solarize", "color", "contrast",
    "brightness", "sharpness", "shear",  "translate", "cutout"};

/// "sigma_<op>" for the per-op standard deviation parameters.
std::string sigma_param_name(std::size_t op_index);

}  // namespace fshpo
