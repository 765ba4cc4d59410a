#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fshpo/image.hpp"

namespace fshpo {

enum class DomainStyle { kPhoto, kSketch };

std::string to_string(DomainStyle s);
DomainStyle parse_domain_style(const std::string& s);

struct DomainSpec {
  DomainStyle style = DomainStyle::kPhoto;
  int n_classes = 60;
  int images_per_class = 50;
  int image_size = 32;
  double noise = 0.06;
  std::uint64_t seed = 1;
  /// Seed of the class definitions; domains sharing it share class identity.
  std::uint64_t class_seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DomainSpec from_json(const nlohmann::json& j);
};

/// Procedural generator parameters for one class.
struct ClassDef {
  int vertices = 3;     // polygon vertex count
  bool star = false;    // alternate inner/outer radius
  int hue_bin = 0;      // discrete base hue
  double rotation = 0;  // radians
  double aspect = 1.0;
  double size = 0.3;    // outer radius as a fraction of the image side
  double hue = 0.0;     // in [0,1)

  nlohmann::json to_json() const;
  static ClassDef from_json(const nlohmann::json& j);
  bool same_discrete(const ClassDef& o) const {
    return vertices == o.vertices && star == o.star && hue_bin == o.hue_bin;
  }
};

inline constexpr int kHueBins = 6;

std::vector<ClassDef> make_class_defs(int n_classes, std::uint64_t class_seed);

struct Dataset {
  DomainSpec spec;
  std::vector<ClassDef> classes;
  ImageBatch images;        // grouped by class, images_per_class each
  std::vector<int> labels;  // class index per image

  std::vector<std::size_t> examples_of(int cls) const;
  std::uint32_t content_hash() const;

  /// manifest.json plus images.bin (little-endian float32, HWC row-major).
  void save(const std::filesystem::path& dir) const;
  static Dataset load(const std::filesystem::path& dir);
};

/// Renders every class of `spec`; pure function of the spec.
Dataset make_domain(const DomainSpec& spec);

struct SplitSet {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;

  nlohmann::json to_json() const;
  static SplitSet from_json(const nlohmann::json& j);
};

/// Random class partition: val and test get floor(f * n) classes, the
/// remainder goes to train.
SplitSet split_classes(int n_classes, const std::array<double, 3>& fractions, std::uint64_t seed);

/// A set of classes of one dataset; the unit episodes are drawn from.
struct ClassSubset {
  const Dataset* data = nullptr;
  std::vector<int> classes;
  int split_id = 0;
};

}  // namespace fshpo
