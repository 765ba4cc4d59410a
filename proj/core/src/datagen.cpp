#include "fshpo/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "fshpo/checksum.hpp"
#include "fshpo/random.hpp"

namespace fshpo {

std::string to_string(DomainStyle s) { return s == DomainStyle::kPhoto ? "photo" : "sketch"; }

DomainStyle parse_domain_style(const std::string& s) {
  if (s == "photo") return DomainStyle::kPhoto;
  if (s == "sketch") return DomainStyle::kSketch;
  throw std::invalid_argument("unknown domain style '" + s + "'");
}

void DomainSpec::validate() const {
  if (n_classes < 15) throw std::invalid_argument("a domain needs at least 15 classes");
  if (n_classes > 6 * 2 * kHueBins)
    throw std::invalid_argument("too many classes for the procedural shape family");
  if (images_per_class < 2) throw std::invalid_argument("images_per_class must be >= 2");
  if (image_size < 8 || image_size % 4 != 0)
    throw std::invalid_argument("image_size must be a multiple of 4 and >= 8");
  if (!(noise >= 0.0 && noise <= 0.5)) throw std::invalid_argument("noise must lie in [0, 0.5]");
}

nlohmann::json DomainSpec::to_json() const {
  return {{"style", to_string(style)}, {"n_classes", n_classes},
          {"images_per_class", images_per_class}, {"image_size", image_size},
          {"noise", noise}, {"seed", seed}, {"class_seed", class_seed}};
}

DomainSpec DomainSpec::from_json(const nlohmann::json& j) {
  DomainSpec s;
  s.style = parse_domain_style(j.value("style", std::string("photo")));
  s.n_classes = j.value("n_classes", s.n_classes);
  s.images_per_class = j.value("images_per_class", s.images_per_class);
  s.image_size = j.value("image_size", s.image_size);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  s.class_seed = j.value("class_seed", s.class_seed);
  s.validate();
  return s;
}

nlohmann::json ClassDef::to_json() const {
  return {{"vertices", vertices}, {"star", star}, {"hue_bin", hue_bin}, {"rotation", rotation},
          {"aspect", aspect}, {"size", size}, {"hue", hue}};
}

ClassDef ClassDef::from_json(const nlohmann::json& j) {
  ClassDef c;
  c.vertices = j.at("vertices").get<int>();
  c.star = j.at("star").get<bool>();
  c.hue_bin = j.at("hue_bin").get<int>();
  c.rotation = j.at("rotation").get<double>();
  c.aspect = j.at("aspect").get<double>();
  c.size = j.at("size").get<double>();
  c.hue = j.at("hue").get<double>();
  return c;
}

std::vector<ClassDef> make_class_defs(int n_classes, std::uint64_t class_seed) {
  // Every (vertices, star, hue_bin) triple is distinct.
  std::vector<std::array<int, 3>> combos;
  for (int v = 3; v <= 8; ++v)
    for (int s = 0; s < 2; ++s)
      for (int h = 0; h < kHueBins; ++h) combos.push_back({v, s, h});
  if (n_classes < 1 || static_cast<std::size_t>(n_classes) > combos.size())
    throw std::invalid_argument("unsupported class count");
  Rng rng = make_rng(derive_seed(class_seed, tag_hash("classes")));
  std::shuffle(combos.begin(), combos.end(), rng);
  std::vector<ClassDef> defs;
  for (int i = 0; i < n_classes; ++i) {
    const auto& c = combos[static_cast<std::size_t>(i)];
    ClassDef d;
    d.vertices = c[0];
    d.star = c[1] == 1;
    d.hue_bin = c[2];
    d.rotation = uniform01(rng) * 2.0 * std::numbers::pi / d.vertices;
    d.aspect = 0.6 + 0.8 * uniform01(rng);
    d.size = 0.28 + 0.12 * uniform01(rng);
    d.hue = (c[2] + 0.5) / kHueBins;
    defs.push_back(d);
  }
  return defs;
}

namespace {

struct Vec2 {
  double x, y;
};

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

bool inside(const std::vector<Vec2>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    if ((poly[i].y > y) != (poly[j].y > y) &&
        x < (poly[j].x - poly[i].x) * (y - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x)
      in = !in;
  }
  return in;
}

double segment_distance(Vec2 a, Vec2 b, double x, double y) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((x - a.x) * dx + (y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double px = a.x + t * dx - x, py = a.y + t * dy - y;
  return std::sqrt(px * px + py * py);
}

double edge_distance(const std::vector<Vec2>& poly, double x, double y) {
  double best = 1e9;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++)
    best = std::min(best, segment_distance(poly[j], poly[i], x, y));
  return best;
}

std::vector<Vec2> shape_outline(const ClassDef& def, double cx, double cy, double radius,
                                double rotation, double aspect) {
  const int n = def.star ? 2 * def.vertices : def.vertices;
  std::vector<Vec2> pts;
  for (int i = 0; i < n; ++i) {
    const double a = rotation + 2.0 * std::numbers::pi * i / n;
    const double r = (def.star && i % 2 == 1) ? 0.5 * radius : radius;
    const double lx = r * std::cos(a) * aspect, ly = r * std::sin(a);
    pts.push_back({cx + lx, cy + ly});
  }
  return pts;
}

void render(const DomainSpec& spec, const ClassDef& def, Rng& rng, std::span<double> out) {
  const int n = spec.image_size;
  constexpr int kSuper = 4;
  const double side = n;
  const double radius = def.size * side * (0.75 + 0.5 * uniform01(rng));
  const double rotation = def.rotation + (uniform01(rng) - 0.5) * 1.2;
  const double aspect = def.aspect * (0.8 + 0.4 * uniform01(rng));
  const double cx = 0.5 * side + (uniform01(rng) - 0.5) * 0.35 * side;
  const double cy = 0.5 * side + (uniform01(rng) - 0.5) * 0.35 * side;
  const auto poly = shape_outline(def, cx, cy, radius, rotation, aspect);

  if (spec.style == DomainStyle::kPhoto) {
    const auto fg = hsv_to_rgb(def.hue + (uniform01(rng) - 0.5) * 0.16, 0.35 + 0.55 * uniform01(rng),
                               0.45 + 0.5 * uniform01(rng));
    const auto bg0 = hsv_to_rgb(uniform01(rng), 0.1 + 0.3 * uniform01(rng), 0.3 + 0.5 * uniform01(rng));
    const auto bg1 = hsv_to_rgb(uniform01(rng), 0.1 + 0.3 * uniform01(rng), 0.3 + 0.5 * uniform01(rng));
    const double gdir = uniform01(rng) * 2.0 * std::numbers::pi;
    const double freq = 0.3 + 0.6 * uniform01(rng);
    const double phase = uniform01(rng) * 2.0 * std::numbers::pi;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        int covered = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx)
            covered += inside(poly, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper) ? 1 : 0;
        const double alpha = static_cast<double>(covered) / (kSuper * kSuper);
        const double g = 0.5 + 0.5 * ((x - 0.5 * n) * std::cos(gdir) + (y - 0.5 * n) * std::sin(gdir)) / n;
        const double tex = 0.06 * std::sin(freq * x + phase) * std::cos(freq * y - phase);
        // Light shading across the shape.
        const double shade = 1.0 - 0.15 * ((x - cx) + (y - cy)) / (2.0 * radius + 1e-9);
        for (int ch = 0; ch < 3; ++ch) {
          const double bg = (1 - g) * bg0[static_cast<std::size_t>(ch)] + g * bg1[static_cast<std::size_t>(ch)] + tex;
          const double v = (1 - alpha) * bg + alpha * fg[static_cast<std::size_t>(ch)] * shade;
          out[(static_cast<std::size_t>(y) * n + x) * 3 + ch] = v + normal(rng, 0.0, spec.noise);
        }
      }
    }
  } else {
    const double paper = 0.9 + 0.08 * uniform01(rng);
    const double ink = 0.05 + 0.15 * uniform01(rng);
    const double stroke = std::max(0.6, 0.045 * side) * (0.8 + 0.4 * uniform01(rng));
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        int covered = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx)
            covered += edge_distance(poly, x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper) < 0.5 * stroke ? 1 : 0;
        const double alpha = static_cast<double>(covered) / (kSuper * kSuper);
        const double v = (1 - alpha) * paper + alpha * ink + normal(rng, 0.0, spec.noise);
        for (int ch = 0; ch < 3; ++ch) out[(static_cast<std::size_t>(y) * n + x) * 3 + ch] = v;
      }
    }
  }
  // Values are held at float precision so the on-disk format is lossless.
  for (double& v : out) v = static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
}

}  // namespace

Dataset make_domain(const DomainSpec& spec) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.classes = make_class_defs(spec.n_classes, spec.class_seed);
  const ImageShape shape{spec.image_size, spec.image_size, 3};
  const auto total = static_cast<std::size_t>(spec.n_classes) * static_cast<std::size_t>(spec.images_per_class);
  d.images = ImageBatch(shape, total);
  d.labels.resize(total);
  for (int c = 0; c < spec.n_classes; ++c) {
    for (int i = 0; i < spec.images_per_class; ++i) {
      const auto idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(spec.images_per_class) +
                       static_cast<std::size_t>(i);
      Rng rng = make_rng(derive_seed(spec.seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)));
      render(spec, d.classes[static_cast<std::size_t>(c)], rng, d.images.image(idx));
      d.labels[idx] = c;
    }
  }
  return d;
}

std::vector<std::size_t> Dataset::examples_of(int cls) const {
  const auto per = static_cast<std::size_t>(spec.images_per_class);
  std::vector<std::size_t> out(per);
  std::iota(out.begin(), out.end(), static_cast<std::size_t>(cls) * per);
  return out;
}

namespace {

std::vector<float> as_floats(const ImageBatch& images) {
  const auto px = images.pixels();
  return std::vector<float>(px.begin(), px.end());
}

}  // namespace

std::uint32_t Dataset::content_hash() const {
  static_assert(std::endian::native == std::endian::little);
  const auto f = as_floats(images);
  return crc32(std::as_bytes(std::span(f)));
}

void Dataset::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const auto f = as_floats(images);
  {
    std::ofstream out(dir / "images.bin", std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / "images.bin").string());
    out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
  }
  nlohmann::json classes_json = nlohmann::json::array();
  for (const auto& c : classes) classes_json.push_back(c.to_json());
  nlohmann::json m = {{"format", "fshpo-dataset"},
                      {"version", 1},
                      {"spec", spec.to_json()},
                      {"shape", {images.shape().height, images.shape().width, images.shape().channels}},
                      {"count", images.count()},
                      {"dtype", "float32-le"},
                      {"classes", classes_json},
                      {"content_crc32", content_hash()}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << m.dump(2) << '\n';
}

Dataset Dataset::load(const std::filesystem::path& dir) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  const auto m = nlohmann::json::parse(min);
  if (m.value("format", std::string()) != "fshpo-dataset")
    throw std::runtime_error("not a dataset manifest: " + dir.string());
  Dataset d;
  d.spec = DomainSpec::from_json(m.at("spec"));
  for (const auto& c : m.at("classes")) d.classes.push_back(ClassDef::from_json(c));
  const auto shape_j = m.at("shape");
  const ImageShape shape{shape_j[0].get<int>(), shape_j[1].get<int>(), shape_j[2].get<int>()};
  const auto count = m.at("count").get<std::size_t>();
  std::vector<float> f(count * shape.size());
  std::ifstream in(dir / "images.bin", std::ios::binary);
  in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!in) throw std::runtime_error("images.bin is shorter than the manifest says");
  d.images = ImageBatch(shape, std::vector<double>(f.begin(), f.end()));
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i)
    d.labels[i] = static_cast<int>(i / static_cast<std::size_t>(d.spec.images_per_class));
  if (d.content_hash() != m.at("content_crc32").get<std::uint32_t>())
    throw std::runtime_error("dataset content hash mismatch in " + dir.string());
  return d;
}

nlohmann::json SplitSet::to_json() const { return {{"train", train}, {"val", val}, {"test", test}}; }

SplitSet SplitSet::from_json(const nlohmann::json& j) {
  return {j.at("train").get<std::vector<int>>(), j.at("val").get<std::vector<int>>(),
          j.at("test").get<std::vector<int>>()};
}

SplitSet split_classes(int n_classes, const std::array<double, 3>& fractions, std::uint64_t seed) {
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
  for (double f : fractions)
    if (f < 0.0) throw std::invalid_argument("split fractions must be non-negative");
  const auto n_val = static_cast<int>(std::floor(fractions[1] * n_classes + 1e-9));
  const auto n_test = static_cast<int>(std::floor(fractions[2] * n_classes + 1e-9));
  const int n_train = n_classes - n_val - n_test;
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw std::invalid_argument("split fractions leave an empty split for " + std::to_string(n_classes) +
                                " classes");
  std::vector<int> order(static_cast<std::size_t>(n_classes));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(derive_seed(seed, tag_hash("split")));
  std::shuffle(order.begin(), order.end(), rng);
  SplitSet s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

}  // namespace fshpo
