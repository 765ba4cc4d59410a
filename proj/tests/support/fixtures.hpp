#pragma once

// Small synthetic image sets for unit tests.

#include <cstdint>
#include <vector>

#include "fshpo/image.hpp"
#include "fshpo/random.hpp"
#include "fshpo/tinynet.hpp"

namespace fixtures {

inline fshpo::ImageBatch uniform_images(fshpo::ImageShape shape, std::size_t n, std::uint64_t seed) {
  fshpo::ImageBatch b(shape, n);
  fshpo::Rng rng = fshpo::make_rng(seed);
  for (double& v : b.pixels()) v = fshpo::uniform01(rng);
  return b;
}

/// Class k draws a bright block at cell k of a coarse grid, tinted by k, on a
/// noisy dark background. Linearly separable for up to 16 classes.
struct BlockImages {
  fshpo::ImageBatch images;
  std::vector<int> labels;

  fshpo::TrainSplit split(int n_classes) const {
    fshpo::TrainSplit s;
    s.images = &images;
    s.n_classes = n_classes;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.indices.push_back(i);
      s.labels.push_back(labels[i]);
    }
    return s;
  }
};

inline BlockImages block_images(fshpo::ImageShape shape, int n_classes, int per_class, std::uint64_t seed) {
  BlockImages out{fshpo::ImageBatch(shape, static_cast<std::size_t>(n_classes * per_class)), {}};
  fshpo::Rng rng = fshpo::make_rng(seed);
  const int cell_h = shape.height / 4, cell_w = shape.width / 4;
  std::size_t n = 0;
  for (int k = 0; k < n_classes; ++k) {
    for (int r = 0; r < per_class; ++r, ++n) {
      auto img = out.images.image(n);
      for (double& v : img) v = 0.15 * fshpo::uniform01(rng);
      const int y0 = (k / 4 % 4) * cell_h, x0 = (k % 4) * cell_w;
      for (int y = y0; y < y0 + cell_h; ++y)
        for (int x = x0; x < x0 + cell_w; ++x)
          for (int c = 0; c < shape.channels; ++c)
            img[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c] =
                0.6 + 0.3 * ((k + c) % 3 == 0) + 0.1 * fshpo::uniform01(rng);
      out.labels.push_back(k);
    }
  }
  return out;
}

}  // namespace fixtures
