#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace fshpo {

/// Height x width x channels; pixels are stored row-major HWC.
struct ImageShape {
  int height = 32;
  int width = 32;
  int channels = 3;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(channels);
  }
  bool operator==(const ImageShape&) const = default;
};

/// A contiguous NHWC batch of images with channel values in [0,1].
class ImageBatch {
 public:
  ImageBatch() = default;
  ImageBatch(ImageShape shape, std::size_t count)
      : shape_(shape), pixels_(shape.size() * count, 0.0) {}
  ImageBatch(ImageShape shape, std::vector<double> pixels)
      : shape_(shape), pixels_(std::move(pixels)) {
    if (shape_.size() == 0 || pixels_.size() % shape_.size() != 0)
      throw std::invalid_argument("pixel buffer is not a whole number of images");
  }

  const ImageShape& shape() const { return shape_; }
  std::size_t count() const { return shape_.size() == 0 ? 0 : pixels_.size() / shape_.size(); }

  std::span<double> image(std::size_t i) {
    return std::span<double>(pixels_).subspan(i * shape_.size(), shape_.size());
  }
  std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels_).subspan(i * shape_.size(), shape_.size());
  }
  std::span<double> pixels() { return pixels_; }
  std::span<const double> pixels() const { return pixels_; }

  void resize(std::size_t count) { pixels_.resize(shape_.size() * count); }
  void reshape(ImageShape shape, std::size_t count) {
    shape_ = shape;
    pixels_.assign(shape.size() * count, 0.0);
  }

  bool operator==(const ImageBatch&) const = default;

 private:
  ImageShape shape_{};
  std::vector<double> pixels_;
};

}  // namespace fshpo
