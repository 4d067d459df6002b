#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "owt/errors.hpp"
#include "owt/tensor.hpp"

namespace owt {

// H x W x C floats, row-major with channels innermost.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 1, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::size_t size() const { return pixels.size(); }
  float& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  bool operator==(const Image&) const = default;
};

// Per-pixel group index; 0 is background.
using LabelMap = std::vector<std::uint8_t>;

template <typename T = float>
BasicTensor<T> to_tensor(const Image& img, bool requires_grad = false) {
  return BasicTensor<T>::from_data({img.height, img.width, img.channels},
                                   std::vector<T>(img.pixels.begin(), img.pixels.end()), requires_grad);
}

template <typename T>
Image to_image(const BasicTensor<T>& t) {
  if (t.rank() != 3) throw DimensionError("expected an HxWxC tensor, got " + shape_string(t.shape()));
  Image img(t.dim(0), t.dim(1), t.dim(2));
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = static_cast<float>(t.data()[i]);
  return img;
}

}  // namespace owt
