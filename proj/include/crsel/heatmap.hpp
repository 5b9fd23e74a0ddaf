#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crsel/tensor.hpp"

namespace crsel {

/// 8-bit grayscale raster.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Channel-mean activation map. Batch elements are stacked vertically, so the
/// result is (n * h) rows by w columns. Each image is min-max normalised to
/// [0, 255] on its own; a constant image becomes all zeros.
inline GrayImage activation_heatmap(const Tensor& x) {
  const std::size_t plane = x.h() * x.w();
  GrayImage img{x.w(), x.n() * x.h(), std::vector<std::uint8_t>(x.n() * plane, 0)};
  std::vector<double> mean(plane);
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t i = 0; i < x.h(); ++i) {
      for (std::size_t j = 0; j < x.w(); ++j) {
        double acc = 0;
        for (std::size_t ch = 0; ch < x.c(); ++ch) acc += x(b, ch, i, j);
        mean[i * x.w() + j] = acc / static_cast<double>(x.c());
      }
    }
    const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
    const double range = *hi - *lo;
    if (!(range > 0)) continue;
    for (std::size_t k = 0; k < plane; ++k) {
      img.pixels[b * plane + k] = static_cast<std::uint8_t>(std::lround((mean[k] - *lo) / range * 255.0));
    }
  }
  return img;
}

/// Binary PGM (P5) encoding.
inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

}  // namespace crsel
