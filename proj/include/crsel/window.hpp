#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crsel/tensor.hpp"

namespace crsel {

enum class WindowPadding {
  reject,  // non-divisible spatial dims are an error
  zero,    // pad bottom/right with zeros, crop again on merge
};

/// Tensor rearranged into M x M windows.
///
/// Windows are ordered batch-major, then window row, then window column.
/// Inside a window, tokens are the M*M pixels in row-major order and each
/// token holds `channels` features contiguously: data[(win * tokens + t) * channels + ch].
template <typename T>
struct Windows {
  Shape source;           // shape of the tensor that was partitioned
  std::size_t m = 1;      // window side
  std::size_t padded_h = 1;
  std::size_t padded_w = 1;
  std::vector<T> data;

  std::size_t rows() const { return padded_h / m; }
  std::size_t cols() const { return padded_w / m; }
  std::size_t per_image() const { return rows() * cols(); }
  std::size_t count() const { return source.n * per_image(); }
  std::size_t tokens() const { return m * m; }
  std::size_t channels() const { return source.c; }

  T* window(std::size_t win) { return data.data() + win * tokens() * channels(); }
  const T* window(std::size_t win) const { return data.data() + win * tokens() * channels(); }
};

/// Number of windows per image for a spatial extent, or throws if not divisible.
inline std::size_t window_grid_checked(std::size_t h, std::size_t w, std::size_t m) {
  if (m == 0) throw DimensionError("window size must be >= 1");
  if (h % m != 0 || w % m != 0) {
    throw DimensionError("spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by window size " + std::to_string(m));
  }
  return (h / m) * (w / m);
}

/// Linear window index of pixel (b, i, j) for window side m over width w.
inline std::size_t window_of(std::size_t b, std::size_t i, std::size_t j, std::size_t m,
                             std::size_t h, std::size_t w) {
  const std::size_t rows = (h + m - 1) / m;
  const std::size_t cols = (w + m - 1) / m;
  return (b * rows + i / m) * cols + j / m;
}

template <typename T>
Windows<T> window_partition(const BasicTensor<T>& x, std::size_t m,
                            WindowPadding padding = WindowPadding::reject) {
  if (m == 0) throw DimensionError("window size must be >= 1");
  Windows<T> out;
  out.source = x.shape();
  out.m = m;
  if (padding == WindowPadding::reject) {
    window_grid_checked(x.h(), x.w(), m);
    out.padded_h = x.h();
    out.padded_w = x.w();
  } else {
    out.padded_h = (x.h() + m - 1) / m * m;
    out.padded_w = (x.w() + m - 1) / m * m;
  }
  out.data.assign(out.count() * out.tokens() * out.channels(), T(0));
  const std::size_t cols = out.cols();
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      for (std::size_t i = 0; i < x.h(); ++i) {
        for (std::size_t j = 0; j < x.w(); ++j) {
          const std::size_t win = (b * out.rows() + i / m) * cols + j / m;
          const std::size_t tok = (i % m) * m + (j % m);
          out.window(win)[tok * x.c() + ch] = x(b, ch, i, j);
        }
      }
    }
  }
  return out;
}

/// Inverse of window_partition; crops any padding.
template <typename T>
BasicTensor<T> window_merge(const Windows<T>& wins) {
  const std::size_t m = wins.m;
  if (m == 0 || wins.padded_h % m != 0 || wins.padded_w % m != 0 ||
      wins.padded_h < wins.source.h || wins.padded_w < wins.source.w ||
      wins.data.size() != wins.count() * wins.tokens() * wins.channels()) {
    throw DimensionError("window_merge: inconsistent windowed view for shape " + wins.source.str());
  }
  BasicTensor<T> out(wins.source);
  const Shape s = wins.source;
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      for (std::size_t i = 0; i < s.h; ++i) {
        for (std::size_t j = 0; j < s.w; ++j) {
          const std::size_t win = (b * wins.rows() + i / m) * wins.cols() + j / m;
          const std::size_t tok = (i % m) * m + (j % m);
          out(b, ch, i, j) = wins.window(win)[tok * s.c + ch];
        }
      }
    }
  }
  return out;
}

}  // namespace crsel
