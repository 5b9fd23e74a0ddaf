#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "crsel/tensor.hpp"

namespace crsel {

/// Bilinear sampling cell for one continuous coordinate along an axis of
/// length `extent`. The coordinate is clamped to [0, extent - 1]; `lo` and
/// `hi` are the neighbouring integer cells and `frac` the weight on `hi`.
template <typename T>
struct SampleCell {
  std::size_t lo = 0;
  std::size_t hi = 0;
  T frac = T(0);
  bool clamped = false;  // coordinate was outside the valid range
};

template <typename T>
SampleCell<T> sample_cell(T coord, std::size_t extent) {
  SampleCell<T> cell;
  if (extent == 1) {
    cell.clamped = true;
    return cell;
  }
  const T top = static_cast<T>(extent - 1);
  T p = coord;
  if (p < T(0)) {
    p = T(0);
    cell.clamped = true;
  } else if (p > top) {
    p = top;
    cell.clamped = true;
  }
  auto lo = static_cast<std::size_t>(std::floor(p));
  lo = std::min(lo, extent - 2);
  cell.lo = lo;
  cell.hi = lo + 1;
  cell.frac = p - static_cast<T>(lo);
  return cell;
}

/// Resamples x at (j + offset[:,0,i,j], i + offset[:,1,i,j]) with bilinear
/// interpolation and border clamping. Offset channel 0 is horizontal.
template <typename T>
BasicTensor<T> warp_bilinear(const BasicTensor<T>& x, const BasicTensor<T>& offset) {
  if (offset.c() != 2) {
    throw DimensionError("warp_bilinear: offset must have 2 channels, got " +
                         std::to_string(offset.c()));
  }
  if (offset.n() != x.n() || offset.h() != x.h() || offset.w() != x.w()) {
    throw DimensionError("warp_bilinear: offset shape " + offset.shape().str() +
                         " does not match input " + x.shape().str());
  }
  BasicTensor<T> out(x.shape());
  for (std::size_t b = 0; b < x.n(); ++b) {
    for (std::size_t i = 0; i < x.h(); ++i) {
      for (std::size_t j = 0; j < x.w(); ++j) {
        const auto cx = sample_cell(static_cast<T>(j) + offset(b, 0, i, j), x.w());
        const auto cy = sample_cell(static_cast<T>(i) + offset(b, 1, i, j), x.h());
        for (std::size_t ch = 0; ch < x.c(); ++ch) {
          const T v00 = x(b, ch, cy.lo, cx.lo);
          const T v01 = x(b, ch, cy.lo, cx.hi);
          const T v10 = x(b, ch, cy.hi, cx.lo);
          const T v11 = x(b, ch, cy.hi, cx.hi);
          const T top = (T(1) - cx.frac) * v00 + cx.frac * v01;
          const T bottom = (T(1) - cx.frac) * v10 + cx.frac * v11;
          out(b, ch, i, j) = (T(1) - cy.frac) * top + cy.frac * bottom;
        }
      }
    }
  }
  return out;
}

}  // namespace crsel
