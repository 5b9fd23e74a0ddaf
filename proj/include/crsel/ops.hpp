#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "crsel/tensor.hpp"

namespace crsel {

/// out[n,o,i,j] = bias[o] + sum_k weight[o,k] * x[n,k,i,j]
template <typename T>
BasicTensor<T> conv1x1(const BasicTensor<T>& x, const Conv1x1Params<T>& p) {
  p.validate();
  if (x.c() != p.c_in()) {
    throw DimensionError("conv1x1: input has " + std::to_string(x.c()) +
                         " channels but weight expects " + std::to_string(p.c_in()));
  }
  const Shape s = x.shape();
  BasicTensor<T> out(Shape{s.n, p.c_out(), s.h, s.w});
  const std::size_t plane = s.plane();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t o = 0; o < p.c_out(); ++o) {
      T* dst = &out(b, o, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) dst[q] = p.bias[o];
      for (std::size_t k = 0; k < s.c; ++k) {
        const T wk = p.weight(o, k);
        const T* src = &x(b, k, 0, 0);
        for (std::size_t q = 0; q < plane; ++q) dst[q] += wk * src[q];
      }
    }
  }
  return out;
}

/// Same as conv1x1 with an implicit zero bias.
template <typename T>
BasicTensor<T> conv1x1_nobias(const BasicTensor<T>& x, const Matrix<T>& weight) {
  return conv1x1(x, Conv1x1Params<T>(weight, std::vector<T>(weight.rows, T(0))));
}

namespace detail {
template <typename T, typename F>
BasicTensor<T> map(const BasicTensor<T>& x, F f) {
  BasicTensor<T> out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = f(x[k]);
  return out;
}
}  // namespace detail

template <typename T>
T relu_scalar(T v) {
  return v > T(0) ? v : T(0);
}

/// max(0, min(1, (x + 1) / 2))
template <typename T>
T hard_sigmoid_scalar(T v) {
  const T y = (v + T(1)) / T(2);
  return std::max(T(0), std::min(T(1), y));
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::map(x, [](T v) { return relu_scalar(v); });
}

template <typename T>
BasicTensor<T> tanh_map(const BasicTensor<T>& x) {
  return detail::map(x, [](T v) { return std::tanh(v); });
}

template <typename T>
BasicTensor<T> hard_sigmoid(const BasicTensor<T>& x) {
  return detail::map(x, [](T v) { return hard_sigmoid_scalar(v); });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return detail::map(x, [factor](T v) { return v * factor; });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape " + a.shape().str() + " vs " + b.shape().str());
  }
  BasicTensor<T> out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + b[k];
  return out;
}

/// In-place numerically stable softmax of one row.
template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  T mx = row[0];
  for (T v : row) mx = std::max(mx, v);
  T sum = T(0);
  for (T& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (T& v : row) v /= sum;
}

/// Row-wise softmax with per-row max subtraction.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& m) {
  Matrix<T> out = m;
  for (std::size_t r = 0; r < m.rows; ++r) {
    softmax_inplace(std::span<T>(out.data.data() + r * m.cols, m.cols));
  }
  return out;
}

/// Channel concatenation; a's channels come first.
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
    throw DimensionError("concat_channels: spatial/batch mismatch " + a.shape().str() + " vs " +
                         b.shape().str());
  }
  BasicTensor<T> out(Shape{a.n(), a.c() + b.c(), a.h(), a.w()});
  const std::size_t plane = a.shape().plane();
  for (std::size_t bi = 0; bi < a.n(); ++bi) {
    std::copy_n(&a(bi, 0, 0, 0), a.c() * plane, &out(bi, 0, 0, 0));
    std::copy_n(&b(bi, 0, 0, 0), b.c() * plane, &out(bi, a.c(), 0, 0));
  }
  return out;
}

/// Channels [first, first + count) of x.
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > x.c()) {
    throw DimensionError("slice_channels: range [" + std::to_string(first) + "," +
                         std::to_string(first + count) + ") outside " + std::to_string(x.c()) +
                         " channels");
  }
  BasicTensor<T> out(Shape{x.n(), count, x.h(), x.w()});
  const std::size_t plane = x.shape().plane();
  for (std::size_t bi = 0; bi < x.n(); ++bi) {
    std::copy_n(&x(bi, first, 0, 0), count * plane, &out(bi, 0, 0, 0));
  }
  return out;
}

/// Mean over each (n, c) plane; result is (n, c, 1, 1).
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  BasicTensor<T> out(Shape{x.n(), x.c(), 1, 1});
  const std::size_t plane = x.shape().plane();
  for (std::size_t bi = 0; bi < x.n(); ++bi) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      const T* src = &x(bi, ch, 0, 0);
      T acc = T(0);
      for (std::size_t q = 0; q < plane; ++q) acc += src[q];
      out(bi, ch, 0, 0) = acc / static_cast<T>(plane);
    }
  }
  return out;
}

/// Source row/col used by nearest-neighbour resizing from `in` to `out` cells.
inline std::size_t nearest_source(std::size_t dst, std::size_t in, std::size_t out) {
  return (dst * in) / out;
}

/// Nearest-neighbour resize of the spatial dims to (h, w).
template <typename T>
BasicTensor<T> resize_nearest(const BasicTensor<T>& x, std::size_t h, std::size_t w) {
  BasicTensor<T> out(Shape{x.n(), x.c(), h, w});
  for (std::size_t bi = 0; bi < x.n(); ++bi) {
    for (std::size_t ch = 0; ch < x.c(); ++ch) {
      for (std::size_t i = 0; i < h; ++i) {
        const std::size_t si = nearest_source(i, x.h(), h);
        for (std::size_t j = 0; j < w; ++j) {
          out(bi, ch, i, j) = x(bi, ch, si, nearest_source(j, x.w(), w));
        }
      }
    }
  }
  return out;
}

/// Row-vector linear map applied at each pixel: out[:, pixel] = x[:, pixel] * m,
/// with m of shape (x.c x m.cols).
template <typename T>
BasicTensor<T> channel_matmul(const BasicTensor<T>& x, const Matrix<T>& m) {
  if (m.rows != x.c()) {
    throw DimensionError("channel_matmul: input has " + std::to_string(x.c()) +
                         " channels but matrix has " + std::to_string(m.rows) + " rows");
  }
  BasicTensor<T> out(Shape{x.n(), m.cols, x.h(), x.w()});
  const std::size_t plane = x.shape().plane();
  for (std::size_t bi = 0; bi < x.n(); ++bi) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      T* dst = &out(bi, j, 0, 0);
      for (std::size_t i = 0; i < m.rows; ++i) {
        const T wij = m(i, j);
        const T* src = &x(bi, i, 0, 0);
        for (std::size_t q = 0; q < plane; ++q) dst[q] += src[q] * wij;
      }
    }
  }
  return out;
}

}  // namespace crsel
