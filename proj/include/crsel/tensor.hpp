#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace crsel {

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Batch-channel-row-col extent of a dense 4-D array.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense NCHW tensor stored row-major. Every dimension is at least one.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : BasicTensor(Shape{}) {}

  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(shape) {
    check_shape(shape_);
    data_.assign(shape_.numel(), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_.numel()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& values() const { return data_; }

  std::size_t index(std::size_t b, std::size_t ch, std::size_t i, std::size_t j) const {
    return ((b * shape_.c + ch) * shape_.h + i) * shape_.w + j;
  }

  T& operator()(std::size_t b, std::size_t ch, std::size_t i, std::size_t j) {
    return data_[index(b, ch, i, j)];
  }
  const T& operator()(std::size_t b, std::size_t ch, std::size_t i, std::size_t j) const {
    return data_[index(b, ch, i, j)];
  }

  T& operator[](std::size_t k) { return data_[k]; }
  const T& operator[](std::size_t k) const { return data_[k]; }

  bool operator==(const BasicTensor&) const = default;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
      throw DimensionError("tensor dimensions must be >= 1, got " + s.str());
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Row-major dense matrix.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<T> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) {
      throw DimensionError("matrix data length " + std::to_string(data.size()) + " does not match " +
                           std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  static Matrix identity(std::size_t side) {
    Matrix m(side, side);
    for (std::size_t i = 0; i < side; ++i) m(i, i) = T(1);
    return m;
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool operator==(const Matrix&) const = default;

  template <typename U>
  Matrix<U> cast() const {
    return Matrix<U>(rows, cols, std::vector<U>(data.begin(), data.end()));
  }
};

/// Weights of a 1x1 convolution: weight is (c_out x c_in), bias has c_out entries.
template <typename T>
struct Conv1x1Params {
  Matrix<T> weight;
  std::vector<T> bias;

  Conv1x1Params() = default;
  Conv1x1Params(Matrix<T> w, std::vector<T> b) : weight(std::move(w)), bias(std::move(b)) {
    validate();
  }

  /// Zero weights and bias of the given size.
  static Conv1x1Params zeros(std::size_t c_out, std::size_t c_in) {
    return Conv1x1Params(Matrix<T>(c_out, c_in), std::vector<T>(c_out, T(0)));
  }

  static Conv1x1Params identity(std::size_t channels) {
    return Conv1x1Params(Matrix<T>::identity(channels), std::vector<T>(channels, T(0)));
  }

  std::size_t c_out() const { return weight.rows; }
  std::size_t c_in() const { return weight.cols; }

  void validate() const {
    if (weight.rows == 0 || weight.cols == 0) {
      throw DimensionError("conv1x1 weight must have c_out >= 1 and c_in >= 1");
    }
    if (bias.size() != weight.rows) {
      throw DimensionError("conv1x1 bias length " + std::to_string(bias.size()) +
                           " does not match c_out " + std::to_string(weight.rows));
    }
  }

  bool operator==(const Conv1x1Params&) const = default;

  template <typename U>
  Conv1x1Params<U> cast() const {
    return Conv1x1Params<U>(weight.template cast<U>(), std::vector<U>(bias.begin(), bias.end()));
  }
};

}  // namespace crsel
