#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace flipreid {

/// Dense rank-4 array in (batch, channels, height, width) order.
class Tensor4 {
public:
  Tensor4() = default;
  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : n_(n), c_(c), h_(h), w_(w), data_(n * c * h * w, fill) {}

  std::size_t batch() const { return n_; }
  std::size_t channels() const { return c_; }
  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane() const { return h_ * w_; }

  double &operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * c_ + c) * h_ + y) * w_ + x];
  }
  double operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * c_ + c) * h_ + y) * w_ + x];
  }

  double *channel_ptr(std::size_t n, std::size_t c) { return data_.data() + (n * c_ + c) * h_ * w_; }
  const double *channel_ptr(std::size_t n, std::size_t c) const {
    return data_.data() + (n * c_ + c) * h_ * w_;
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_shape(const Tensor4 &o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  bool operator==(const Tensor4 &) const = default;

private:
  std::size_t n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

/// Row-major matrix; rows are batch items, columns are features.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool operator==(const Matrix &) const = default;

private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

} // namespace flipreid
