#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fusekd/error.hpp"

namespace fkd {

// Dense row-major matrix. Rows are samples throughout the engine.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorCode::ShapeMismatch, "matrix payload does not match " +
                                                std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.flat()[i] = static_cast<U>(data_[i]);
    return out;
  }

  // Copies the listed rows, in order, into a new matrix.
  Matrix gather_rows(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = row(idx[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  Matrix slice_rows(std::size_t begin, std::size_t end) const {
    Matrix out(end - begin, cols_);
    std::copy(data_.begin() + begin * cols_, data_.begin() + end * cols_, out.data_.begin());
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline void require_same_shape(std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2,
                               const std::string& what) {
  if (r1 != r2 || c1 != c2) {
    throw Error(ErrorCode::ShapeMismatch, what + ": " + std::to_string(r1) + "x" +
                                              std::to_string(c1) + " vs " + std::to_string(r2) +
                                              "x" + std::to_string(c2));
  }
}

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const std::string& what) {
  require_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), what);
}

}  // namespace fkd
