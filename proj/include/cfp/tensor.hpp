#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace cfp {

using Vec = std::vector<float>;

// Dense row-major float matrix. Rows are exposed as spans so kernels never
// see raw pointers.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    assert(data_.size() == rows_ * cols_);
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

float dot(std::span<const float> a, std::span<const float> b);
float norm(std::span<const float> a);
Vec subtract(std::span<const float> a, std::span<const float> b);
Vec scaled(std::span<const float> a, float s);
// a += s * b
void add_scaled(std::span<float> a, std::span<const float> b, float s);

}  // namespace cfp
