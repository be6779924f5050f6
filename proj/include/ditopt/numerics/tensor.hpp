#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ditopt/error.hpp"

namespace ditopt {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major N-d array. Value semantics: copies are deep.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, std::vector<Scalar>{v}); }
  static Tensor from_list(std::initializer_list<Scalar> values);

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const;
  Index numel() const noexcept { return static_cast<Index>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  /// Rows/cols of the trailing-axis matrix view: cols = last extent.
  Index cols() const;
  Index rows() const;

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }
  std::span<Scalar> values() noexcept { return data_; }
  std::span<const Scalar> values() const noexcept { return data_; }
  const std::vector<Scalar>& storage() const noexcept { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Two-index access on rank-2 tensors.
  Scalar& operator()(Index r, Index c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
  const Scalar& operator()(Index r, Index c) const {
    return data_[static_cast<std::size_t>(r * shape_[1] + c)];
  }

  Scalar item() const;

  Tensor reshaped(Shape shape) const;
  void fill(Scalar v);
  bool all_finite() const;

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_{0};
  std::vector<Scalar> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Trailing-axis matrix view (rows = numel / last extent).
template <typename Scalar>
Eigen::Map<RowMatrix<Scalar>> as_matrix(Tensor<Scalar>& t) {
  return {t.data(), t.rows(), t.cols()};
}

template <typename Scalar>
Eigen::Map<const RowMatrix<Scalar>> as_matrix(const Tensor<Scalar>& t) {
  return {t.data(), t.rows(), t.cols()};
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ditopt
