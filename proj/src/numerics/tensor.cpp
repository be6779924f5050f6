#include "ditopt/numerics/tensor.hpp"

#include <cmath>
#include <sstream>

namespace ditopt {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_string(shape));
    n *= e;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<Index>(data_.size())) {
    throw ShapeError("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                     " elements");
  }
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_list(std::initializer_list<Scalar> values) {
  std::vector<Scalar> v(values);
  const auto n = static_cast<Index>(v.size());
  return Tensor(Shape{n}, std::move(v));
}

template <typename Scalar>
Index Tensor<Scalar>::dim(Index axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for shape " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
Index Tensor<Scalar>::cols() const {
  return shape_.empty() ? 1 : shape_.back();
}

template <typename Scalar>
Index Tensor<Scalar>::rows() const {
  const Index c = cols();
  return c == 0 ? 0 : numel() / c;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <typename Scalar>
void Tensor<Scalar>::fill(Scalar v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename Scalar>
bool Tensor<Scalar>::all_finite() const {
  for (Scalar v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Scalar m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace ditopt
