#include "ditopt/evalmetrics/evalmetrics.hpp"

#include <cmath>

#include "ditopt/error.hpp"
#include "ditopt/rng.hpp"

namespace ditopt {

template <typename Scalar>
GaussianSummary<Scalar> GaussianSummary<Scalar>::from_samples(const Matrix& samples) {
  if (samples.rows() < 2) throw InputError("a Gaussian summary needs at least two samples");
  GaussianSummary s;
  s.count = samples.rows();
  s.mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / Scalar(s.count - 1);
  return s;
}

template <typename Scalar>
GaussianSummary<Scalar> GaussianSummary<Scalar>::merge(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.dim() != b.dim()) throw InputError("cannot merge summaries of different dimension");
  if (a.count == 0) return b;
  if (b.count == 0) return a;
  const Scalar na = Scalar(a.count), nb = Scalar(b.count), n = na + nb;
  GaussianSummary s;
  s.count = a.count + b.count;
  const Vector delta = b.mean - a.mean;
  s.mean = a.mean + delta * (nb / n);
  // Sums of squared deviations add, plus the between-group term.
  const Matrix m2 = a.cov * (na - 1) + b.cov * (nb - 1) + delta * delta.transpose() * (na * nb / n);
  s.cov = m2 / (n - 1);
  return s;
}

namespace {

template <typename Matrix>
Matrix psd_sqrt(const Matrix& m, typename Matrix::Scalar clamp) {
  using Scalar = typename Matrix::Scalar;
  const Matrix sym = (m + m.transpose()) / Scalar(2);
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  auto ev = es.eigenvalues();
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -clamp) throw NumericError("covariance is not positive semi-definite");
    ev[i] = std::sqrt(std::max(ev[i], Scalar(0)));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

template <typename Scalar>
Scalar frechet_distance(const GaussianSummary<Scalar>& a, const GaussianSummary<Scalar>& b, Scalar clamp) {
  if (a.dim() != b.dim()) {
    throw InputError("feature dimension mismatch: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  }
  using Matrix = typename GaussianSummary<Scalar>::Matrix;
  const Matrix sa = psd_sqrt<Matrix>(a.cov, clamp);
  const Matrix inner = sa * b.cov * sa;
  const Matrix cross = psd_sqrt<Matrix>(inner, clamp * std::max(Scalar(1), inner.norm()));
  const Scalar d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - Scalar(2) * cross.trace();
  return std::max(d, Scalar(0));
}

template <typename Scalar>
FeatureProjector<Scalar>::FeatureProjector(Index input_size, std::uint64_t seed, Index dim)
    : input_size_(input_size), matrix_(dim, input_size) {
  if (input_size < 1 || dim < 1) throw InputError("projection sizes must be positive");
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(input_size));
  for (Index r = 0; r < dim; ++r)
    for (Index c = 0; c < input_size; ++c) matrix_(r, c) = static_cast<Scalar>(rng.normal() * s);
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> FeatureProjector<Scalar>::operator()(const Tensor<Scalar>& x) const {
  if (x.numel() != input_size_) {
    throw ShapeError("projector built for " + std::to_string(input_size_) + " inputs, got " + shape_string(x.shape()));
  }
  return matrix_ * Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(x.data(), x.numel());
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> FeatureProjector<Scalar>::project_batch(
    const Tensor<Scalar>& batch) const {
  if (batch.rank() < 1 || batch.numel() != batch.dim(0) * input_size_) {
    throw ShapeError("batch " + shape_string(batch.shape()) + " does not split into inputs of " +
                     std::to_string(input_size_));
  }
  const Index n = batch.dim(0);
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> rows(batch.data(), n,
                                                                                               input_size_);
  return rows * matrix_.transpose();
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> feature_projection(const Tensor<Scalar>& x, std::uint64_t seed, Index dim) {
  return FeatureProjector<Scalar>(x.numel(), seed, dim)(x);
}

ImageDiff image_diff(const Image& baseline, const Image& variant, float threshold) {
  if (baseline.width != variant.width || baseline.height != variant.height) {
    throw ShapeError("image_diff size mismatch: " + std::to_string(baseline.width) + "x" +
                     std::to_string(baseline.height) + " vs " + std::to_string(variant.width) + "x" +
                     std::to_string(variant.height));
  }
  ImageDiff out;
  out.overlay = Image(baseline.width, baseline.height);
  for (Index y = 0; y < baseline.height; ++y)
    for (Index x = 0; x < baseline.width; ++x) {
      float worst = 0.0f;
      for (Index c = 0; c < 3; ++c) worst = std::max(worst, std::abs(baseline.at(x, y, c) - variant.at(x, y, c)));
      if (worst > threshold) {
        ++out.deviating;
        out.overlay.at(x, y, 0) = 1.0f;
        out.overlay.at(x, y, 1) = 0.0f;
        out.overlay.at(x, y, 2) = 1.0f;
      } else {
        const float g = 0.299f * baseline.at(x, y, 0) + 0.587f * baseline.at(x, y, 1) + 0.114f * baseline.at(x, y, 2);
        for (Index c = 0; c < 3; ++c) out.overlay.at(x, y, c) = g;
      }
    }
  const Index total = baseline.width * baseline.height;
  out.fraction = total == 0 ? 0.0 : static_cast<double>(out.deviating) / static_cast<double>(total);
  return out;
}

template struct GaussianSummary<float>;
template struct GaussianSummary<double>;
template class FeatureProjector<float>;
template class FeatureProjector<double>;
template float frechet_distance(const GaussianSummary<float>&, const GaussianSummary<float>&, float);
template double frechet_distance(const GaussianSummary<double>&, const GaussianSummary<double>&, double);
template Eigen::Matrix<float, Eigen::Dynamic, 1> feature_projection(const Tensor<float>&, std::uint64_t, Index);
template Eigen::Matrix<double, Eigen::Dynamic, 1> feature_projection(const Tensor<double>&, std::uint64_t, Index);

}  // namespace ditopt
