#pragma once

#include <Eigen/Dense>
#include <span>

#include "ditopt/io/image.hpp"
#include "ditopt/numerics/tensor.hpp"

namespace ditopt {

/// Mean and unbiased covariance of a feature set.
template <typename Scalar>
struct GaussianSummary {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Vector mean;
  Matrix cov;
  Index count = 0;

  Index dim() const { return mean.size(); }

  /// One sample per row. Needs at least two rows.
  static GaussianSummary from_samples(const Matrix& samples);

  /// Pooled summary of the union of both sample sets.
  static GaussianSummary merge(const GaussianSummary& a, const GaussianSummary& b);
};

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The cross term is
/// evaluated as Tr sqrt(sqrt(S_a) S_b sqrt(S_a)); eigenvalues above
/// -clamp are treated as zero.
template <typename Scalar>
Scalar frechet_distance(const GaussianSummary<Scalar>& a, const GaussianSummary<Scalar>& b,
                        Scalar clamp = Scalar(1e-6));

/// Fixed seeded Gaussian projection of a flattened input to `dim` features,
/// scaled by 1/sqrt(input size). The matrix is built once per projector.
template <typename Scalar>
class FeatureProjector {
 public:
  FeatureProjector(Index input_size, std::uint64_t seed, Index dim = 64);

  Index input_size() const { return input_size_; }
  Index dim() const { return matrix_.rows(); }

  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> operator()(const Tensor<Scalar>& x) const;
  /// One projected row per leading-axis slice of `batch`.
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> project_batch(const Tensor<Scalar>& batch) const;

 private:
  Index input_size_;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> matrix_;
};

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> feature_projection(const Tensor<Scalar>& x, std::uint64_t seed,
                                                            Index dim = 64);

inline constexpr float kDefaultDiffThreshold = 8.0f / 255.0f;

struct ImageDiff {
  Image overlay;
  Index deviating = 0;
  double fraction = 0.0;
};

/// Grayscale copy of `baseline` with every pixel whose largest per-channel
/// absolute difference exceeds `threshold` painted magenta.
ImageDiff image_diff(const Image& baseline, const Image& variant, float threshold = kDefaultDiffThreshold);

extern template struct GaussianSummary<float>;
extern template struct GaussianSummary<double>;
extern template class FeatureProjector<float>;
extern template class FeatureProjector<double>;

}  // namespace ditopt
