#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ditopt/dit/forward.hpp"
#include "ditopt/numerics/optim.hpp"

namespace ditopt {

/// Discrete DDPM variance schedule. Stored in double regardless of the
/// model scalar.
class NoiseSchedule {
 public:
  /// Linear betas from beta_start to beta_end over `steps` steps.
  static NoiseSchedule linear(Index steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);
  /// Arbitrary betas, each in (0, 1).
  explicit NoiseSchedule(std::vector<double> betas);

  Index steps() const { return static_cast<Index>(betas_.size()); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  double beta(Index t) const;
  double alpha_bar(Index t) const;

  /// Sub-schedule over `count` evenly spaced original timesteps, with betas
  /// recomputed so the cumulative products match at the kept steps.
  NoiseSchedule respaced(Index count) const;
  /// Original timestep of each step of a respaced schedule.
  const std::vector<Index>& timestep_map() const { return timestep_map_; }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  std::vector<Index> timestep_map_;
};

/// sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, Index t, const Tensor<S>& eps, const NoiseSchedule& schedule);

/// Per-sample timesteps; x0 and eps are [B x ...].
template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, std::span<const Index> t, const Tensor<S>& eps, const NoiseSchedule& schedule);

/// First `channels` channels of a [B x 2C x H x W] prediction.
template <typename S>
Var<S> epsilon_part(const Var<S>& model_out, Index channels);

/// MSE between eps and the epsilon half of a model output.
template <typename S>
Var<S> epsilon_mse(const Var<S>& model_out, const Tensor<S>& eps);

/// One training example set: clean inputs, timesteps, labels (already
/// passed through label dropout) and the noise draw.
template <typename S>
struct TrainBatch {
  Tensor<S> x0;
  std::vector<Index> t;
  std::vector<Index> y;
  Tensor<S> eps;
};

/// Draws `batch` images uniformly from a dataset [M x C x H x W], timesteps
/// uniformly from [0, T), eps ~ N(0, 1), and applies cfg label dropout.
template <typename S>
TrainBatch<S> sample_batch(const Tensor<S>& images, std::span<const Index> labels, Index batch,
                           const NoiseSchedule& schedule, double cfg_dropout, Rng& rng);

template <typename S>
struct DiffusionTerms {
  Var<S> l_diff;
  Var<S> l_balance;  // invalid when the model has no MoE layers
  ForwardResult<S> forward;
};

/// Noises the batch and evaluates the eps-MSE objective (plus the routing
/// balance term for MoE models).
template <typename S, typename Model>
DiffusionTerms<S> diffusion_terms(Tape<S>& tape, Model& model, const TrainBatch<S>& batch,
                                  const NoiseSchedule& schedule);

/// Scalar diffusion loss for x0 noised with eps at timesteps t.
template <typename S>
S diffusion_loss(const DiTModel<S>& model, const Tensor<S>& x0, std::span<const Index> t, std::span<const Index> y,
                 const Tensor<S>& eps, const NoiseSchedule& schedule);

struct StepLosses {
  double loss = 0;
  double l_diff = 0;
  double l_kd = 0;
  double l_balance = 0;
};

/// Forward, backward and one optimizer update on l_diff (+ l_balance).
template <typename S>
StepLosses diffusion_train_step(DiTModel<S>& model, AdamW<S>& optimizer, const TrainBatch<S>& batch,
                                const NoiseSchedule& schedule);

/// eps_uncond + s (eps_cond - eps_uncond).
template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_cond, const Tensor<S>& eps_uncond, S scale);

struct SamplerOptions {
  Index steps = 250;
  double cfg_scale = 4.0;
  std::uint64_t seed = 0;
  bool clip = true;  // clamp predicted x0 and the final sample to [-1, 1]
};

/// Model call: (x_t [B x C x H x W], timesteps, labels) -> [B x Co x H x W].
template <typename S>
using Denoiser = std::function<Tensor<S>(const Tensor<S>&, std::span<const Index>, std::span<const Index>)>;

template <typename S>
struct SampleResult {
  Tensor<S> images;
  Index model_calls = 0;
};

/// Ancestral DDPM from pure noise with posterior variance beta_t. With
/// cfg_scale != 1 each step runs one doubled batch (labels, then nulls).
template <typename S>
SampleResult<S> ddpm_sample_loop(const Denoiser<S>& denoise, std::span<const Index> labels, Index channels,
                                 Index size, const NoiseSchedule& schedule, const SamplerOptions& options);

template <typename S>
SampleResult<S> ddpm_sample(const DiTModel<S>& model, std::span<const Index> labels, const NoiseSchedule& schedule,
                            const SamplerOptions& options);

}  // namespace ditopt
