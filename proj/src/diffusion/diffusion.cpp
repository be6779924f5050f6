#include "ditopt/diffusion/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "ditopt/error.hpp"
#include "ditopt/numerics/ops.hpp"

namespace ditopt {

NoiseSchedule NoiseSchedule::linear(Index steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (Index i = 0; i < steps; ++i) {
    betas[static_cast<std::size_t>(i)] =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1);
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ConfigError("empty noise schedule");
  double prod = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) throw ConfigError("beta outside (0, 1)");
    prod *= 1.0 - betas_[i];
    alpha_bars_.push_back(prod);
    timestep_map_.push_back(static_cast<Index>(i));
  }
}

double NoiseSchedule::beta(Index t) const {
  if (t < 0 || t >= steps()) throw InputError("timestep " + std::to_string(t) + " outside [0, " +
                                              std::to_string(steps()) + ")");
  return betas_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha_bar(Index t) const {
  if (t < 0 || t >= steps()) throw InputError("timestep " + std::to_string(t) + " outside [0, " +
                                              std::to_string(steps()) + ")");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

NoiseSchedule NoiseSchedule::respaced(Index count) const {
  if (count < 1 || count > steps()) {
    throw ConfigError("sampling steps " + std::to_string(count) + " outside [1, " + std::to_string(steps()) + "]");
  }
  std::vector<Index> keep;
  if (count == 1) {
    keep.push_back(0);
  } else {
    const double stride = static_cast<double>(steps() - 1) / static_cast<double>(count - 1);
    for (Index i = 0; i < count; ++i) keep.push_back(static_cast<Index>(std::llround(static_cast<double>(i) * stride)));
  }
  std::vector<double> betas;
  double last = 1.0;
  for (Index t : keep) {
    const double ab = alpha_bars_[static_cast<std::size_t>(t)];
    betas.push_back(1.0 - ab / last);
    last = ab;
  }
  NoiseSchedule out(std::move(betas));
  for (std::size_t i = 0; i < keep.size(); ++i) out.timestep_map_[i] = timestep_map_[static_cast<std::size_t>(keep[i])];
  return out;
}

template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, Index t, const Tensor<S>& eps, const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape()) throw ShapeError("q_sample: eps shape differs from x0");
  const double ab = schedule.alpha_bar(t);
  const S a = static_cast<S>(std::sqrt(ab)), b = static_cast<S>(std::sqrt(1.0 - ab));
  Tensor<S> out(x0.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

template <typename S>
Tensor<S> q_sample(const Tensor<S>& x0, std::span<const Index> t, const Tensor<S>& eps, const NoiseSchedule& schedule) {
  if (x0.shape() != eps.shape()) throw ShapeError("q_sample: eps shape differs from x0");
  if (x0.rank() < 1 || x0.dim(0) != static_cast<Index>(t.size())) throw ShapeError("q_sample: one timestep per sample");
  const Index per = x0.dim(0) == 0 ? 0 : x0.numel() / x0.dim(0);
  Tensor<S> out(x0.shape());
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double ab = schedule.alpha_bar(t[b]);
    const S a = static_cast<S>(std::sqrt(ab)), s = static_cast<S>(std::sqrt(1.0 - ab));
    for (Index i = static_cast<Index>(b) * per; i < static_cast<Index>(b + 1) * per; ++i) out[i] = a * x0[i] + s * eps[i];
  }
  return out;
}

template <typename S>
Var<S> epsilon_part(const Var<S>& model_out, Index channels) {
  const Tensor<S>& v = model_out.value();
  if (v.rank() != 4 || v.dim(1) < channels) throw ShapeError("epsilon_part: output " + shape_string(v.shape()));
  if (v.dim(1) == channels) return model_out;
  const Index B = v.dim(0), Co = v.dim(1), HW = v.dim(2) * v.dim(3);
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(B * channels * HW));
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < channels; ++c)
      for (Index i = 0; i < HW; ++i) idx.push_back((b * Co + c) * HW + i);
  return gather(model_out, std::move(idx), Shape{B, channels, v.dim(2), v.dim(3)});
}

template <typename S>
Var<S> epsilon_mse(const Var<S>& model_out, const Tensor<S>& eps) {
  if (eps.rank() != 4) throw ShapeError("epsilon_mse: eps must be [B x C x H x W]");
  auto pred = epsilon_part(model_out, eps.dim(1));
  return mse(pred, model_out.tape().constant(eps));
}

template <typename S>
TrainBatch<S> sample_batch(const Tensor<S>& images, std::span<const Index> labels, Index batch,
                           const NoiseSchedule& schedule, double cfg_dropout, Rng& rng) {
  if (images.rank() != 4 || images.dim(0) == 0) throw InputError("sample_batch: empty or malformed dataset");
  if (static_cast<Index>(labels.size()) != images.dim(0)) throw InputError("sample_batch: one label per image");
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  const Index per = images.numel() / images.dim(0);
  TrainBatch<S> out;
  out.x0 = Tensor<S>(Shape{batch, images.dim(1), images.dim(2), images.dim(3)});
  out.eps = Tensor<S>(out.x0.shape());
  for (Index b = 0; b < batch; ++b) {
    const Index pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(images.dim(0))));
    std::copy_n(images.data() + pick * per, per, out.x0.data() + b * per);
    out.t.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(schedule.steps()))));
    out.y.push_back(labels[static_cast<std::size_t>(pick)]);
  }
  for (auto& e : out.eps.values()) e = static_cast<S>(rng.normal());
  out.y = drop_labels(out.y, cfg_dropout, rng);
  return out;
}

template <typename S, typename Model>
DiffusionTerms<S> diffusion_terms(Tape<S>& tape, Model& model, const TrainBatch<S>& batch,
                                  const NoiseSchedule& schedule) {
  const Tensor<S> xt = q_sample(batch.x0, batch.t, batch.eps, schedule);
  DiffusionTerms<S> terms;
  terms.forward = model_forward(tape, model, xt, batch.t, batch.y);
  terms.l_diff = epsilon_mse(terms.forward.out, batch.eps);
  const auto& cfg = model.config();
  if (cfg.moe && !terms.forward.routing.empty()) {
    terms.l_balance = balance_loss<S>(terms.forward.routing, static_cast<S>(cfg.moe->balance_alpha));
  }
  return terms;
}

template <typename S>
S diffusion_loss(const DiTModel<S>& model, const Tensor<S>& x0, std::span<const Index> t, std::span<const Index> y,
                 const Tensor<S>& eps, const NoiseSchedule& schedule) {
  Tape<S> tape(false);
  const auto out = model_forward(tape, model, q_sample(x0, t, eps, schedule), t, y).out;
  return epsilon_mse(out, eps).item();
}

template <typename S>
StepLosses diffusion_train_step(DiTModel<S>& model, AdamW<S>& optimizer, const TrainBatch<S>& batch,
                                const NoiseSchedule& schedule) {
  model.zero_grad();
  Tape<S> tape;
  auto terms = diffusion_terms(tape, model, batch, schedule);
  auto loss = terms.l_balance.valid() ? add(terms.l_diff, terms.l_balance) : terms.l_diff;
  StepLosses out;
  out.l_diff = static_cast<double>(terms.l_diff.item());
  out.l_balance = terms.l_balance.valid() ? static_cast<double>(terms.l_balance.item()) : 0.0;
  out.loss = static_cast<double>(loss.item());
  if (!std::isfinite(out.loss)) throw NumericError("training loss is not finite");
  tape.backward(loss);
  auto params = model.trainable();
  optimizer.step(params);
  return out;
}

template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& eps_cond, const Tensor<S>& eps_uncond, S scale) {
  if (eps_cond.shape() != eps_uncond.shape()) {
    throw ShapeError("cfg_combine: " + shape_string(eps_cond.shape()) + " vs " + shape_string(eps_uncond.shape()));
  }
  Tensor<S> out(eps_cond.shape());
  for (Index i = 0; i < out.numel(); ++i) out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
  return out;
}

namespace {

template <typename S>
Tensor<S> leading(const Tensor<S>& t, Index count) {
  const Index per = t.numel() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = count;
  return Tensor<S>(shape, std::vector<S>(t.data(), t.data() + count * per));
}

template <typename S>
Tensor<S> trailing(const Tensor<S>& t, Index count) {
  const Index per = t.numel() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = count;
  return Tensor<S>(shape, std::vector<S>(t.data() + (t.dim(0) - count) * per, t.data() + t.numel()));
}

// Channels [0, c) of [B x Co x H x W].
template <typename S>
Tensor<S> first_channels(const Tensor<S>& t, Index c) {
  const Index B = t.dim(0), Co = t.dim(1), HW = t.dim(2) * t.dim(3);
  Tensor<S> out(Shape{B, c, t.dim(2), t.dim(3)});
  for (Index b = 0; b < B; ++b) std::copy_n(t.data() + b * Co * HW, c * HW, out.data() + b * c * HW);
  return out;
}

}  // namespace

template <typename S>
SampleResult<S> ddpm_sample_loop(const Denoiser<S>& denoise, std::span<const Index> labels, Index channels,
                                 Index size, const NoiseSchedule& schedule, const SamplerOptions& options) {
  const NoiseSchedule sched = schedule.respaced(options.steps);
  const Index B = static_cast<Index>(labels.size());
  const bool guided = options.cfg_scale != 1.0;
  Rng rng(options.seed);
  SampleResult<S> result;
  Tensor<S> x(Shape{B, channels, size, size});
  for (auto& v : x.values()) v = static_cast<S>(rng.normal());

  std::vector<Index> y(labels.begin(), labels.end());
  if (guided) y.insert(y.end(), static_cast<std::size_t>(B), kNullLabel);

  for (Index i = sched.steps() - 1; i >= 0; --i) {
    const Index model_t = sched.timestep_map()[static_cast<std::size_t>(i)];
    std::vector<Index> ts(y.size(), model_t);
    Tensor<S> eps;
    if (guided) {
      Tensor<S> doubled(Shape{2 * B, channels, size, size});
      std::copy_n(x.data(), x.numel(), doubled.data());
      std::copy_n(x.data(), x.numel(), doubled.data() + x.numel());
      const Tensor<S> out = first_channels(denoise(doubled, ts, y), channels);
      ++result.model_calls;
      eps = cfg_combine(leading(out, B), trailing(out, B), static_cast<S>(options.cfg_scale));
    } else {
      eps = first_channels(denoise(x, ts, y), channels);
      ++result.model_calls;
    }
    const double ab = sched.alpha_bar(i);
    const double ab_prev = i > 0 ? sched.alpha_bar(i - 1) : 1.0;
    const double beta = sched.beta(i);
    const double c0 = beta * std::sqrt(ab_prev) / (1.0 - ab);
    const double ct = (1.0 - ab_prev) * std::sqrt(1.0 - beta) / (1.0 - ab);
    const double sigma = std::sqrt(beta);
    for (Index k = 0; k < x.numel(); ++k) {
      double x0 = (static_cast<double>(x[k]) - std::sqrt(1.0 - ab) * static_cast<double>(eps[k])) / std::sqrt(ab);
      if (options.clip) x0 = std::clamp(x0, -1.0, 1.0);
      double mean = c0 * x0 + ct * static_cast<double>(x[k]);
      if (i > 0) mean += sigma * rng.normal();
      x[k] = static_cast<S>(mean);
    }
    if (!x.all_finite()) throw NumericError("sampler produced non-finite values at step " + std::to_string(i));
  }
  if (options.clip) {
    for (auto& v : x.values()) v = std::clamp(v, S(-1), S(1));
  }
  result.images = std::move(x);
  return result;
}

template <typename S>
SampleResult<S> ddpm_sample(const DiTModel<S>& model, std::span<const Index> labels, const NoiseSchedule& schedule,
                            const SamplerOptions& options) {
  const auto& cfg = model.config();
  for (Index y : labels) {
    if (y != kNullLabel && (y < 0 || y >= cfg.num_classes)) {
      throw InputError("class " + std::to_string(y) + " outside [0, " + std::to_string(cfg.num_classes) + ")");
    }
  }
  Denoiser<S> fn = [&model](const Tensor<S>& x, std::span<const Index> t, std::span<const Index> y) {
    return predict(model, x, t, y);
  };
  return ddpm_sample_loop(fn, labels, cfg.in_channels, cfg.input_size, schedule, options);
}

#define DITOPT_INSTANTIATE_DIFFUSION(S)                                                                          \
  template Tensor<S> q_sample(const Tensor<S>&, Index, const Tensor<S>&, const NoiseSchedule&);                  \
  template Tensor<S> q_sample(const Tensor<S>&, std::span<const Index>, const Tensor<S>&, const NoiseSchedule&); \
  template Var<S> epsilon_part(const Var<S>&, Index);                                                            \
  template Var<S> epsilon_mse(const Var<S>&, const Tensor<S>&);                                                  \
  template TrainBatch<S> sample_batch(const Tensor<S>&, std::span<const Index>, Index, const NoiseSchedule&,     \
                                      double, Rng&);                                                             \
  template DiffusionTerms<S> diffusion_terms(Tape<S>&, DiTModel<S>&, const TrainBatch<S>&, const NoiseSchedule&); \
  template DiffusionTerms<S> diffusion_terms(Tape<S>&, const DiTModel<S>&, const TrainBatch<S>&,                 \
                                             const NoiseSchedule&);                                              \
  template S diffusion_loss(const DiTModel<S>&, const Tensor<S>&, std::span<const Index>, std::span<const Index>, \
                            const Tensor<S>&, const NoiseSchedule&);                                             \
  template StepLosses diffusion_train_step(DiTModel<S>&, AdamW<S>&, const TrainBatch<S>&, const NoiseSchedule&); \
  template Tensor<S> cfg_combine(const Tensor<S>&, const Tensor<S>&, S);                                         \
  template SampleResult<S> ddpm_sample_loop(const Denoiser<S>&, std::span<const Index>, Index, Index,            \
                                            const NoiseSchedule&, const SamplerOptions&);                        \
  template SampleResult<S> ddpm_sample(const DiTModel<S>&, std::span<const Index>, const NoiseSchedule&,         \
                                       const SamplerOptions&);

DITOPT_INSTANTIATE_DIFFUSION(float)
DITOPT_INSTANTIATE_DIFFUSION(double)

}  // namespace ditopt
