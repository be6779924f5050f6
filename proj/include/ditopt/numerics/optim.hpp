#pragma once

#include <span>
#include <vector>

#include "ditopt/numerics/tape.hpp"

namespace ditopt {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay. Moment buffers are keyed by the
/// position of each parameter in the span passed to step(), so the same
/// parameter list must be passed every time. Frozen parameters are skipped.
template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void step(std::span<Parameter<S>* const> params);
  long steps_taken() const noexcept { return step_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  AdamWConfig config_;
  long step_ = 0;
  std::vector<Tensor<S>> first_;
  std::vector<Tensor<S>> second_;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace ditopt
