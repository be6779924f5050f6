#include "ditopt/numerics/optim.hpp"

#include <cmath>

namespace ditopt {

template <typename S>
void AdamW<S>::step(std::span<Parameter<S>* const> params) {
  if (first_.empty()) {
    for (auto* p : params) {
      first_.emplace_back(p->value.shape());
      second_.emplace_back(p->value.shape());
    }
  }
  if (first_.size() != params.size()) throw ContractError("AdamW: parameter list changed between steps");
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<S>& p = *params[k];
    if (p.frozen || p.grad.empty()) continue;
    Tensor<S>& m = first_[k];
    Tensor<S>& v = second_[k];
    for (Index i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      m[i] = static_cast<S>(config_.beta1 * m[i] + (1.0 - config_.beta1) * g);
      v[i] = static_cast<S>(config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double w = p.value[i];
      w -= config_.lr * config_.weight_decay * w;
      w -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      p.value[i] = static_cast<S>(w);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace ditopt
