#pragma once

#include <span>
#include <vector>

#include "ditopt/numerics/tape.hpp"

namespace ditopt {

struct MoEConfig {
  Index experts = 8;         // E
  Index active = 2;          // K
  Index frequency = 1;       // MoE in blocks 0, f, 2f, ...
  Index shared_experts = 0;  // always-on, unweighted
  double balance_alpha = 0.01;

  void validate() const;
  bool is_moe_block(Index block) const { return block % frequency == 0; }
  bool operator==(const MoEConfig&) const = default;
};

/// Two-layer GELU MLP, weights [out x in].
template <typename S>
struct MlpParams {
  Var<S> w1, b1, w2, b2;
};

template <typename S>
Var<S> mlp_forward(const MlpParams<S>& w, const Var<S>& x);

template <typename S>
struct MoEParams {
  Var<S> router;  // [E x C], no bias
  std::vector<MlpParams<S>> experts;
  std::vector<MlpParams<S>> shared;
};

template <typename S>
struct Routing {
  Var<S> probs;          // full softmax over experts, [T x E]
  Var<S> gates;          // top-K renormalized, zero elsewhere
  Tensor<S> assignment;  // 1 where an expert was kept, else 0
};

/// Softmax over E logits per token, keep the top-K (ties to the lower
/// expert index), renormalize the kept gates to sum to 1.
template <typename S>
Routing<S> route_topk(const Var<S>& logits, Index k);

/// Per-forward statistics consumed by balance_loss().
template <typename S>
struct RoutingStats {
  Var<S> probs;          // P(t, i)
  Tensor<S> assignment;  // I(t, i)
  Index active = 1;      // K
};

/// x[T x C] -> sum over kept experts of gate * expert(x), plus shared experts.
template <typename S>
Var<S> moe_layer_forward(const MoEParams<S>& w, const Var<S>& x, Index k, RoutingStats<S>* stats = nullptr);

/// alpha * E * sum_i f_i * mean_t P(t, i), with f_i = sum_t I(t, i) / (K T).
/// Gradient flows through the probabilities; loads are treated as constants.
template <typename S>
Var<S> balance_loss(const RoutingStats<S>& stats, S alpha);

/// Mean of the per-layer losses. Empty input -> InputError.
template <typename S>
Var<S> balance_loss(std::span<const RoutingStats<S>> stats, S alpha);

}  // namespace ditopt
