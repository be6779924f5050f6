#pragma once

#include <vector>

#include "ditopt/attention/variant.hpp"
#include "ditopt/numerics/tape.hpp"

namespace ditopt {

/// Tape-bound attention weights, stored [out x in] like every linear here.
///
///   baseline, mediated: wq/wk/wv C x C, wo C x C
///   shallow:            wq/wk/wv C/2 x C, wo C x C/2
///   focused:            wq C x C, wk/wv C/G x C, wo C x C
///
/// All projections carry biases. dwc_kernel [C x k x k] and dwc_bias [C] are
/// only read by the mediated variant.
template <typename S>
struct AttentionParams {
  Var<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Var<S> dwc_kernel, dwc_bias;
};

/// Token-batched geometry: x is [batch*tokens x C], grid_h*grid_w == tokens.
struct AttentionShape {
  Index batch = 1;
  Index tokens = 1;
  Index grid_h = 1;
  Index grid_w = 1;
  Index heads = 1;
};

/// Dispatches on variant.kind.
template <typename S>
Var<S> attention_forward(const AttentionVariant& variant, const AttentionParams<S>& w, const Var<S>& x,
                         const AttentionShape& shape);

/// softmax(QK^T / sqrt(d)) V per head, concatenated, output-projected.
template <typename S>
Var<S> baseline_mha(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape);

/// Baseline with Q/K/V width C/2; heads have dimension C/(2h).
template <typename S>
Var<S> shallow_attention(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape);

template <typename S>
Var<S> mediated_attention(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape, Index n);

template <typename S>
Var<S> focused_gq_attention(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape,
                            const AttentionVariant& variant);

// Single-head cores on [N x d] matrices, exposed for oracles.

template <typename S>
Var<S> softmax_attention_head(const Var<S>& q, const Var<S>& k, const Var<S>& v);

/// Two-step mediator attention:
///   V_med = softmax(T K^T / sqrt(d)) V,  out = softmax(Q T^T / sqrt(d)) V_med
/// with T = adaptive_avg_pool_tokens(Q, n) unless `mediators` is given.
template <typename S>
Var<S> mediated_attention_head(const Var<S>& q, const Var<S>& k, const Var<S>& v, Index n,
                               const Var<S>* mediators = nullptr);

enum class Association {
  right,  // Q_p (K_p^T [V|1]): linear in N, the production path
  left,   // (Q_p K_p^T) [V|1]: quadratic in N, reference ordering
};

/// Normalized linear attention on already-focused features:
/// out = Q_p(K_p^T V) / (Q_p(K_p^T 1) + eps).
template <typename S>
Var<S> linear_attention_head(const Var<S>& q_focused, const Var<S>& k_focused, const Var<S>& v, S eps,
                             Association order = Association::right);

/// K_p^T [V|1] for one key/value head; shared by the G query heads of a group.
template <typename S>
Var<S> linear_attention_state(const Var<S>& k_focused, const Var<S>& v);

/// Focused attention evaluated with an explicit association order.
template <typename S>
Var<S> focused_gq_attention(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape,
                            const AttentionVariant& variant, Association order);

}  // namespace ditopt
