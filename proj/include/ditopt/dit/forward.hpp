#pragma once

#include <span>
#include <vector>

#include "ditopt/attention/attention.hpp"
#include "ditopt/dit/model.hpp"
#include "ditopt/moe/moe.hpp"
#include "ditopt/rng.hpp"

namespace ditopt {

/// Label value selecting the unconditional (null) embedding row.
inline constexpr Index kNullLabel = -1;

template <typename S>
struct BlockVars {
  Var<S> ada_w, ada_b;
  AttentionParams<S> attn;
  bool moe = false;
  MlpParams<S> mlp;
  MoEParams<S> experts;
};

/// Every model tensor bound to one tape.
template <typename S>
struct ModelVars {
  Var<S> patch_w, patch_b, pos_embed;
  Var<S> t_w1, t_b1, t_w2, t_b2;
  Var<S> label_table;
  std::vector<BlockVars<S>> blocks;
  Var<S> final_ada_w, final_ada_b, final_w, final_b;
};

/// Gradients flow into non-frozen parameters.
template <typename S>
ModelVars<S> bind_model(Tape<S>& tape, DiTModel<S>& model);
/// Read-only binding; nothing receives gradients.
template <typename S>
ModelVars<S> bind_model(Tape<S>& tape, const DiTModel<S>& model);

/// Raw [cos(t w_i) ..., sin(t w_i) ...] features, one row per timestep,
/// w_i = 10000^(-i / (dim/2)).
template <typename S>
Tensor<S> timestep_frequencies(std::span<const Index> t, Index dim);

/// Sinusoid followed by Linear-SiLU-Linear: [B x C].
template <typename S>
Var<S> timestep_embed(const ModelVars<S>& vars, std::span<const Index> t, Index dim);

/// Replaces each label with kNullLabel with probability `dropout`.
std::vector<Index> drop_labels(std::span<const Index> y, double dropout, Rng& rng);

/// Table lookup [B x C]; kNullLabel maps to the last row. With `training`
/// set, labels are first passed through drop_labels(config.cfg_dropout).
template <typename S>
Var<S> label_embed(const ModelVars<S>& vars, const ModelConfig& config, std::span<const Index> y,
                   bool training = false, Rng* rng = nullptr);

/// Broadcast v[B x C] to [B*tokens x C], sample-major.
template <typename S>
Var<S> repeat_per_token(const Var<S>& v, Index tokens);

/// x * (1 + scale) + shift with per-sample shift/scale [B x C].
template <typename S>
Var<S> modulate(const Var<S>& x, const Var<S>& shift, const Var<S>& scale, Index tokens);

/// One adaLN-Zero block on token-batched x[B*N x C] with cond[B x C]:
///   x += gate1 * Attn(modulate(LN(x), shift1, scale1))
///   x += gate2 * MLP (modulate(LN(x), shift2, scale2))
template <typename S>
Var<S> dit_block_forward(const ModelConfig& config, const BlockVars<S>& block, const Var<S>& x, const Var<S>& cond,
                         Index batch, RoutingStats<S>* stats = nullptr);

/// [B x Cin x H x W] -> [B*N x Cin*p*p], token features ordered (c, py, px).
template <typename S>
Tensor<S> patchify(const Tensor<S>& images, Index patch);

/// [B*N x p*p*Co] with features ordered (py, px, c) -> [B x Co x H x W].
template <typename S>
Var<S> unpatchify(const Var<S>& tokens, Index batch, Index channels, Index patch, Index grid);

struct ForwardOptions {
  bool training = false;  // enables label dropout
  Rng* rng = nullptr;     // required when training with cfg_dropout > 0
};

template <typename S>
struct ForwardResult {
  Var<S> out;  // [B x out_channels x H x W]
  std::vector<RoutingStats<S>> routing;
};

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, const ModelVars<S>& vars, const ModelConfig& config,
                               const Tensor<S>& x, std::span<const Index> t, std::span<const Index> y,
                               ForwardOptions options = {});

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, DiTModel<S>& model, const Tensor<S>& x, std::span<const Index> t,
                               std::span<const Index> y, ForwardOptions options = {});

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, const DiTModel<S>& model, const Tensor<S>& x,
                               std::span<const Index> t, std::span<const Index> y, ForwardOptions options = {});

/// Inference convenience on a non-recording tape.
template <typename S>
Tensor<S> predict(const DiTModel<S>& model, const Tensor<S>& x, std::span<const Index> t, std::span<const Index> y);

/// Conditioning path only: timestep MLP output for a single t.
template <typename S>
Tensor<S> timestep_embedding(const DiTModel<S>& model, Index t);

}  // namespace ditopt
