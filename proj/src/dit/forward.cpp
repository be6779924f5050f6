#include "ditopt/dit/forward.hpp"

#include <cmath>

#include "ditopt/error.hpp"
#include "ditopt/numerics/mac_counter.hpp"
#include "ditopt/numerics/ops.hpp"

namespace ditopt {

namespace {

template <typename S, typename Model>
ModelVars<S> bind_all(Tape<S>& tape, Model& model) {
  const ModelSlots& s = model.slots();
  auto bind = [&](Slot slot) { return slot == kNoSlot ? Var<S>() : tape.bind(model.param(slot)); };
  auto bind_mlp = [&](const MlpSlots& m) { return MlpParams<S>{bind(m.w1), bind(m.b1), bind(m.w2), bind(m.b2)}; };
  ModelVars<S> v;
  v.patch_w = bind(s.patch_w);
  v.patch_b = bind(s.patch_b);
  v.pos_embed = bind(s.pos_embed);
  v.t_w1 = bind(s.t_w1);
  v.t_b1 = bind(s.t_b1);
  v.t_w2 = bind(s.t_w2);
  v.t_b2 = bind(s.t_b2);
  v.label_table = bind(s.label_table);
  for (const BlockSlots& b : s.blocks) {
    BlockVars<S> bv;
    bv.ada_w = bind(b.ada_w);
    bv.ada_b = bind(b.ada_b);
    const AttentionSlots& a = b.attn;
    bv.attn = AttentionParams<S>{bind(a.wq), bind(a.bq), bind(a.wk),         bind(a.bk),        bind(a.wv),
                                 bind(a.bv), bind(a.wo), bind(a.bo), bind(a.dwc_kernel), bind(a.dwc_bias)};
    bv.moe = b.moe;
    if (b.moe) {
      bv.experts.router = bind(b.router);
      for (const auto& e : b.experts) bv.experts.experts.push_back(bind_mlp(e));
      for (const auto& e : b.shared) bv.experts.shared.push_back(bind_mlp(e));
    } else {
      bv.mlp = bind_mlp(b.mlp);
    }
    v.blocks.push_back(std::move(bv));
  }
  v.final_ada_w = bind(s.final_ada_w);
  v.final_ada_b = bind(s.final_ada_b);
  v.final_w = bind(s.final_w);
  v.final_b = bind(s.final_b);
  return v;
}

}  // namespace

template <typename S>
ModelVars<S> bind_model(Tape<S>& tape, DiTModel<S>& model) {
  return bind_all<S>(tape, model);
}

template <typename S>
ModelVars<S> bind_model(Tape<S>& tape, const DiTModel<S>& model) {
  return bind_all<S>(tape, model);
}

template <typename S>
Tensor<S> timestep_frequencies(std::span<const Index> t, Index dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep embedding dim must be even, got " + std::to_string(dim));
  const Index half = dim / 2;
  Tensor<S> out(Shape{static_cast<Index>(t.size()), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (t[b] < 0) throw InputError("negative timestep " + std::to_string(t[b]));
    S* row = out.data() + static_cast<Index>(b) * dim;
    for (Index i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[b]) * freq;
      row[i] = static_cast<S>(std::cos(arg));
      row[half + i] = static_cast<S>(std::sin(arg));
    }
  }
  return out;
}

template <typename S>
Var<S> timestep_embed(const ModelVars<S>& vars, std::span<const Index> t, Index dim) {
  auto freqs = vars.t_w1.tape().constant(timestep_frequencies<S>(t, dim));
  return linear(silu(linear(freqs, vars.t_w1, vars.t_b1)), vars.t_w2, vars.t_b2);
}

std::vector<Index> drop_labels(std::span<const Index> y, double dropout, Rng& rng) {
  std::vector<Index> out(y.begin(), y.end());
  for (auto& label : out) {
    if (dropout >= 1.0 || (dropout > 0.0 && rng.uniform() < dropout)) label = kNullLabel;
  }
  return out;
}

template <typename S>
Var<S> label_embed(const ModelVars<S>& vars, const ModelConfig& config, std::span<const Index> y, bool training,
                   Rng* rng) {
  std::vector<Index> labels(y.begin(), y.end());
  if (training && config.cfg_dropout > 0.0) {
    if (config.cfg_dropout < 1.0 && rng == nullptr) throw ContractError("label dropout needs an Rng");
    Rng unused(0);
    labels = drop_labels(y, config.cfg_dropout, rng ? *rng : unused);
  }
  const Index C = vars.label_table.cols();
  std::vector<Index> idx;
  idx.reserve(labels.size() * static_cast<std::size_t>(C));
  for (Index label : labels) {
    if (label != kNullLabel && (label < 0 || label >= config.num_classes)) {
      throw InputError("label " + std::to_string(label) + " outside [0, " + std::to_string(config.num_classes) + ")");
    }
    const Index row = label == kNullLabel ? config.num_classes : label;
    for (Index c = 0; c < C; ++c) idx.push_back(row * C + c);
  }
  return gather(vars.label_table, std::move(idx), Shape{static_cast<Index>(labels.size()), C});
}

template <typename S>
Var<S> repeat_per_token(const Var<S>& v, Index tokens) {
  const Index batch = v.rows(), C = v.cols();
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(batch * tokens * C));
  for (Index b = 0; b < batch; ++b)
    for (Index n = 0; n < tokens; ++n)
      for (Index c = 0; c < C; ++c) idx.push_back(b * C + c);
  return gather(v, std::move(idx), Shape{batch * tokens, C});
}

template <typename S>
Var<S> modulate(const Var<S>& x, const Var<S>& shift, const Var<S>& scale, Index tokens) {
  return add(mul(x, add_scalar(repeat_per_token(scale, tokens), S(1))), repeat_per_token(shift, tokens));
}

template <typename S>
Var<S> dit_block_forward(const ModelConfig& config, const BlockVars<S>& block, const Var<S>& x, const Var<S>& cond,
                         Index batch, RoutingStats<S>* stats) {
  const Index C = config.hidden, N = config.tokens();
  if (x.value().rank() != 2 || x.rows() != batch * N || x.cols() != C) {
    throw ShapeError("dit block: x " + shape_string(x.shape()) + " is not [" + std::to_string(batch * N) + " x " +
                     std::to_string(C) + "]");
  }
  if (cond.value().rank() != 2 || cond.rows() != batch || cond.cols() != C) {
    throw ShapeError("dit block: cond " + shape_string(cond.shape()) + " is not [B x C]");
  }
  Var<S> mod;
  {
    MacCategory cat("adaln");
    mod = linear(silu(cond), block.ada_w, block.ada_b);
  }
  auto chunk = [&](Index i) { return slice_cols(mod, i * C, C); };
  const AttentionShape shape{batch, N, config.grid(), config.grid(), config.heads};

  Var<S> h;
  {
    MacCategory cat("attention");
    h = attention_forward(config.attention, block.attn, modulate(layer_norm(x), chunk(0), chunk(1), N), shape);
  }
  auto x1 = add(x, mul(repeat_per_token(chunk(2), N), h));

  Var<S> m;
  {
    MacCategory cat("mlp");
    auto in = modulate(layer_norm(x1), chunk(3), chunk(4), N);
    if (block.moe) {
      if (!config.moe) throw ConfigError("MoE block in a config without MoE settings");
      m = moe_layer_forward(block.experts, in, config.moe->active, stats);
    } else {
      m = mlp_forward(block.mlp, in);
    }
  }
  return add(x1, mul(repeat_per_token(chunk(5), N), m));
}

template <typename S>
Tensor<S> patchify(const Tensor<S>& images, Index patch) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3) || images.dim(2) % patch != 0) {
    throw ShapeError("patchify: expected [B x C x H x H] with H divisible by " + std::to_string(patch) + ", got " +
                     shape_string(images.shape()));
  }
  const Index B = images.dim(0), Cin = images.dim(1), H = images.dim(2), G = H / patch;
  const Index feat = Cin * patch * patch;
  Tensor<S> out(Shape{B * G * G, feat});
  for (Index b = 0; b < B; ++b)
    for (Index gy = 0; gy < G; ++gy)
      for (Index gx = 0; gx < G; ++gx) {
        S* row = out.data() + ((b * G + gy) * G + gx) * feat;
        for (Index c = 0; c < Cin; ++c)
          for (Index py = 0; py < patch; ++py)
            for (Index px = 0; px < patch; ++px)
              row[(c * patch + py) * patch + px] = images[((b * Cin + c) * H + gy * patch + py) * H + gx * patch + px];
      }
  return out;
}

template <typename S>
Var<S> unpatchify(const Var<S>& tokens, Index batch, Index channels, Index patch, Index grid) {
  const Index feat = patch * patch * channels, H = grid * patch;
  if (tokens.rows() != batch * grid * grid || tokens.cols() != feat) {
    throw ShapeError("unpatchify: tokens " + shape_string(tokens.shape()) + " do not match the grid");
  }
  std::vector<Index> idx(static_cast<std::size_t>(batch * channels * H * H));
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c)
      for (Index yy = 0; yy < H; ++yy)
        for (Index xx = 0; xx < H; ++xx) {
          const Index token = (b * grid + yy / patch) * grid + xx / patch;
          const Index f = ((yy % patch) * patch + xx % patch) * channels + c;
          idx[static_cast<std::size_t>(((b * channels + c) * H + yy) * H + xx)] = token * feat + f;
        }
  return gather(tokens, std::move(idx), Shape{batch, channels, H, H});
}

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, const ModelVars<S>& vars, const ModelConfig& config,
                               const Tensor<S>& x, std::span<const Index> t, std::span<const Index> y,
                               ForwardOptions options) {
  if (x.rank() != 4 || x.dim(1) != config.in_channels || x.dim(2) != config.input_size ||
      x.dim(3) != config.input_size) {
    throw ShapeError("model_forward: input " + shape_string(x.shape()) + " is not [B x " +
                     std::to_string(config.in_channels) + " x " + std::to_string(config.input_size) + " x " +
                     std::to_string(config.input_size) + "]");
  }
  const Index B = x.dim(0), N = config.tokens();
  if (static_cast<Index>(t.size()) != B || static_cast<Index>(y.size()) != B) {
    throw ShapeError("model_forward: need one timestep and one label per sample");
  }
  ForwardResult<S> result;
  Var<S> h, cond;
  {
    MacCategory cat("embeddings");
    auto tokens = linear(tape.constant(patchify(x, config.patch)), vars.patch_w, vars.patch_b);
    std::vector<Var<S>> pos(static_cast<std::size_t>(B), vars.pos_embed);
    h = add(tokens, concat_rows<S>(pos));
    cond = add(timestep_embed(vars, t, config.frequency_dim), label_embed(vars, config, y, options.training, options.rng));
  }
  for (const auto& block : vars.blocks) {
    RoutingStats<S> stats;
    h = dit_block_forward(config, block, h, cond, B, block.moe ? &stats : nullptr);
    if (block.moe) result.routing.push_back(std::move(stats));
  }
  Var<S> mod;
  {
    MacCategory cat("adaln");
    mod = linear(silu(cond), vars.final_ada_w, vars.final_ada_b);
  }
  const Index C = config.hidden;
  auto out_tokens = modulate(layer_norm(h), slice_cols(mod, 0, C), slice_cols(mod, C, C), N);
  {
    MacCategory cat("final");
    out_tokens = linear(out_tokens, vars.final_w, vars.final_b);
  }
  result.out = unpatchify(out_tokens, B, config.out_channels(), config.patch, config.grid());
  return result;
}

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, DiTModel<S>& model, const Tensor<S>& x, std::span<const Index> t,
                               std::span<const Index> y, ForwardOptions options) {
  return model_forward(tape, bind_model(tape, model), model.config(), x, t, y, options);
}

template <typename S>
ForwardResult<S> model_forward(Tape<S>& tape, const DiTModel<S>& model, const Tensor<S>& x,
                               std::span<const Index> t, std::span<const Index> y, ForwardOptions options) {
  return model_forward(tape, bind_model(tape, model), model.config(), x, t, y, options);
}

template <typename S>
Tensor<S> predict(const DiTModel<S>& model, const Tensor<S>& x, std::span<const Index> t, std::span<const Index> y) {
  Tape<S> tape(false);
  return model_forward(tape, model, x, t, y).out.value();
}

template <typename S>
Tensor<S> timestep_embedding(const DiTModel<S>& model, Index t) {
  Tape<S> tape(false);
  auto vars = bind_model(tape, model);
  const Index ts[] = {t};
  return timestep_embed(vars, std::span<const Index>(ts), model.config().frequency_dim).value().reshaped(
      {model.config().hidden});
}

#define DITOPT_INSTANTIATE_FORWARD(S)                                                                            \
  template ModelVars<S> bind_model(Tape<S>&, DiTModel<S>&);                                                      \
  template ModelVars<S> bind_model(Tape<S>&, const DiTModel<S>&);                                                \
  template Tensor<S> timestep_frequencies<S>(std::span<const Index>, Index);                                     \
  template Var<S> timestep_embed(const ModelVars<S>&, std::span<const Index>, Index);                            \
  template Var<S> label_embed(const ModelVars<S>&, const ModelConfig&, std::span<const Index>, bool, Rng*);      \
  template Var<S> repeat_per_token(const Var<S>&, Index);                                                        \
  template Var<S> modulate(const Var<S>&, const Var<S>&, const Var<S>&, Index);                                  \
  template Var<S> dit_block_forward(const ModelConfig&, const BlockVars<S>&, const Var<S>&, const Var<S>&, Index, \
                                    RoutingStats<S>*);                                                           \
  template Tensor<S> patchify(const Tensor<S>&, Index);                                                          \
  template Var<S> unpatchify(const Var<S>&, Index, Index, Index, Index);                                         \
  template ForwardResult<S> model_forward(Tape<S>&, const ModelVars<S>&, const ModelConfig&, const Tensor<S>&,   \
                                          std::span<const Index>, std::span<const Index>, ForwardOptions);       \
  template ForwardResult<S> model_forward(Tape<S>&, DiTModel<S>&, const Tensor<S>&, std::span<const Index>,      \
                                          std::span<const Index>, ForwardOptions);                               \
  template ForwardResult<S> model_forward(Tape<S>&, const DiTModel<S>&, const Tensor<S>&,                        \
                                          std::span<const Index>, std::span<const Index>, ForwardOptions);       \
  template Tensor<S> predict(const DiTModel<S>&, const Tensor<S>&, std::span<const Index>,                       \
                             std::span<const Index>);                                                            \
  template Tensor<S> timestep_embedding(const DiTModel<S>&, Index);

DITOPT_INSTANTIATE_FORWARD(float)
DITOPT_INSTANTIATE_FORWARD(double)

}  // namespace ditopt
