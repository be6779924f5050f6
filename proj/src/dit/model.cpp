#include "ditopt/dit/model.hpp"

#include <cmath>

#include "ditopt/error.hpp"
#include "ditopt/rng.hpp"

namespace ditopt {

template <typename Scalar>
Tensor<Scalar> sincos_pos_embed(Index dim, Index grid) {
  if (dim % 4 != 0) throw ConfigError("sin-cos table needs dim % 4 == 0");
  const Index quarter = dim / 4;
  Tensor<Scalar> table(Shape{grid * grid, dim});
  for (Index row = 0; row < grid; ++row) {
    for (Index col = 0; col < grid; ++col) {
      Scalar* out = table.data() + (row * grid + col) * dim;
      for (Index i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
        out[i] = static_cast<Scalar>(std::sin(static_cast<double>(col) * omega));
        out[quarter + i] = static_cast<Scalar>(std::cos(static_cast<double>(col) * omega));
        out[2 * quarter + i] = static_cast<Scalar>(std::sin(static_cast<double>(row) * omega));
        out[3 * quarter + i] = static_cast<Scalar>(std::cos(static_cast<double>(row) * omega));
      }
    }
  }
  return table;
}

namespace {

enum class Init { xavier, normal02, zero, conv_default };

template <typename Scalar>
class Builder {
 public:
  Builder(std::vector<Parameter<Scalar>>& params, std::uint64_t seed, InitScheme scheme)
      : params_(params), rng_(seed), scheme_(scheme) {}

  Slot add(std::string name, Shape shape, ParamRole role, Init init) {
    Tensor<Scalar> value(shape);
    fill(value, role, init);
    params_.push_back(Parameter<Scalar>{std::move(name), std::move(value), {}, role, role == ParamRole::buffer});
    return params_.size() - 1;
  }

  Slot buffer(std::string name, Tensor<Scalar> value) {
    params_.push_back(Parameter<Scalar>{std::move(name), std::move(value), {}, ParamRole::buffer, true});
    return params_.size() - 1;
  }

  MlpSlots mlp(const std::string& prefix, Index in, Index hidden) {
    MlpSlots s;
    s.w1 = add(prefix + ".fc1.weight", {hidden, in}, ParamRole::linear_weight, Init::xavier);
    s.b1 = add(prefix + ".fc1.bias", {hidden}, ParamRole::bias, Init::zero);
    s.w2 = add(prefix + ".fc2.weight", {in, hidden}, ParamRole::linear_weight, Init::xavier);
    s.b2 = add(prefix + ".fc2.bias", {in}, ParamRole::bias, Init::zero);
    return s;
  }

 private:
  void fill(Tensor<Scalar>& t, ParamRole role, Init init) {
    const Index fan_in = t.rank() >= 2 ? t.numel() / t.dim(0) : t.numel();
    if (scheme_ == InitScheme::random) {
      // Nonzero everywhere so that no block is an identity and every path carries gradient.
      const double bound = role == ParamRole::embedding ? 1.0
                           : role == ParamRole::bias    ? 0.1
                                                        : 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : t.values()) v = static_cast<Scalar>(rng_.uniform(-bound, bound));
      return;
    }
    switch (init) {
      case Init::zero:
        break;
      case Init::normal02:
        for (auto& v : t.values()) v = static_cast<Scalar>(rng_.normal(0.0, 0.02));
        break;
      case Init::xavier: {
        const double fan_out = static_cast<double>(t.dim(0));
        const double bound = std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
        for (auto& v : t.values()) v = static_cast<Scalar>(rng_.uniform(-bound, bound));
        break;
      }
      case Init::conv_default: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : t.values()) v = static_cast<Scalar>(rng_.uniform(-bound, bound));
        break;
      }
    }
  }

  std::vector<Parameter<Scalar>>& params_;
  Rng rng_;
  InitScheme scheme_;
};

AttentionSlots build_attention(auto& b, const ModelConfig& c, const std::string& prefix) {
  const Index hidden = c.hidden;
  Index q_width = hidden, kv_width = hidden;
  if (c.attention.kind == AttentionKind::shallow) {
    q_width = kv_width = hidden / 2;
  } else if (c.attention.kind == AttentionKind::focused) {
    kv_width = hidden / c.attention.kv_groups;
  }
  AttentionSlots s;
  s.wq = b.add(prefix + ".q.weight", {q_width, hidden}, ParamRole::linear_weight, Init::xavier);
  s.bq = b.add(prefix + ".q.bias", {q_width}, ParamRole::bias, Init::zero);
  s.wk = b.add(prefix + ".k.weight", {kv_width, hidden}, ParamRole::linear_weight, Init::xavier);
  s.bk = b.add(prefix + ".k.bias", {kv_width}, ParamRole::bias, Init::zero);
  s.wv = b.add(prefix + ".v.weight", {kv_width, hidden}, ParamRole::linear_weight, Init::xavier);
  s.bv = b.add(prefix + ".v.bias", {kv_width}, ParamRole::bias, Init::zero);
  s.wo = b.add(prefix + ".out.weight", {hidden, q_width}, ParamRole::linear_weight, Init::xavier);
  s.bo = b.add(prefix + ".out.bias", {hidden}, ParamRole::bias, Init::zero);
  if (c.attention.kind == AttentionKind::mediated) {
    const Index k = c.attention.dwc_kernel;
    s.dwc_kernel = b.add(prefix + ".dwc.weight", {hidden, k, k}, ParamRole::conv_weight, Init::conv_default);
    s.dwc_bias = b.add(prefix + ".dwc.bias", {hidden}, ParamRole::bias, Init::zero);
  }
  return s;
}

}  // namespace

template <typename Scalar>
DiTModel<Scalar>::DiTModel(ModelConfig config, std::uint64_t seed, InitScheme init) : config_(std::move(config)) {
  config_.validate();
  const ModelConfig& c = config_;
  const Index C = c.hidden;
  Builder<Scalar> b(params_, seed, init);

  slots_.patch_w = b.add("patch_embed.weight", {C, c.patch_dim()}, ParamRole::conv_weight, Init::xavier);
  slots_.patch_b = b.add("patch_embed.bias", {C}, ParamRole::bias, Init::zero);
  slots_.pos_embed = b.buffer("pos_embed", sincos_pos_embed<Scalar>(C, c.grid()));
  slots_.t_w1 = b.add("t_embed.fc1.weight", {C, c.frequency_dim}, ParamRole::linear_weight, Init::normal02);
  slots_.t_b1 = b.add("t_embed.fc1.bias", {C}, ParamRole::bias, Init::zero);
  slots_.t_w2 = b.add("t_embed.fc2.weight", {C, C}, ParamRole::linear_weight, Init::normal02);
  slots_.t_b2 = b.add("t_embed.fc2.bias", {C}, ParamRole::bias, Init::zero);
  slots_.label_table = b.add("y_embed.table", {c.num_classes + 1, C}, ParamRole::embedding, Init::normal02);

  for (Index i = 0; i < c.depth; ++i) {
    const std::string prefix = "blocks." + std::to_string(i);
    BlockSlots blk;
    blk.ada_w = b.add(prefix + ".adaLN.weight", {6 * C, C}, ParamRole::linear_weight, Init::zero);
    blk.ada_b = b.add(prefix + ".adaLN.bias", {6 * C}, ParamRole::bias, Init::zero);
    blk.attn = build_attention(b, c, prefix + ".attn");
    const Index mlp_hidden = C * c.mlp_ratio;
    if (c.is_moe_block(i)) {
      blk.moe = true;
      blk.router = b.add(prefix + ".moe.router.weight", {c.moe->experts, C}, ParamRole::linear_weight, Init::normal02);
      for (Index e = 0; e < c.moe->experts; ++e) {
        blk.experts.push_back(b.mlp(prefix + ".moe.experts." + std::to_string(e), C, mlp_hidden));
      }
      for (Index e = 0; e < c.moe->shared_experts; ++e) {
        blk.shared.push_back(b.mlp(prefix + ".moe.shared." + std::to_string(e), C, mlp_hidden));
      }
    } else {
      blk.mlp = b.mlp(prefix + ".mlp", C, mlp_hidden);
    }
    slots_.blocks.push_back(std::move(blk));
  }

  const Index out_dim = c.patch * c.patch * c.out_channels();
  slots_.final_ada_w = b.add("final.adaLN.weight", {2 * C, C}, ParamRole::linear_weight, Init::zero);
  slots_.final_ada_b = b.add("final.adaLN.bias", {2 * C}, ParamRole::bias, Init::zero);
  slots_.final_w = b.add("final.linear.weight", {out_dim, C}, ParamRole::linear_weight, Init::zero);
  slots_.final_b = b.add("final.linear.bias", {out_dim}, ParamRole::bias, Init::zero);
}

template <typename Scalar>
Parameter<Scalar>& DiTModel<Scalar>::param(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw InputError("model has no parameter '" + std::string(name) + "'");
}

template <typename Scalar>
const Parameter<Scalar>& DiTModel<Scalar>::param(std::string_view name) const {
  return const_cast<DiTModel*>(this)->param(name);
}

template <typename Scalar>
std::int64_t DiTModel<Scalar>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename Scalar>
void DiTModel<Scalar>::set_frozen(bool frozen) {
  for (auto& p : params_) p.frozen = frozen || p.role == ParamRole::buffer;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> DiTModel<Scalar>::trainable() {
  std::vector<Parameter<Scalar>*> out;
  for (auto& p : params_)
    if (!p.frozen) out.push_back(&p);
  return out;
}

template <typename Scalar>
void DiTModel<Scalar>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class DiTModel<float>;
template class DiTModel<double>;
template Tensor<float> sincos_pos_embed<float>(Index, Index);
template Tensor<double> sincos_pos_embed<double>(Index, Index);

}  // namespace ditopt
