#pragma once

#include <cstdint>
#include <limits>
#include <string_view>
#include <vector>

#include "ditopt/dit/config.hpp"
#include "ditopt/numerics/tape.hpp"

namespace ditopt {

/// Index of a tensor in DiTModel::parameters().
using Slot = std::size_t;
inline constexpr Slot kNoSlot = std::numeric_limits<Slot>::max();

struct AttentionSlots {
  Slot wq = kNoSlot, bq = kNoSlot, wk = kNoSlot, bk = kNoSlot, wv = kNoSlot, bv = kNoSlot;
  Slot wo = kNoSlot, bo = kNoSlot;
  Slot dwc_kernel = kNoSlot, dwc_bias = kNoSlot;
};

struct MlpSlots {
  Slot w1 = kNoSlot, b1 = kNoSlot, w2 = kNoSlot, b2 = kNoSlot;
};

struct BlockSlots {
  Slot ada_w = kNoSlot, ada_b = kNoSlot;  // C -> 6C
  AttentionSlots attn;
  bool moe = false;
  MlpSlots mlp;  // dense blocks
  Slot router = kNoSlot;
  std::vector<MlpSlots> experts;
  std::vector<MlpSlots> shared;
};

struct ModelSlots {
  Slot patch_w = kNoSlot, patch_b = kNoSlot, pos_embed = kNoSlot;
  Slot t_w1 = kNoSlot, t_b1 = kNoSlot, t_w2 = kNoSlot, t_b2 = kNoSlot;
  Slot label_table = kNoSlot;  // num_classes + 1 rows, the last is the null label
  std::vector<BlockSlots> blocks;
  Slot final_ada_w = kNoSlot, final_ada_b = kNoSlot;  // C -> 2C
  Slot final_w = kNoSlot, final_b = kNoSlot;          // C -> patch^2 * out_channels
};

enum class InitScheme {
  dit,     // xavier linears, zero adaLN and output layer: blocks start as identities
  random,  // every tensor random and nonzero; for oracles and gradient tests
};

/// Value-semantic DiT: a config plus a flat list of named parameters. Copying
/// a model deep-copies its weights.
template <typename Scalar>
class DiTModel {
 public:
  explicit DiTModel(ModelConfig config, std::uint64_t seed = 0, InitScheme init = InitScheme::dit);

  const ModelConfig& config() const noexcept { return config_; }
  const ModelSlots& slots() const noexcept { return slots_; }

  std::vector<Parameter<Scalar>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<Scalar>>& parameters() const noexcept { return params_; }
  Parameter<Scalar>& param(Slot s) { return params_.at(s); }
  const Parameter<Scalar>& param(Slot s) const { return params_.at(s); }

  /// Lookup by name; InputError if absent.
  Parameter<Scalar>& param(std::string_view name);
  const Parameter<Scalar>& param(std::string_view name) const;

  /// Elements summed over every stored tensor, frozen buffers included.
  std::int64_t parameter_count() const;

  /// Marks every parameter frozen (teacher) or trainable. The positional
  /// table stays frozen either way.
  void set_frozen(bool frozen);

  /// Trainable parameters, for optimizers.
  std::vector<Parameter<Scalar>*> trainable();

  void zero_grad();

  template <typename Other>
  DiTModel<Other> cast() const;

 private:
  template <typename>
  friend class DiTModel;
  DiTModel(ModelConfig config, ModelSlots slots, std::vector<Parameter<Scalar>> params)
      : config_(std::move(config)), slots_(std::move(slots)), params_(std::move(params)) {}

  ModelConfig config_;
  ModelSlots slots_;
  std::vector<Parameter<Scalar>> params_;
};

template <typename Scalar>
template <typename Other>
DiTModel<Other> DiTModel<Scalar>::cast() const {
  std::vector<Parameter<Other>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) {
    out.push_back(Parameter<Other>{p.name, p.value.template cast<Other>(), {}, p.role, p.frozen});
  }
  return DiTModel<Other>(config_, slots_, std::move(out));
}

/// Fixed 2-D sin-cos table [grid^2 x dim]: first half encodes the column,
/// second half the row.
template <typename Scalar>
Tensor<Scalar> sincos_pos_embed(Index dim, Index grid);

extern template class DiTModel<float>;
extern template class DiTModel<double>;

}  // namespace ditopt
