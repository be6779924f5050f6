#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ditopt/attention/variant.hpp"
#include "ditopt/moe/moe.hpp"

namespace ditopt {

/// Architecture of a DiT-style denoiser. The live model, the analytical cost
/// model and the checkpoint manifest are all derived from this alone.
struct ModelConfig {
  std::string name = "custom";
  Index depth = 12;
  Index hidden = 384;  // C
  Index heads = 6;     // h
  Index patch = 2;
  Index input_size = 32;
  Index in_channels = 4;
  Index mlp_ratio = 4;
  Index num_classes = 200;
  Index frequency_dim = 256;  // sinusoidal timestep features before the MLP
  bool learn_sigma = true;    // output 2 * in_channels
  double cfg_dropout = 0.1;
  AttentionVariant attention;
  std::optional<MoEConfig> moe;

  Index grid() const { return input_size / patch; }
  Index tokens() const { return grid() * grid(); }
  Index out_channels() const { return learn_sigma ? 2 * in_channels : in_channels; }
  Index patch_dim() const { return in_channels * patch * patch; }
  Index head_dim() const { return hidden / heads; }
  bool is_moe_block(Index block) const { return moe.has_value() && moe->is_moe_block(block); }

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// "S/2", "S/4", "XS/2", "XS/4".
ModelConfig preset(std::string_view name);

/// Preset, optionally suffixed with an attention tag ("S/2-shallow",
/// "S/2-med-16", "XS/2-fg-2"), or an MoE name ("MoE-S/2-8E2A"); "-base"
/// selects baseline attention.
ModelConfig named_config(std::string_view name);

/// The twelve configurations of the reference comparison table, in order.
std::vector<ModelConfig> table_suite();

void to_json(nlohmann::json& j, const AttentionVariant& v);
void from_json(const nlohmann::json& j, AttentionVariant& v);
void to_json(nlohmann::json& j, const MoEConfig& m);
void from_json(const nlohmann::json& j, MoEConfig& m);
/// Missing keys keep their defaults, so partial JSON overrides work.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace ditopt
