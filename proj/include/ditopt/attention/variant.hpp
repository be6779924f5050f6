#pragma once

#include <string>
#include <string_view>

#include "ditopt/numerics/tensor.hpp"

namespace ditopt {

enum class AttentionKind { baseline, shallow, mediated, focused };

/// Selects one of the four attention implementations and its knobs.
/// Fields that do not apply to the selected kind are ignored.
struct AttentionVariant {
  AttentionKind kind = AttentionKind::baseline;
  Index mediator_tokens = 4;  // n, mediated only
  Index dwc_kernel = 3;       // mediated only
  int focus_power = 3;        // p, focused only
  Index kv_groups = 1;        // G: query heads per shared key/value head
  bool rectify = false;       // ReLU before the focusing power
  double focus_eps = 1e-6;    // added to the linear-attention denominator

  static AttentionVariant baseline() { return {}; }
  static AttentionVariant shallow() { return {.kind = AttentionKind::shallow}; }
  static AttentionVariant mediated(Index n) { return {.kind = AttentionKind::mediated, .mediator_tokens = n}; }
  static AttentionVariant focused(Index groups, int power = 3) {
    return {.kind = AttentionKind::focused, .focus_power = power, .kv_groups = groups};
  }

  /// Short tag: "baseline", "shallow", "med-4", "fg-6".
  std::string tag() const;

  /// Throws ConfigError if the variant cannot run at this geometry.
  void validate(Index hidden, Index heads, Index tokens) const;

  bool operator==(const AttentionVariant&) const = default;
};

/// Inverse of tag(); also accepts "mediated-<n>" and "focused-<G>".
AttentionVariant parse_attention_variant(std::string_view text);

const char* to_string(AttentionKind kind);

}  // namespace ditopt
