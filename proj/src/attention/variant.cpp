#include "ditopt/attention/variant.hpp"

#include <charconv>

#include "ditopt/error.hpp"

namespace ditopt {

const char* to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::baseline: return "baseline";
    case AttentionKind::shallow: return "shallow";
    case AttentionKind::mediated: return "mediated";
    case AttentionKind::focused: return "focused";
  }
  return "?";
}

std::string AttentionVariant::tag() const {
  switch (kind) {
    case AttentionKind::mediated: return "med-" + std::to_string(mediator_tokens);
    case AttentionKind::focused: return "fg-" + std::to_string(kv_groups);
    default: return to_string(kind);
  }
}

void AttentionVariant::validate(Index hidden, Index heads, Index tokens) const {
  if (heads < 1 || hidden % heads != 0) {
    throw ConfigError("hidden " + std::to_string(hidden) + " is not divisible by heads " + std::to_string(heads));
  }
  switch (kind) {
    case AttentionKind::baseline:
      break;
    case AttentionKind::shallow:
      if (hidden % 2 != 0 || (hidden / 2) % heads != 0) {
        throw ConfigError("shallow attention needs C/2 divisible by heads, C=" + std::to_string(hidden));
      }
      break;
    case AttentionKind::mediated:
      if (mediator_tokens < 1 || mediator_tokens > tokens) {
        throw ConfigError("mediator tokens n=" + std::to_string(mediator_tokens) + " outside [1, " +
                          std::to_string(tokens) + "]");
      }
      if (dwc_kernel < 1 || dwc_kernel % 2 == 0) throw ConfigError("dwc kernel size must be odd");
      break;
    case AttentionKind::focused:
      if (kv_groups < 1 || heads % kv_groups != 0) {
        throw ConfigError("G=" + std::to_string(kv_groups) + " does not divide heads=" + std::to_string(heads));
      }
      if (focus_power < 1) throw ConfigError("focusing power must be >= 1");
      if (!(focus_eps > 0)) throw ConfigError("focus eps must be positive");
      break;
  }
}

namespace {

Index parse_suffix(std::string_view text, std::string_view prefix) {
  const auto digits = text.substr(prefix.size());
  Index value = 0;
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
  if (ec != std::errc() || ptr != digits.data() + digits.size() || digits.empty()) {
    throw ConfigError("bad attention variant '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

AttentionVariant parse_attention_variant(std::string_view text) {
  if (text == "baseline" || text == "base") return AttentionVariant::baseline();
  if (text == "shallow") return AttentionVariant::shallow();
  for (std::string_view p : {"med-", "mediated-"}) {
    if (text.starts_with(p)) return AttentionVariant::mediated(parse_suffix(text, p));
  }
  for (std::string_view p : {"fg-", "focused-"}) {
    if (text.starts_with(p)) return AttentionVariant::focused(parse_suffix(text, p));
  }
  throw ConfigError("unknown attention variant '" + std::string(text) +
                    "' (expected baseline, shallow, med-<n>, fg-<G>)");
}

}  // namespace ditopt
