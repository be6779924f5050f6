#include "ditopt/dit/config.hpp"

#include <charconv>

#include "ditopt/error.hpp"

namespace ditopt {

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be >= 1, got " + std::to_string(v));
  };
  positive(depth, "depth");
  positive(hidden, "hidden");
  positive(heads, "heads");
  positive(patch, "patch");
  positive(input_size, "input_size");
  positive(in_channels, "in_channels");
  positive(mlp_ratio, "mlp_ratio");
  positive(num_classes, "num_classes");
  if (hidden % heads != 0) {
    throw ConfigError("hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  }
  if (input_size % patch != 0) {
    throw ConfigError("input_size " + std::to_string(input_size) + " not divisible by patch " + std::to_string(patch));
  }
  if (frequency_dim < 2 || frequency_dim % 2 != 0) throw ConfigError("frequency_dim must be even");
  if (hidden % 4 != 0) throw ConfigError("hidden must be a multiple of 4 for the 2-D sin-cos table");
  if (!(cfg_dropout >= 0 && cfg_dropout <= 1)) throw ConfigError("cfg_dropout must lie in [0, 1]");
  attention.validate(hidden, heads, tokens());
  if (moe) moe->validate();
}

ModelConfig preset(std::string_view name) {
  ModelConfig c;
  c.name = std::string(name);
  if (name == "S/2" || name == "S/4") {
    c.depth = 12;
    c.hidden = 384;
    c.heads = 6;
    c.patch = name == "S/2" ? 2 : 4;
  } else if (name == "XS/2" || name == "XS/4") {
    c.depth = 6;
    c.hidden = 256;
    c.heads = 4;
    c.patch = name == "XS/2" ? 2 : 4;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected S/2, S/4, XS/2, XS/4)");
  }
  return c;
}

namespace {

Index parse_count(std::string_view s, std::string_view whole) {
  Index v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("cannot parse config name '" + std::string(whole) + "'");
  }
  return v;
}

}  // namespace

ModelConfig named_config(std::string_view name) {
  if (name.starts_with("MoE-")) {
    // MoE-<preset>-<E>E<K>A
    const auto rest = name.substr(4);
    const auto dash = rest.rfind('-');
    if (dash == std::string_view::npos) throw ConfigError("cannot parse config name '" + std::string(name) + "'");
    ModelConfig c = preset(rest.substr(0, dash));
    const auto spec = rest.substr(dash + 1);
    const auto e = spec.find('E');
    if (e == std::string_view::npos || !spec.ends_with('A')) {
      throw ConfigError("cannot parse config name '" + std::string(name) + "'");
    }
    MoEConfig m;
    m.experts = parse_count(spec.substr(0, e), name);
    m.active = parse_count(spec.substr(e + 1, spec.size() - e - 2), name);
    // Halving the MoE blocks is what distinguishes the single-active variant.
    m.frequency = (m.experts == 4 && m.active == 1) ? 2 : 1;
    c.moe = m;
    c.name = std::string(name);
    return c;
  }
  const auto dash = name.find('-');
  ModelConfig c = preset(name.substr(0, dash));
  c.name = std::string(name);
  if (dash != std::string_view::npos) {
    const auto tag = name.substr(dash + 1);
    c.attention = tag == "base" ? AttentionVariant::baseline() : parse_attention_variant(tag);
  }
  return c;
}

std::vector<ModelConfig> table_suite() {
  std::vector<ModelConfig> out;
  for (const char* n : {"S/2-base", "S/4-base", "XS/2-base", "XS/4-base", "S/2-shallow", "S/2-med-4", "S/2-med-16",
                        "S/2-fg-6", "S/2-fg-3", "MoE-S/2-8E2A", "MoE-S/2-4E1A", "MoE-XS/2-8E2A"}) {
    out.push_back(named_config(n));
  }
  return out;
}

void to_json(nlohmann::json& j, const AttentionVariant& v) {
  j = nlohmann::json{{"kind", to_string(v.kind)}};
  switch (v.kind) {
    case AttentionKind::mediated:
      j["mediator_tokens"] = v.mediator_tokens;
      j["dwc_kernel"] = v.dwc_kernel;
      break;
    case AttentionKind::focused:
      j["focus_power"] = v.focus_power;
      j["kv_groups"] = v.kv_groups;
      j["rectify"] = v.rectify;
      j["focus_eps"] = v.focus_eps;
      break;
    default:
      break;
  }
}

void from_json(const nlohmann::json& j, AttentionVariant& v) {
  if (j.is_string()) {
    v = parse_attention_variant(j.get<std::string>());
    return;
  }
  const auto kind = j.value("kind", std::string(to_string(v.kind)));
  if (kind == "baseline") v.kind = AttentionKind::baseline;
  else if (kind == "shallow") v.kind = AttentionKind::shallow;
  else if (kind == "mediated") v.kind = AttentionKind::mediated;
  else if (kind == "focused") v.kind = AttentionKind::focused;
  else throw ConfigError("unknown attention kind '" + kind + "'");
  v.mediator_tokens = j.value("mediator_tokens", v.mediator_tokens);
  v.dwc_kernel = j.value("dwc_kernel", v.dwc_kernel);
  v.focus_power = j.value("focus_power", v.focus_power);
  v.kv_groups = j.value("kv_groups", v.kv_groups);
  v.rectify = j.value("rectify", v.rectify);
  v.focus_eps = j.value("focus_eps", v.focus_eps);
}

void to_json(nlohmann::json& j, const MoEConfig& m) {
  j = nlohmann::json{{"experts", m.experts},
                     {"active", m.active},
                     {"frequency", m.frequency},
                     {"shared_experts", m.shared_experts},
                     {"balance_alpha", m.balance_alpha}};
}

void from_json(const nlohmann::json& j, MoEConfig& m) {
  m.experts = j.value("experts", m.experts);
  m.active = j.value("active", m.active);
  m.frequency = j.value("frequency", m.frequency);
  m.shared_experts = j.value("shared_experts", m.shared_experts);
  m.balance_alpha = j.value("balance_alpha", m.balance_alpha);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"name", c.name},
                     {"depth", c.depth},
                     {"hidden", c.hidden},
                     {"heads", c.heads},
                     {"patch", c.patch},
                     {"input_size", c.input_size},
                     {"in_channels", c.in_channels},
                     {"mlp_ratio", c.mlp_ratio},
                     {"num_classes", c.num_classes},
                     {"frequency_dim", c.frequency_dim},
                     {"learn_sigma", c.learn_sigma},
                     {"cfg_dropout", c.cfg_dropout},
                     {"attention", c.attention}};
  j["moe"] = c.moe ? nlohmann::json(*c.moe) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("preset")) c = named_config(j.at("preset").get<std::string>());
  c.name = j.value("name", c.name);
  c.depth = j.value("depth", c.depth);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.patch = j.value("patch", c.patch);
  c.input_size = j.value("input_size", c.input_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.frequency_dim = j.value("frequency_dim", c.frequency_dim);
  c.learn_sigma = j.value("learn_sigma", c.learn_sigma);
  c.cfg_dropout = j.value("cfg_dropout", c.cfg_dropout);
  if (j.contains("attention")) {
    AttentionVariant v = c.attention;
    from_json(j.at("attention"), v);
    c.attention = v;
  }
  if (j.contains("moe")) {
    if (j.at("moe").is_null()) {
      c.moe.reset();
    } else {
      MoEConfig m = c.moe.value_or(MoEConfig{});
      from_json(j.at("moe"), m);
      c.moe = m;
    }
  }
}

}  // namespace ditopt
