#include "ditopt/costmodel/costmodel.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

#include "ditopt/error.hpp"

namespace ditopt {

namespace {

using i64 = std::int64_t;

i64 linear_params(i64 in, i64 out, bool bias = true) { return in * out + (bias ? out : 0); }

i64 mlp_params(const ModelConfig& c) {
  const i64 C = c.hidden, H = C * c.mlp_ratio;
  return linear_params(C, H) + linear_params(H, C);
}

i64 attention_params(const ModelConfig& c) {
  const i64 C = c.hidden;
  const auto& a = c.attention;
  switch (a.kind) {
    case AttentionKind::baseline:
      return 4 * linear_params(C, C);
    case AttentionKind::shallow:
      return 3 * linear_params(C, C / 2) + linear_params(C / 2, C);
    case AttentionKind::mediated:
      return 4 * linear_params(C, C) + C * a.dwc_kernel * a.dwc_kernel + C;
    case AttentionKind::focused:
      return 2 * linear_params(C, C) + 2 * linear_params(C, C / a.kv_groups);
  }
  throw ConfigError("unknown attention kind");
}

i64 moe_block_count(const ModelConfig& c) {
  if (!c.moe) return 0;
  return (c.depth + c.moe->frequency - 1) / c.moe->frequency;
}

}  // namespace

ParamCounts count_params(const ModelConfig& c) {
  c.validate();
  const i64 C = c.hidden;
  ParamCounts out;
  auto& by = out.by_component;
  for (const char* k : kCostComponents) by[k] = 0;

  by["embeddings"] = linear_params(c.patch_dim(), C)     // patch projection
                     + c.tokens() * C                     // fixed positional table
                     + linear_params(c.frequency_dim, C)  // timestep MLP
                     + linear_params(C, C) + (c.num_classes + 1) * C;
  by["attention"] = c.depth * attention_params(c);
  const i64 moe_blocks = moe_block_count(c);
  const i64 dense_blocks = c.depth - moe_blocks;
  i64 inactive = 0;
  by["mlp"] = dense_blocks * mlp_params(c);
  if (c.moe) {
    const auto& m = *c.moe;
    by["mlp"] += moe_blocks * (C * m.experts + (m.experts + m.shared_experts) * mlp_params(c));
    inactive = moe_blocks * (m.experts - m.active) * mlp_params(c);
  }
  by["adaln"] = c.depth * linear_params(C, 6 * C) + linear_params(C, 2 * C);
  by["final"] = linear_params(C, c.patch * c.patch * c.out_channels());

  for (const auto& [k, v] : by) out.total += v;
  out.activated = out.total - inactive;
  return out;
}

FlopCounts count_flops(const ModelConfig& c, const FlopOptions& options) {
  c.validate();
  const i64 C = c.hidden, N = c.tokens(), h = c.heads;
  const auto& a = c.attention;
  FlopCounts out;
  auto& by = out.by_component;
  for (const char* k : kCostComponents) by[k] = 0;

  by["embeddings"] = N * c.patch_dim() * C + c.frequency_dim * C + C * C;

  i64 attn = 0;
  switch (a.kind) {
    case AttentionKind::baseline:
    case AttentionKind::shallow: {
      const i64 width = a.kind == AttentionKind::shallow ? C / 2 : C;
      const i64 d = width / h;
      i64 kept = h;
      if (options.elide_pruned && options.kept_heads > 0) kept = std::min<i64>(options.kept_heads, h);
      const i64 live = kept * d;
      // Q/K/V projections, QK^T and AV for every live head, output projection.
      attn = 3 * N * C * live + 2 * N * N * live + N * live * C;
      break;
    }
    case AttentionKind::mediated: {
      if (options.elide_pruned && options.kept_heads > 0) {
        throw UnsupportedVariantError("head elision is defined for softmax attention only");
      }
      const i64 n = a.mediator_tokens, k = a.dwc_kernel;
      // Projections, the four N x n x d products per head, depthwise conv.
      attn = 4 * N * C * C + 4 * N * n * C + N * C * k * k;
      break;
    }
    case AttentionKind::focused: {
      if (options.elide_pruned && options.kept_heads > 0) {
        throw UnsupportedVariantError("head elision is defined for softmax attention only");
      }
      const i64 d = C / h, kv_heads = h / a.kv_groups;
      // Q and out at C x C, K and V at C x C/G; K^T[V|1] once per KV head,
      // Q(K^T[V|1]) once per query head.
      attn = 2 * N * C * C + 2 * N * C * (C / a.kv_groups) + kv_heads * N * d * (d + 1) + h * N * d * (d + 1);
      break;
    }
  }
  by["attention"] = c.depth * attn;

  const i64 mlp = 2 * N * C * C * c.mlp_ratio;
  const i64 moe_blocks = moe_block_count(c);
  by["mlp"] = (c.depth - moe_blocks) * mlp;
  if (c.moe) {
    const auto& m = *c.moe;
    by["mlp"] += moe_blocks * (N * C * m.experts + (m.active + m.shared_experts) * mlp);
  }
  by["adaln"] = c.depth * 6 * C * C + 2 * C * C;
  by["final"] = N * C * c.patch * c.patch * c.out_channels();
  for (const auto& [k, v] : by) out.total += v;
  return out;
}

Throughput profile_throughput(const std::function<void()>& forward, Index iterations, Index warmup) {
  if (iterations < 1) throw ConfigError("profile needs at least one timed iteration");
  if (warmup < 0) throw ConfigError("warmup must be >= 0");
  for (Index i = 0; i < warmup; ++i) forward();
  std::vector<double> lat;
  lat.reserve(static_cast<std::size_t>(iterations));
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  for (Index i = 0; i < iterations; ++i) {
    const auto t0 = clock::now();
    forward();
    lat.push_back(std::chrono::duration<double>(clock::now() - t0).count());
  }
  const double total = std::chrono::duration<double>(clock::now() - start).count();
  std::vector<double> sorted = lat;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size();
  Throughput t;
  t.iterations = iterations;
  t.warmup = warmup;
  t.it_per_s = total > 0 ? static_cast<double>(iterations) / total : 0.0;
  t.latency_min_s = sorted.front();
  t.latency_max_s = sorted.back();
  t.latency_median_s = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
  return t;
}

std::int64_t estimate_peak_memory_bytes(const ModelConfig& c) {
  const i64 weights = count_params(c).total * 4;
  const i64 C = c.hidden, N = c.tokens(), h = c.heads;
  // Residual stream plus normalized copy, the q/k/v projections, and the
  // largest per-layer intermediate (attention maps of all heads or the MLP).
  i64 attn_map = 0;
  switch (c.attention.kind) {
    case AttentionKind::baseline:
    case AttentionKind::shallow: attn_map = h * N * N; break;
    case AttentionKind::mediated: attn_map = 2 * h * N * c.attention.mediator_tokens; break;
    case AttentionKind::focused: attn_map = h * N * (C / h + 1); break;
  }
  const i64 mlp = N * C * c.mlp_ratio;
  const i64 activations = 2 * N * C + 3 * N * C + std::max(attn_map, mlp);
  return weights + 4 * activations;
}

CostReport make_cost_report(const ModelConfig& config, const FlopOptions& options) {
  CostReport r;
  r.name = config.name;
  try {
    r.params = count_params(config);
    r.flops = count_flops(config, options);
    r.peak_memory_estimate_bytes = estimate_peak_memory_bytes(config);
  } catch (const Error& e) {
    r.error = e.what();
  }
  return r;
}

nlohmann::json to_json(const CostReport& r) {
  nlohmann::json j{{"name", r.name}};
  if (r.error) {
    j["error"] = *r.error;
    return j;
  }
  j["total_params"] = r.params.total;
  j["activated_params"] = r.params.activated;
  j["flops_per_forward"] = r.flops.total;
  j["params_m"] = static_cast<double>(r.params.total) / 1e6;
  j["activated_m"] = static_cast<double>(r.params.activated) / 1e6;
  j["gflops"] = static_cast<double>(r.flops.total) / 1e9;
  j["peak_memory_estimate_bytes"] = r.peak_memory_estimate_bytes;
  auto& bd = j["breakdown"];
  for (const char* k : kCostComponents) {
    bd[k] = {{"params", r.params.by_component.at(k)}, {"flops", r.flops.by_component.at(k)}};
  }
  if (r.measured) {
    const auto& m = *r.measured;
    j["measured"] = {{"throughput_it_s", m.it_per_s},         {"iterations", m.iterations},
                     {"warmup", m.warmup},                    {"latency_min_s", m.latency_min_s},
                     {"latency_median_s", m.latency_median_s}, {"latency_max_s", m.latency_max_s}};
  }
  return j;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string format_cost_table(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %18s %6s %6s %8s %11s\n", "Model", "Params (M)", "FID", "sFID", "GFLOPS",
                "Throughput");
  os << line;
  for (const auto& r : reports) {
    if (r.error) {
      std::snprintf(line, sizeof line, "%-16s error: %s\n", r.name.c_str(), r.error->c_str());
      os << line;
      continue;
    }
    std::string params = fixed(static_cast<double>(r.params.total) / 1e6, 1);
    if (r.params.activated != r.params.total) {
      params += " [" + fixed(static_cast<double>(r.params.activated) / 1e6, 1) + "]";
    }
    const std::string thr = r.measured ? fixed(r.measured->it_per_s, 2) : "";
    std::snprintf(line, sizeof line, "%-16s %18s %6s %6s %8s %11s\n", r.name.c_str(), params.c_str(), "", "",
                  fixed(static_cast<double>(r.flops.total) / 1e9, 2).c_str(), thr.c_str());
    os << line;
  }
  return os.str();
}

std::string format_cost_csv(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  os << "name,params_m,activated_m,gflops,throughput_it_s\n";
  for (const auto& r : reports) {
    os << r.name;
    if (r.error) {
      os << ",,,,\n";
      continue;
    }
    os << ',' << fixed(static_cast<double>(r.params.total) / 1e6, 6) << ','
       << fixed(static_cast<double>(r.params.activated) / 1e6, 6) << ','
       << fixed(static_cast<double>(r.flops.total) / 1e9, 6) << ','
       << (r.measured ? fixed(r.measured->it_per_s, 4) : "") << '\n';
  }
  return os.str();
}

}  // namespace ditopt
