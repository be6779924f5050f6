#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditopt/dit/config.hpp"

namespace ditopt {

/// Component keys used in every breakdown, in report order.
inline constexpr const char* kCostComponents[] = {"embeddings", "attention", "mlp", "adaln", "final"};

struct ParamCounts {
  std::int64_t total = 0;
  std::int64_t activated = 0;  // MoE: only K of E experts per MoE block
  std::map<std::string, std::int64_t> by_component;
};

/// Closed-form parameter count. The fixed positional table is included
/// (it is part of the stored weights).
ParamCounts count_params(const ModelConfig& config);

struct FlopOptions {
  /// Report the effective cost of a head-pruned model: Q/K/V rows, per-head
  /// attention and out-projection columns of masked heads are skipped.
  bool elide_pruned = false;
  Index kept_heads = 0;  // per attention layer; 0 means all heads
};

struct FlopCounts {
  std::int64_t total = 0;
  std::map<std::string, std::int64_t> by_component;
};

/// Closed-form multiply-accumulate count of one batch-1 forward. Only
/// matmul and convolution work is counted; 1 MAC = 1 FLOP.
FlopCounts count_flops(const ModelConfig& config, const FlopOptions& options = {});

struct Throughput {
  Index iterations = 0;
  Index warmup = 0;
  double it_per_s = 0;
  double latency_min_s = 0;
  double latency_median_s = 0;
  double latency_max_s = 0;
};

/// Runs `warmup` untimed calls, then times `iterations` calls individually.
Throughput profile_throughput(const std::function<void()>& forward, Index iterations = 50, Index warmup = 5);

struct CostReport {
  std::string name;
  ParamCounts params;
  FlopCounts flops;
  /// Weight bytes (float32) plus an analytic batch-1 activation high-water
  /// mark. An estimate, not an allocator measurement.
  std::int64_t peak_memory_estimate_bytes = 0;
  std::optional<Throughput> measured;
  std::optional<std::string> error;  // set instead of counts for an invalid config
};

std::int64_t estimate_peak_memory_bytes(const ModelConfig& config);

/// Counts for a config; invalid configs produce a report with `error` set.
CostReport make_cost_report(const ModelConfig& config, const FlopOptions& options = {});

nlohmann::json to_json(const CostReport& report);
/// Aligned table with Params (M), blank FID/sFID columns, GFLOPS, Throughput.
std::string format_cost_table(const std::vector<CostReport>& reports);
/// Header name,params_m,activated_m,gflops,throughput_it_s; error rows carry
/// empty numeric fields.
std::string format_cost_csv(const std::vector<CostReport>& reports);

}  // namespace ditopt
