#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

#include "ditopt/costmodel/costmodel.hpp"
#include "ditopt/dit/forward.hpp"
#include "ditopt/error.hpp"
#include "ditopt/numerics/mac_counter.hpp"
#include "../test_util.hpp"

using namespace ditopt;
using ditopt::testing::uniform_tensor;

namespace {

void check_counter_matches(const ModelConfig& cfg) {
  DiTModel<float> m(cfg, 0);
  Rng rng(1);
  const auto x = uniform_tensor<float>({1, cfg.in_channels, cfg.input_size, cfg.input_size}, rng);
  const std::vector<Index> t{17}, y{0};
  MacCounter counter;
  predict(m, x, t, y);
  const auto closed = count_flops(cfg);
  INFO(cfg.name, " input ", cfg.input_size);
  CHECK(static_cast<std::int64_t>(counter.total()) == closed.total);
  for (const char* k : kCostComponents) {
    INFO(k);
    CHECK(static_cast<std::int64_t>(counter.category(k)) == closed.by_component.at(k));
  }
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

TEST_CASE("breakdowns sum to totals; activated <= total") {
  for (const auto& cfg : table_suite()) {
    const auto p = count_params(cfg);
    const auto f = count_flops(cfg);
    std::int64_t ps = 0, fs = 0;
    for (const char* k : kCostComponents) {
      ps += p.by_component.at(k);
      fs += f.by_component.at(k);
    }
    INFO(cfg.name);
    CHECK(ps == p.total);
    CHECK(fs == f.total);
    CHECK(p.activated <= p.total);
    CHECK((p.activated == p.total) == !cfg.moe.has_value());
  }
}

TEST_CASE("instrumented MAC counter equals closed-form FLOPs at input 16") {
  for (auto cfg : table_suite()) {
    cfg.input_size = 16;
    check_counter_matches(cfg);
  }
  auto shared = named_config("MoE-XS/2-8E2A");
  shared.input_size = 16;
  shared.moe->shared_experts = 1;
  check_counter_matches(shared);
}

TEST_CASE("instrumented MAC counter equals closed-form FLOPs at input 32") {
  for (const auto& cfg : table_suite()) check_counter_matches(cfg);
}

TEST_CASE("walked parameters equal the closed form for every preset") {
  for (const auto& cfg : table_suite()) {
    INFO(cfg.name);
    CHECK(DiTModel<float>(cfg, 0).parameter_count() == count_params(cfg).total);
  }
}

TEST_CASE("FLOPs strictly increase in depth, hidden and tokens") {
  for (const char* name : {"S/2-base", "S/2-shallow", "S/2-med-4", "S/2-fg-6", "MoE-S/2-8E2A"}) {
    const auto base = named_config(name);
    const auto f0 = count_flops(base).total;
    auto deeper = base;
    deeper.depth += 1;
    auto wider = base;
    wider.hidden += wider.heads * 2;
    auto bigger = base;
    bigger.input_size += bigger.patch;
    INFO(name);
    CHECK(count_flops(deeper).total > f0);
    CHECK(count_flops(wider).total > f0);
    CHECK(count_flops(bigger).total > f0);
  }
}

TEST_CASE("invalid configs") {
  auto bad = named_config("S/2-base");
  bad.heads = 5;
  CHECK_THROWS_AS(count_params(bad), ConfigError);
  CHECK_THROWS_AS(count_flops(bad), ConfigError);
  const auto r = make_cost_report(bad);
  REQUIRE(r.error.has_value());
  CHECK(to_json(r).contains("error"));
  CHECK(format_cost_csv({r}) == "name,params_m,activated_m,gflops,throughput_it_s\nS/2-base,,,,\n");
}

TEST_CASE("JSON and CSV reports parse back to the counts") {
  std::vector<CostReport> reports;
  for (const auto& cfg : table_suite()) reports.push_back(make_cost_report(cfg));
  for (const auto& r : reports) {
    const auto j = nlohmann::json::parse(to_json(r).dump());
    CHECK(j.at("total_params").get<std::int64_t>() == r.params.total);
    CHECK(j.at("flops_per_forward").get<std::int64_t>() == r.flops.total);
    CHECK(j.at("breakdown").at("attention").at("flops").get<std::int64_t>() == r.flops.by_component.at("attention"));
  }
  std::istringstream csv(format_cost_csv(reports));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "name,params_m,activated_m,gflops,throughput_it_s");
  for (const auto& r : reports) {
    REQUIRE(std::getline(csv, line));
    const auto cells = split(line, ',');
    REQUIRE(cells.size() == 5);
    CHECK(cells[0] == r.name);
    // Six decimals in the file.
    CHECK(std::abs(std::stod(cells[1]) - r.params.total / 1e6) <= 5e-7);
    CHECK(std::abs(std::stod(cells[2]) - r.params.activated / 1e6) <= 5e-7);
    CHECK(std::abs(std::stod(cells[3]) - r.flops.total / 1e9) <= 5e-7);
    CHECK(cells[4].empty());
  }
  const auto table = format_cost_table(reports);
  for (const auto& r : reports) CHECK(table.find(r.name) != std::string::npos);
}

TEST_CASE("elided FLOPs with all heads kept equal the dense count") {
  const auto cfg = named_config("S/2-base");
  CHECK(count_flops(cfg, {.elide_pruned = true, .kept_heads = 0}).total == count_flops(cfg).total);
  CHECK(count_flops(cfg, {.elide_pruned = false, .kept_heads = 2}).total == count_flops(cfg).total);
}

TEST_CASE("peak memory estimate covers the weights") {
  for (const auto& cfg : table_suite()) CHECK(estimate_peak_memory_bytes(cfg) > 4 * count_params(cfg).total);
}

TEST_CASE("throughput timer excludes warmup") {
  int calls = 0;
  const auto stub = [&] {
    if (calls++ == 0) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  };
  const auto r = profile_throughput(stub, 10, 1);
  CHECK(calls == 11);
  CHECK(r.iterations == 10);
  CHECK(r.warmup == 1);
  CHECK(r.latency_max_s < 0.1);
  CHECK(r.latency_min_s <= r.latency_median_s);
  CHECK(r.latency_median_s <= r.latency_max_s);
  CHECK(r.it_per_s > 0);

  int n = 0;
  const auto d = profile_throughput([&] { ++n; });
  CHECK(n == 55);
  CHECK(d.iterations == 50);
}
