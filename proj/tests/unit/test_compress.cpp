#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "ditopt/compress/compress.hpp"
#include "ditopt/costmodel/costmodel.hpp"
#include "ditopt/dit/checkpoint.hpp"
#include "ditopt/dit/forward.hpp"
#include "ditopt/error.hpp"
#include "ditopt/numerics/ops.hpp"
#include "../test_util.hpp"

using namespace ditopt;
using ditopt::testing::uniform_tensor;
namespace fs = std::filesystem;

namespace {

ModelConfig small(Index depth = 2) {
  ModelConfig c;
  c.name = "small";
  c.depth = depth;
  c.hidden = 24;
  c.heads = 6;
  c.input_size = 8;
  c.num_classes = 3;
  c.frequency_dim = 16;
  return c;
}

fs::path temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("ditopt_test_" + tag);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("quantize_tensor hand example") {
  const auto qt = quantize_tensor(Tensorf(Shape{1, 3}, {0.5f, -1.0f, 0.25f}));
  REQUIRE(qt.scales.size() == 1);
  CHECK(qt.scales[0] == 1.0f / 127.0f);
  CHECK(qt.q == std::vector<std::int8_t>{64, -127, 32});
  CHECK(qt.zero_points == std::vector<float>{0.0f});
  const auto back = dequantize(qt);
  CHECK(back[0] == doctest::Approx(0.5039).epsilon(1e-4));
  CHECK(back[1] == -1.0f);
  CHECK(back[2] == doctest::Approx(0.2520).epsilon(1e-3));
}

TEST_CASE("quantize_tensor edge cases") {
  const auto zero = quantize_tensor(Tensorf(Shape{2, 4}));
  for (auto q : zero.q) CHECK(q == 0);
  CHECK(dequantize(zero) == Tensorf(Shape{2, 4}));

  // Exactly representable grid: w = S * integer.
  Rng rng(3);
  Tensorf grid(Shape{5, 7});
  std::vector<float> scales{0.5f, 0.25f, 0.125f, 1.0f, 2.0f};
  for (Index r = 0; r < 5; ++r) {
    for (Index c = 0; c < 7; ++c) grid(r, c) = scales[static_cast<std::size_t>(r)] * static_cast<float>(static_cast<int>(rng.below(255)) - 127);
    grid(r, 0) = 127.0f * scales[static_cast<std::size_t>(r)];
  }
  CHECK(dequantize(quantize_tensor(grid)) == grid);

  // Half away from zero.
  const auto half = quantize_tensor(Tensorf(Shape{1, 3}, {127.0f, 0.5f, -0.5f}));
  CHECK(half.q == std::vector<std::int8_t>{127, 1, -1});

  CHECK_THROWS_AS(quantize_tensor(Tensorf(Shape{1, 2}, {1.0f, NAN})), NumericError);

  const auto pt = quantize_tensor(Tensorf(Shape{2, 2}, {1, 2, 3, -4}), QuantGranularity::per_tensor);
  CHECK(pt.scales.size() == 1);
  CHECK(pt.scale_of(3) == 4.0f / 127.0f);
  CHECK(pt.q[3] == -127);
}

TEST_CASE("round trip within S/2 on 10^6 weights") {
  Rng rng(0);
  const auto w = uniform_tensor<float>({1000, 1000}, rng, -0.2, 0.2);
  for (auto g : {QuantGranularity::per_channel, QuantGranularity::per_tensor}) {
    const auto qt = quantize_tensor(w, g);
    const auto back = dequantize(qt);
    Index bad = 0;
    for (Index i = 0; i < w.numel(); ++i) {
      const double s = qt.scale_of(i);
      // S/2 in exact arithmetic, plus the float32 rounding of the q*S product
      // (half an ulp of the result).
      const double ulp_half = std::ldexp(std::abs(static_cast<double>(back[i])), -24);
      if (std::abs(static_cast<double>(w[i]) - static_cast<double>(back[i])) > s / 2 + ulp_half) ++bad;
      if (qt.q[static_cast<std::size_t>(i)] < -128) ++bad;
    }
    CHECK(bad == 0);
  }
}

TEST_CASE("quantized_linear") {
  Rng rng(1);
  // Representable weights: equal to float linear up to summation order.
  Tensorf w(Shape{6, 5});
  for (Index i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(static_cast<int>(rng.below(255)) - 127) / 64.0f;
  for (Index r = 0; r < 6; ++r) w(r, 0) = 127.0f / 64.0f;
  const auto x = uniform_tensor<float>({4, 5}, rng);
  const auto b = uniform_tensor<float>({6}, rng);
  Tape<float> tape(false);
  const auto ref = linear(tape.constant(x), tape.constant(w), tape.constant(b)).value();
  CHECK(max_abs_diff(quantized_linear(x, quantize_tensor(w), b), ref) <= 1e-5f);

  Tensorf eye(Shape{5, 5});
  for (Index i = 0; i < 5; ++i) eye(i, i) = 1.0f;
  const auto b5 = uniform_tensor<float>({5}, rng);
  const auto y = quantized_linear(x, quantize_tensor(eye), b5);
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 5; ++c) CHECK(y(r, c) == x(r, c) + b5[c]);

  // S/2-sized layer against the interval bound |dy_c| <= S_c / 2 * |x|_1.
  const double xav = std::sqrt(6.0 / 768.0);
  const auto big = uniform_tensor<float>({384, 384}, rng, -xav, xav);
  const auto xs = uniform_tensor<float>({16, 384}, rng);
  const auto bias = uniform_tensor<float>({384}, rng);
  const auto qt = quantize_tensor(big);
  const auto yq = quantized_linear(xs, qt, bias);
  const auto yf = linear(tape.constant(xs), tape.constant(big), tape.constant(bias)).value();
  for (Index r = 0; r < 16; ++r) {
    double l1 = 0;
    for (Index i = 0; i < 384; ++i) l1 += std::abs(xs(r, i));
    for (Index c = 0; c < 384; ++c) {
      CHECK(std::abs(yq(r, c) - yf(r, c)) <= qt.scales[static_cast<std::size_t>(c)] / 2 * l1 + 1e-5);
    }
  }
}

TEST_CASE("head scores") {
  auto cfg = small();
  DiTModel<double> m(cfg, 4, InitScheme::random);
  const auto scores = score_attention_heads(m);
  REQUIRE(scores.size() == 12);
  const Index d = 4;
  for (const auto& s : scores) {
    const auto& blk = m.slots().blocks[static_cast<std::size_t>(s.layer)].attn;
    double expect = 0;
    for (Slot w : {blk.wq, blk.wk, blk.wv}) {
      const auto& t = m.param(w).value;
      double sq = 0;
      for (Index r = s.head * d; r < (s.head + 1) * d; ++r)
        for (Index c = 0; c < t.dim(1); ++c) sq += t(r, c) * t(r, c);
      expect += std::sqrt(sq);
    }
    CHECK(s.score == doctest::Approx(expect).epsilon(1e-10));
  }

  // Copy head 0 into head 1 of layer 0, then double head 1.
  auto twin = m;
  const auto& a = twin.slots().blocks[0].attn;
  for (Slot w : {a.wq, a.wk, a.wv}) {
    auto& t = twin.param(w).value;
    for (Index r = 0; r < d; ++r)
      for (Index c = 0; c < t.dim(1); ++c) t(d + r, c) = 2 * t(r, c);
  }
  const auto ts = score_attention_heads(twin);
  CHECK(ts[1].score == doctest::Approx(2 * ts[0].score).epsilon(1e-12));
  CHECK(ts[1].score > ts[0].score);

  for (auto& p : m.parameters()) p.value.fill(0);
  for (const auto& s : score_attention_heads(m)) CHECK(s.score == 0.0);

  for (const char* v : {"med-4", "fg-2"}) {
    auto c = small();
    c.attention = parse_attention_variant(v);
    DiTModel<float> other(c, 0);
    CHECK_THROWS_AS(score_attention_heads(other), UnsupportedVariantError);
    CHECK_THROWS_AS(prune_heads(other, 2), UnsupportedVariantError);
  }
}

TEST_CASE("top-k selection matches a sort oracle") {
  CHECK(top_k_heads({3.2, 1.1, 5.0, 2.2, 0.9, 4.1}, 2) == std::vector<Index>{2, 5});
  CHECK(top_k_heads({1, 1, 1, 1}, 2) == std::vector<Index>{0, 1});
  CHECK_THROWS_AS(top_k_heads({1, 2}, 3), ConfigError);
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(12));
    std::vector<double> s;
    for (Index i = 0; i < n; ++i) s.push_back(static_cast<double>(rng.below(6)));  // many ties
    const Index k = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    // Oracle: pairs sorted by (-score, index).
    std::vector<std::pair<double, Index>> pairs;
    for (Index i = 0; i < n; ++i) pairs.push_back({-s[static_cast<std::size_t>(i)], i});
    std::sort(pairs.begin(), pairs.end());
    std::vector<Index> expect;
    for (Index i = 0; i < k; ++i) expect.push_back(pairs[static_cast<std::size_t>(i)].second);
    std::sort(expect.begin(), expect.end());
    CHECK(top_k_heads(s, k) == expect);
  }
}

TEST_CASE("pruning: identity at k=heads, idempotent, zero contribution") {
  for (const char* v : {"baseline", "shallow"}) {
    auto cfg = small();
    cfg.attention = parse_attention_variant(v);
    DiTModel<float> m(cfg, 2, InitScheme::random);
    const auto same = prune_heads(m, cfg.heads);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) CHECK(same.parameters()[i].value == m.parameters()[i].value);

    const auto p2 = prune_heads(m, 2);
    CHECK(live_heads(p2) == std::vector<Index>{2, 2});
    const auto again = prune_heads(p2, 2);
    for (std::size_t i = 0; i < m.parameters().size(); ++i) CHECK(again.parameters()[i].value == p2.parameters()[i].value);

    // Overwrite the out-projection columns of pruned heads: output must not move.
    auto scrambled = p2;
    Rng rng(5);
    const Index dq = scrambled.param(scrambled.slots().blocks[0].attn.wq).value.dim(0) / cfg.heads;
    for (const auto& blk : scrambled.slots().blocks) {
      const auto& wq = scrambled.param(blk.attn.wq).value;
      auto& wo = scrambled.param(blk.attn.wo).value;
      for (Index h = 0; h < cfg.heads; ++h) {
        bool dead = true;
        for (Index k = h * dq * wq.dim(1); k < (h + 1) * dq * wq.dim(1); ++k) dead = dead && wq[k] == 0.0f;
        if (!dead) continue;
        for (Index r = 0; r < wo.dim(0); ++r)
          for (Index c = h * dq; c < (h + 1) * dq; ++c) wo(r, c) = static_cast<float>(rng.uniform(-5, 5));
      }
    }
    const auto imgs = uniform_tensor<float>({2, 4, 8, 8}, rng);
    const std::vector<Index> t{3, 400}, y{0, 2};
    CHECK(predict(p2, imgs, t, y) == predict(scrambled, imgs, t, y));
  }
}

TEST_CASE("elided FLOPs decrease monotonically with fewer heads") {
  for (const char* name : {"S/2-base", "S/2-shallow", "XS/4-base"}) {
    const auto cfg = named_config(name);
    std::int64_t prev = count_flops(cfg).total;
    CHECK(count_flops(cfg, {.elide_pruned = true, .kept_heads = cfg.heads}).total == prev);
    for (Index k = cfg.heads - 1; k >= 1; --k) {
      const auto f = count_flops(cfg, {.elide_pruned = true, .kept_heads = k}).total;
      CHECK(f < prev);
      prev = f;
    }
  }
}

TEST_CASE("quantized model, checkpoint and composition with pruning") {
  auto cfg = small();
  cfg.moe = MoEConfig{.experts = 2, .active = 1, .frequency = 2};
  DiTModel<float> m(cfg, 8, InitScheme::random);
  const auto qm = quantize_model(prune_heads(m, 3));
  for (const auto& [slot, qt] : qm.quantized) {
    CHECK(qm.model.param(slot).role == ParamRole::linear_weight);
    CHECK(dequantize(qt) == qm.model.param(slot).value);
  }
  Index linear_count = 0;
  for (const auto& p : m.parameters()) linear_count += p.role == ParamRole::linear_weight;
  CHECK(static_cast<Index>(qm.quantized.size()) == linear_count);

  const auto dir = temp_dir("quant");
  save_quantized_checkpoint(qm, dir);
  const auto back = load_checkpoint(dir);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) CHECK(back.parameters()[i].value == qm.model.parameters()[i].value);
  Rng rng(1);
  const auto imgs = uniform_tensor<float>({1, 4, 8, 8}, rng);
  const std::vector<Index> t{10}, y{1};
  const auto out = predict(back, imgs, t, y);
  CHECK(out.all_finite());
  const auto ref = predict(m, imgs, t, y);
  CHECK(out.shape() == ref.shape());
  fs::remove_all(dir);
}
