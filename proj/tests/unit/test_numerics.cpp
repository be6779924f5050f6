#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ditopt/numerics/grad_check.hpp"
#include "ditopt/numerics/mac_counter.hpp"
#include "ditopt/numerics/ops.hpp"
#include "ditopt/numerics/optim.hpp"
#include "../grad_suite.hpp"

using namespace ditopt;
using namespace ditopt::testing;

TEST_CASE("tensor invariants") {
  Tensorf t(Shape{2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensorf(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
}

TEST_CASE("softmax examples") {
  auto uniform = softmax(Tensord::from_list({0, 0, 0}), 0);
  for (double v : uniform.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  auto big = softmax(Tensorf::from_list({1000.f, 1000.f}));
  CHECK(big[0] == 0.5f);
  CHECK(big[1] == 0.5f);

  // Oracle: exp/sum in long double.
  long double e[3], z = 0;
  for (int i = 0; i < 3; ++i) z += (e[i] = std::exp(static_cast<long double>(i + 1)));
  auto y = softmax(Tensord::from_list({1, 2, 3}));
  for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(static_cast<double>(e[i] / z)).epsilon(1e-12));
  CHECK(y[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(y[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(y[2] == doctest::Approx(0.66524).epsilon(1e-4));

  Tensorf bad = Tensorf::from_list({1.f, NAN});
  CHECK_THROWS_AS(softmax(bad), NumericError);
}

TEST_CASE("softmax rows sum to one including extremes") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = uniform_tensor<float>({4, 9}, rng, -1000.0, 1000.0);
    const Index axis = trial % 2;
    auto y = softmax(x, axis);
    if (axis == 1) {
      for (Index r = 0; r < 4; ++r) {
        double s = 0;
        Index best = 0;
        for (Index c = 0; c < 9; ++c) {
          s += y(r, c);
          if (x(r, c) > x(r, best)) best = c;
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
        for (Index c = 0; c < 9; ++c) CHECK(y(r, best) >= y(r, c));
      }
    } else {
      for (Index c = 0; c < 9; ++c) {
        double s = 0;
        for (Index r = 0; r < 4; ++r) s += y(r, c);
        CHECK(std::abs(s - 1.0) <= 1e-6);
      }
    }
  }
}

TEST_CASE("adaptive average pooling") {
  Rng rng(1);
  auto q = uniform_tensor<double>({2, 5, 3}, rng);
  CHECK(adaptive_avg_pool_tokens(q, 5) == q);

  auto one = adaptive_avg_pool_tokens(q, 1);
  for (Index h = 0; h < 2; ++h)
    for (Index c = 0; c < 3; ++c) {
      double m = 0;
      for (Index j = 0; j < 5; ++j) m += q[(h * 5 + j) * 3 + c];
      CHECK(one[h * 3 + c] == doctest::Approx(m / 5));
    }

  Tensorf t(Shape{4, 1}, std::vector<float>{1, 3, 5, 7});
  auto p = adaptive_avg_pool_tokens(t, 2);
  CHECK(p[0] == 2.f);
  CHECK(p[1] == 6.f);

  CHECK_THROWS_AS(adaptive_avg_pool_tokens(t, 5), ConfigError);
  CHECK_THROWS_AS(adaptive_avg_pool_tokens(t, 0), ConfigError);
}

TEST_CASE("pool then repeat conserves the global mean") {
  Rng rng(3);
  for (Index n : {1, 2, 3, 4, 7}) {
    auto x = uniform_tensor<float>({7, 2}, rng);
    auto p = adaptive_avg_pool_tokens(x, n);
    // Expand every pooled token back over its bucket.
    for (Index c = 0; c < 2; ++c) {
      double in_sum = 0, out_sum = 0;
      for (Index j = 0; j < 7; ++j) in_sum += x(j, c);
      for (Index i = 0; i < n; ++i) {
        const Index lo = i * 7 / n, hi = (i + 1) * 7 / n;
        out_sum += p(i, c) * static_cast<double>(hi - lo);
      }
      CHECK(std::abs(in_sum - out_sum) <= 1e-5);
    }
  }
}

TEST_CASE("depthwise conv examples") {
  Rng rng(2);
  auto v = uniform_tensor<float>({9, 2}, rng);
  Tensorf delta(Shape{2, 3, 3});
  delta[4] = 1;
  delta[9 + 4] = 1;
  CHECK(depthwise_conv_tokens(v, 3, 3, delta) == v);

  Tensorf zero(Shape{2, 3, 3});
  const auto zeroed = depthwise_conv_tokens(v, 3, 3, zero);
  for (float x : zeroed.values()) CHECK(x == 0.f);

  Tensorf grid(Shape{4, 1}, std::vector<float>{1, 2, 3, 4});
  Tensorf ones(Shape{1, 3, 3}, 1.f);
  const auto summed = depthwise_conv_tokens(grid, 2, 2, ones);
  for (float x : summed.values()) CHECK(x == 10.f);

  CHECK_THROWS_AS(depthwise_conv_tokens(grid, 3, 2, ones), ShapeError);
}

TEST_CASE("grad_check examples") {
  Rng rng(4);
  auto x = uniform_tensor<double>({6}, rng);
  ScalarFunction<double> sum_fn = [](Tape<double>&, const Var<double>& v) { return sum(v); };
  CHECK(grad_check(sum_fn, x, 1e-3) < 1e-6);

  ScalarFunction<double> sq = [](Tape<double>&, const Var<double>& v) { return sum(mul(v, v)); };
  auto x12 = Tensord::from_list({1, 2});
  CHECK(grad_check(sq, x12, 1e-3) < 1e-3);
  {
    Tape<double> tape;
    auto v = tape.variable(x12);
    tape.backward(sum(mul(v, v)));
    CHECK((*tape.grad(v))[0] == 2.0);
    CHECK((*tape.grad(v))[1] == 4.0);
  }
  // float32 at dyadic points stays within the quadratic example bound.
  ScalarFunction<float> sqf = [](Tape<float>&, const Var<float>& v) { return sum(mul(v, v)); };
  CHECK(grad_check(sqf, Tensorf::from_list({1.f, 2.f}), 1e-3f) < 1e-3f);

  CHECK_THROWS_AS(grad_check(sum_fn, x, 1e-1), ConfigError);
}

TEST_CASE("tape accumulates and empty tape yields zero gradients") {
  Tape<double> tape;
  auto x = tape.variable(Tensord::from_list({3.0}));
  auto y = add(mul(x, x), x);  // x reused: dy/dx = 2x + 1
  tape.backward(sum(y));
  CHECK((*tape.grad(x))[0] == 7.0);

  Parameter<double> p{"w", Tensord::from_list({1, 2}), {}, ParamRole::linear_weight, false};
  p.zero_grad();
  Tape<double> empty;
  auto c = empty.constant(Tensord::scalar(5));
  empty.bind(p);
  empty.backward(c);
  CHECK(empty.op_count() == 0);
  for (double g : p.grad.values()) CHECK(g == 0.0);
}

TEST_CASE("matmul associativity") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Tape<float> tape(false);
    auto a = tape.constant(uniform_tensor<float>({16, 16}, rng));
    auto b = tape.constant(uniform_tensor<float>({16, 16}, rng));
    auto c = tape.constant(uniform_tensor<float>({16, 16}, rng));
    auto left = matmul(matmul(a, b), c);
    auto right = matmul(a, matmul(b, c));
    CHECK(max_abs_diff(left.value(), right.value()) <= 1e-3f);
  }
}

TEST_CASE("mac counter sees forward matmuls only") {
  Tape<float> tape;
  auto a = tape.variable(Tensorf(Shape{3, 4}, 1.f));
  auto w = tape.variable(Tensorf(Shape{5, 4}, 1.f));
  MacCounter counter;
  Var<float> y;
  {
    MacCategory cat("attention");
    y = linear(a, w);
  }
  CHECK(counter.total() == 3 * 4 * 5);
  CHECK(counter.category("attention") == 60);
  tape.backward(sum(y));
  CHECK(counter.total() == 60);
}

namespace {


}  // namespace

TEST_CASE("every differentiable op passes the finite-difference check") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& c : op_grad_errors(seed)) {
      INFO(c.name, " seed ", seed);
      CHECK(c.error < 1e-2);
    }
  }
}

TEST_CASE("focusing transform") {
  auto x = Tensord(Shape{1, 2}, std::vector<double>{1, 2});
  CHECK(focusing_transform(x, 1) == x);
  auto y = focusing_transform(x, 3);
  CHECK(y[0] == doctest::Approx(0.2774).epsilon(1e-3));
  CHECK(y[1] == doctest::Approx(2.2188).epsilon(1e-3));
  CHECK(std::hypot(y[0], y[1]) == doctest::Approx(std::sqrt(5.0)).epsilon(1e-12));

  Tensord zero(Shape{2, 3});
  CHECK(focusing_transform(zero, 3) == zero);

  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    auto r = uniform_tensor<double>({1, 8}, rng);
    auto f = focusing_transform(r, 3);
    double n0 = 0, n1 = 0;
    Index arg0 = 0, arg1 = 0;
    for (Index c = 0; c < 8; ++c) {
      n0 += r[c] * r[c];
      n1 += f[c] * f[c];
      if (std::abs(r[c]) > std::abs(r[arg0])) arg0 = c;
      if (std::abs(f[c]) > std::abs(f[arg1])) arg1 = c;
    }
    CHECK(std::abs(std::sqrt(n1) - std::sqrt(n0)) <= 1e-5 * std::sqrt(n0));
    CHECK(arg0 == arg1);
    CHECK(std::abs(f[arg1]) / std::sqrt(n1) >= std::abs(r[arg0]) / std::sqrt(n0) - 1e-12);
  }
}

TEST_CASE("AdamW reduces a quadratic and skips frozen parameters") {
  Parameter<double> p{"w", Tensord::from_list({3, -2}), {}, ParamRole::linear_weight, false};
  Parameter<double> frozen{"f", Tensord::from_list({1}), {}, ParamRole::linear_weight, true};
  std::vector<Parameter<double>*> params{&p, &frozen};
  AdamW<double> opt({.lr = 0.1});
  for (int i = 0; i < 200; ++i) {
    for (auto* q : params) q->zero_grad();
    Tape<double> tape;
    auto w = tape.bind(p);
    auto f = tape.bind(frozen);
    tape.backward(add(sum(mul(w, w)), sum(mul(f, f))));
    opt.step(params);
  }
  CHECK(std::abs(p.value[0]) < 0.05);
  CHECK(frozen.value[0] == 1.0);
}
