#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ditopt/data/dataset.hpp"
#include "ditopt/diffusion/diffusion.hpp"
#include "ditopt/error.hpp"
#include "ditopt/numerics/ops.hpp"
#include "../test_util.hpp"

using namespace ditopt;
using ditopt::testing::uniform_tensor;

namespace {

ModelConfig one_block(Index input = 8) {
  ModelConfig c;
  c.name = "one-block";
  c.depth = 1;
  c.hidden = 32;
  c.heads = 2;
  c.input_size = input;
  c.num_classes = 4;
  c.frequency_dim = 32;
  return c;
}

}  // namespace

TEST_CASE("linear schedule invariants") {
  const auto s = NoiseSchedule::linear();
  CHECK(s.steps() == 1000);
  CHECK(s.beta(0) == doctest::Approx(1e-4));
  CHECK(s.beta(999) == doctest::Approx(2e-2));
  for (Index t = 1; t < s.steps(); ++t) {
    CHECK(s.beta(t) >= s.beta(t - 1));
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
  CHECK(s.alpha_bar(0) > 0.9998);
  CHECK_THROWS_AS(s.alpha_bar(1000), InputError);
  CHECK_THROWS_AS(NoiseSchedule(std::vector<double>{0.5, 1.0}), ConfigError);

  const auto r = s.respaced(50);
  CHECK(r.steps() == 50);
  CHECK(r.timestep_map().front() == 0);
  CHECK(r.timestep_map().back() == 999);
  for (Index i = 0; i < 50; ++i) {
    CHECK(r.alpha_bar(i) == doctest::Approx(s.alpha_bar(r.timestep_map()[static_cast<std::size_t>(i)])).epsilon(1e-12));
  }
  CHECK(s.respaced(1).timestep_map() == std::vector<Index>{0});
}

TEST_CASE("q_sample examples") {
  const NoiseSchedule quarter(std::vector<double>{0.75});  // alpha_bar_0 = 0.25
  const auto xt = q_sample(Tensord::from_list({1.0}), 0, Tensord::from_list({1.0}), quarter);
  CHECK(xt[0] == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-14));
  CHECK(xt[0] == doctest::Approx(1.3660).epsilon(1e-4));

  const auto s = NoiseSchedule::linear();
  Rng rng(1);
  const auto x0 = uniform_tensor<float>({2, 4, 3, 3}, rng);
  const Tensorf zero(x0.shape());
  for (Index t : {0, 500, 999}) {
    const auto xt0 = q_sample(x0, t, zero, s);
    const float a = static_cast<float>(std::sqrt(s.alpha_bar(t)));
    for (Index i = 0; i < x0.numel(); ++i) CHECK(xt0[i] == a * x0[i]);
  }
  const auto near = q_sample(x0, 0, uniform_tensor<float>(x0.shape(), rng), s);
  CHECK(max_abs_diff(near, x0) < 0.011f);

  const std::vector<Index> ts{0, 999};
  const auto per = q_sample(x0, ts, zero, s);
  CHECK(per[0] == static_cast<float>(std::sqrt(s.alpha_bar(0))) * x0[0]);
  CHECK(per[36] == static_cast<float>(std::sqrt(s.alpha_bar(999))) * x0[36]);
  const std::vector<Index> short_t{0};
  CHECK_THROWS_AS(q_sample(x0, short_t, zero, s), ShapeError);
}

TEST_CASE("q_sample variance law at 10k samples") {
  const auto s = NoiseSchedule::linear();
  Rng rng(3);
  const Index n = 10000;
  Tensord x0(Shape{n}), eps(Shape{n});
  for (Index i = 0; i < n; ++i) {
    x0[i] = rng.uniform(-1, 1);
    eps[i] = rng.normal();
  }
  auto var = [&](const Tensord& v) {
    const double m = std::accumulate(v.values().begin(), v.values().end(), 0.0) / n;
    double acc = 0;
    for (double a : v.values()) acc += (a - m) * (a - m);
    return acc / (n - 1);
  };
  const double v0 = var(x0);
  for (Index t : {0, 100, 400, 999}) {
    const double ab = s.alpha_bar(t);
    const double expect = ab * v0 + (1 - ab);
    CHECK(std::abs(var(q_sample(x0, t, eps, s)) - expect) / expect < 0.05);
  }
}

TEST_CASE("epsilon mse examples") {
  Rng rng(2);
  const auto eps = uniform_tensor<double>({2, 2, 3, 3}, rng);
  Tensord out(Shape{2, 4, 3, 3});
  for (Index b = 0; b < 2; ++b)
    for (Index k = 0; k < 18; ++k) {
      out[b * 36 + k] = eps[b * 18 + k];
      out[b * 36 + 18 + k] = 100.0;  // variance channels are ignored
    }
  Tape<double> tape(false);
  CHECK(epsilon_mse(tape.constant(out), eps).item() == 0.0);
  for (auto& v : out.values()) v += 0.5;
  CHECK(epsilon_mse(tape.constant(out), eps).item() == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("diffusion loss is non-negative and replays bit-exactly") {
  DiTModel<float> m(one_block(), 4, InitScheme::random);
  Rng rng(5);
  const auto s = NoiseSchedule::linear();
  for (int trial = 0; trial < 3; ++trial) {
    const auto x0 = uniform_tensor<float>({2, 4, 8, 8}, rng);
    Tensorf eps(x0.shape());
    for (auto& v : eps.values()) v = static_cast<float>(rng.normal());
    const std::vector<Index> t{static_cast<Index>(rng.below(1000)), static_cast<Index>(rng.below(1000))}, y{0, 3};
    const float a = diffusion_loss(m, x0, t, y, eps, s);
    const float b = diffusion_loss(m, x0, t, y, eps, s);
    CHECK(a >= 0.0f);
    CHECK(a == b);
  }
}

TEST_CASE("cfg_combine examples") {
  const auto c = Tensord::from_list({2, -1}), u = Tensord::from_list({1, 3});
  CHECK(cfg_combine(c, u, 1.0) == c);
  CHECK(cfg_combine(c, u, 0.0) == u);
  CHECK(cfg_combine(c, u, 4.0)[0] == 5.0);
  CHECK_THROWS_AS(cfg_combine(c, Tensord::from_list({1}), 2.0), ShapeError);
}

TEST_CASE("sampler call counts and guidance batching") {
  const auto s = NoiseSchedule::linear();
  const std::vector<Index> labels{2, 0, 1};
  Index calls = 0;
  Denoiser<double> stub = [&](const Tensord& x, std::span<const Index> t, std::span<const Index> y) {
    ++calls;
    CHECK(static_cast<Index>(t.size()) == x.dim(0));
    if (x.dim(0) == 6) {
      for (int i = 0; i < 3; ++i) CHECK(y[static_cast<std::size_t>(3 + i)] == kNullLabel);
    }
    return Tensord(Shape{x.dim(0), 2 * x.dim(1), x.dim(2), x.dim(3)});
  };
  auto r1 = ddpm_sample_loop(stub, labels, 2, 4, s, {.steps = 1, .cfg_scale = 1.0, .seed = 0});
  CHECK(calls == 1);
  CHECK(r1.model_calls == 1);
  calls = 0;
  auto r2 = ddpm_sample_loop(stub, labels, 2, 4, s, {.steps = 7, .cfg_scale = 4.0, .seed = 0});
  CHECK(calls == 7);
  CHECK(r2.images.shape() == Shape{3, 2, 4, 4});
}

TEST_CASE("sampling a random-weight model: finite, clamped, reproducible") {
  DiTModel<float> m(one_block(), 9, InitScheme::random);
  const auto s = NoiseSchedule::linear();
  const std::vector<Index> labels{0, 3};
  const SamplerOptions opts{.steps = 10, .cfg_scale = 4.0, .seed = 21};
  const auto a = ddpm_sample(m, labels, s, opts);
  const auto b = ddpm_sample(m, labels, s, opts);
  CHECK(a.images == b.images);
  CHECK(a.images.all_finite());
  for (float v : a.images.values()) CHECK((v >= -1.0f && v <= 1.0f));
  auto other = opts;
  other.seed = 22;
  CHECK_FALSE(ddpm_sample(m, labels, s, other).images == a.images);
  const std::vector<Index> bad{4};
  CHECK_THROWS_AS(ddpm_sample(m, bad, s, opts), InputError);
}

TEST_CASE("sample_batch draws valid indices and applies label dropout") {
  const auto s = NoiseSchedule::linear();
  Rng rng(0);
  const auto images = uniform_tensor<float>({10, 4, 2, 2}, rng);
  const std::vector<Index> labels{0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
  const auto b = sample_batch<float>(images, labels, 64, s, 0.0, rng);
  CHECK(b.x0.shape() == Shape{64, 4, 2, 2});
  CHECK(b.eps.shape() == b.x0.shape());
  for (Index t : b.t) CHECK((t >= 0 && t < 1000));
  for (Index y : b.y) CHECK((y >= 0 && y < 4));
  const auto dropped = sample_batch<float>(images, labels, 32, s, 1.0, rng);
  for (Index y : dropped.y) CHECK(y == kNullLabel);
  const std::vector<Index> short_labels{0};
  CHECK_THROWS_AS(sample_batch<float>(images, short_labels, 4, s, 0.0, rng), InputError);
}

TEST_CASE("training sanity: 500 steps of a 1-block model reduce the loss") {
  auto cfg = one_block(16);
  cfg.hidden = 64;
  cfg.heads = 4;
  cfg.num_classes = 8;
  const auto data = make_synthetic_dataset({.classes = 8, .per_class = 8, .size = 16, .seed = 0});
  DiTModel<float> m(cfg, 0);
  AdamW<float> opt({.lr = 1e-3});
  const auto s = NoiseSchedule::linear();
  Rng rng(1);
  std::vector<double> losses;
  for (int step = 0; step < 500; ++step) {
    const auto batch = sample_batch<float>(data.latents, data.labels, 8, s, cfg.cfg_dropout, rng);
    losses.push_back(diffusion_train_step(m, opt, batch, s).loss);
  }
  const double first = std::accumulate(losses.begin(), losses.begin() + 100, 0.0) / 100;
  const double last = std::accumulate(losses.end() - 100, losses.end(), 0.0) / 100;
  MESSAGE("first-100 mean ", first, ", last-100 mean ", last);
  CHECK(last < first);
  CHECK(last <= 0.8 * first);
}
