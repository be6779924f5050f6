#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ditopt/costmodel/costmodel.hpp"
#include "ditopt/dit/checkpoint.hpp"
#include "ditopt/dit/forward.hpp"
#include "ditopt/error.hpp"
#include "ditopt/numerics/grad_check.hpp"
#include "ditopt/numerics/ops.hpp"
#include "../test_util.hpp"

using namespace ditopt;
using ditopt::testing::uniform_tensor;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(Index depth = 2, Index hidden = 16, Index heads = 2, Index input = 8, Index patch = 2) {
  ModelConfig c;
  c.name = "tiny";
  c.depth = depth;
  c.hidden = hidden;
  c.heads = heads;
  c.input_size = input;
  c.patch = patch;
  c.num_classes = 5;
  c.frequency_dim = 16;
  return c;
}

fs::path temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("ditopt_test_" + tag);
  fs::remove_all(dir);
  return dir;
}

double silu_ref(double x) { return x / (1 + std::exp(-x)); }
double gelu_ref(double x) {
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// y = W x + b for W [out x in] stored row-major.
std::vector<double> affine(const Tensord& w, const Tensord& b, const std::vector<double>& x) {
  const Index out = w.dim(0), in = w.dim(1);
  std::vector<double> y(static_cast<std::size_t>(out));
  for (Index o = 0; o < out; ++o) {
    double s = b[o];
    for (Index i = 0; i < in; ++i) s += w(o, i) * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = s;
  }
  return y;
}

std::vector<double> layer_norm_ref(const std::vector<double>& x) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  std::vector<double> y;
  for (double v : x) y.push_back((v - mu) / std::sqrt(var + 1e-6));
  return y;
}

std::vector<double> chunk(const std::vector<double>& v, Index i, Index C) {
  return {v.begin() + i * C, v.begin() + (i + 1) * C};
}

}  // namespace

TEST_CASE("presets and names") {
  const auto s2 = preset("S/2");
  CHECK(s2.depth == 12);
  CHECK(s2.hidden == 384);
  CHECK(s2.heads == 6);
  CHECK(s2.patch == 2);
  CHECK(s2.tokens() == 256);
  CHECK(preset("S/4").patch == 4);
  const auto xs = preset("XS/2");
  CHECK(xs.depth == 6);
  CHECK(xs.hidden == 256);
  CHECK(xs.heads == 4);
  CHECK(preset("XS/4").patch == 4);
  CHECK_THROWS_AS(preset("L/2"), ConfigError);

  CHECK(named_config("S/2-med-16").attention == AttentionVariant::mediated(16));
  CHECK(named_config("S/2-fg-3").attention == AttentionVariant::focused(3));
  CHECK(named_config("S/2-shallow").attention.kind == AttentionKind::shallow);
  const auto moe = named_config("MoE-S/2-4E1A");
  REQUIRE(moe.moe.has_value());
  CHECK(moe.moe->experts == 4);
  CHECK(moe.moe->active == 1);
  CHECK(moe.moe->frequency == 2);
  CHECK(named_config("MoE-XS/2-8E2A").moe->frequency == 1);
  CHECK(table_suite().size() == 12);
}

TEST_CASE("config json round trip and partial overrides") {
  for (const auto& c : table_suite()) {
    nlohmann::json j = c;
    CHECK(j.get<ModelConfig>() == c);
  }
  ModelConfig c = tiny();
  from_json(nlohmann::json{{"depth", 3}, {"attention", "fg-2"}}, c);
  CHECK(c.depth == 3);
  CHECK(c.hidden == 16);
  CHECK(c.attention == AttentionVariant::focused(2));
  ModelConfig p;
  from_json(nlohmann::json{{"preset", "XS/4-shallow"}, {"depth", 2}}, p);
  CHECK(p.hidden == 256);
  CHECK(p.patch == 4);
  CHECK(p.depth == 2);
}

TEST_CASE("config validation") {
  auto c = tiny();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.input_size = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.attention = AttentionVariant::mediated(100);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(DiTModel<float>(c, 0), ConfigError);
}

TEST_CASE("timestep frequencies and embedding") {
  const std::vector<Index> zero{0};
  const auto f = timestep_frequencies<double>(zero, 8);
  for (Index i = 0; i < 4; ++i) CHECK(f[i] == 1.0);
  for (Index i = 4; i < 8; ++i) CHECK(f[i] == 0.0);

  DiTModel<double> m(tiny(), 3, InitScheme::random);
  const auto a = timestep_embedding(m, 10), b = timestep_embedding(m, 11), a2 = timestep_embedding(m, 10);
  CHECK(a == a2);
  double dist = 0;
  for (Index i = 0; i < a.numel(); ++i) dist += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(dist > 0);
}

TEST_CASE("label embedding and dropout") {
  auto cfg = tiny();
  DiTModel<double> m(cfg, 1, InitScheme::random);
  Tape<double> tape(false);
  const auto vars = bind_model(tape, std::as_const(m));
  const std::vector<Index> y{kNullLabel, 2};
  const auto e = label_embed(vars, cfg, y).value();
  const auto& table = m.param("y_embed.table").value;
  for (Index c = 0; c < cfg.hidden; ++c) {
    CHECK(e(0, c) == table(cfg.num_classes, c));
    CHECK(e(1, c) == table(2, c));
  }
  Rng rng(0);
  const std::vector<Index> labels{0, 1, 2, 3, 4, 0, 1, 2};
  CHECK(drop_labels(labels, 0.0, rng) == labels);
  for (Index v : drop_labels(labels, 1.0, rng)) CHECK(v == kNullLabel);
  cfg.cfg_dropout = 1.0;
  const auto all_null = label_embed(vars, cfg, labels, true, &rng).value();
  for (Index r = 0; r < 8; ++r) CHECK(all_null(r, 0) == table(cfg.num_classes, 0));
  const std::vector<Index> bad{5};
  CHECK_THROWS_AS(label_embed(vars, tiny(), bad), InputError);
}

TEST_CASE("block hand oracle B=1 N=1 C=4") {
  auto cfg = tiny(1, 4, 1, 2, 2);
  DiTModel<double> m(cfg, 7, InitScheme::random);
  Rng rng(3);
  const auto x = uniform_tensor<double>({1, 4}, rng);
  const auto cond = uniform_tensor<double>({1, 4}, rng);
  Tape<double> tape(false);
  const auto vars = bind_model(tape, std::as_const(m));
  const auto out = dit_block_forward(cfg, vars.blocks[0], tape.constant(x), tape.constant(cond), 1).value();

  auto P = [&](const char* name) -> const Tensord& { return m.param(std::string("blocks.0.") + name).value; };
  std::vector<double> xs(x.values().begin(), x.values().end()), sc;
  for (double v : cond.values()) sc.push_back(silu_ref(v));
  const auto mod = affine(P("adaLN.weight"), P("adaLN.bias"), sc);
  const auto shift1 = chunk(mod, 0, 4), scale1 = chunk(mod, 1, 4), gate1 = chunk(mod, 2, 4);
  const auto shift2 = chunk(mod, 3, 4), scale2 = chunk(mod, 4, 4), gate2 = chunk(mod, 5, 4);

  auto h = layer_norm_ref(xs);
  for (int c = 0; c < 4; ++c) h[c] = h[c] * (1 + scale1[c]) + shift1[c];
  // One token: the softmax weight is exactly 1, so attention returns its value row.
  const auto v = affine(P("attn.v.weight"), P("attn.v.bias"), h);
  const auto a = affine(P("attn.out.weight"), P("attn.out.bias"), v);
  std::vector<double> x1(4);
  for (int c = 0; c < 4; ++c) x1[c] = xs[c] + gate1[c] * a[c];

  auto h2 = layer_norm_ref(x1);
  for (int c = 0; c < 4; ++c) h2[c] = h2[c] * (1 + scale2[c]) + shift2[c];
  auto hidden = affine(P("mlp.fc1.weight"), P("mlp.fc1.bias"), h2);
  for (auto& u : hidden) u = gelu_ref(u);
  const auto mlp = affine(P("mlp.fc2.weight"), P("mlp.fc2.bias"), hidden);
  for (int c = 0; c < 4; ++c) CHECK(out[c] == doctest::Approx(x1[c] + gate2[c] * mlp[c]).epsilon(1e-12));
}

TEST_CASE("every block is an exact identity at adaLN-Zero init") {
  std::vector<ModelConfig> configs;
  for (auto v : {AttentionVariant::baseline(), AttentionVariant::shallow(), AttentionVariant::mediated(4),
                 AttentionVariant::focused(2)}) {
    auto c = tiny();
    c.attention = v;
    configs.push_back(c);
  }
  auto moe = tiny();
  moe.moe = MoEConfig{.experts = 4, .active = 2};
  configs.push_back(moe);
  for (const auto& cfg : configs) {
    DiTModel<float> m(cfg, 11);
    Rng rng(1);
    const auto x = uniform_tensor<float>({2 * cfg.tokens(), cfg.hidden}, rng, -3, 3);
    const auto cond = uniform_tensor<float>({2, cfg.hidden}, rng, -3, 3);
    Tape<float> tape(false);
    const auto vars = bind_model(tape, std::as_const(m));
    for (const auto& b : vars.blocks) {
      CHECK(dit_block_forward(cfg, b, tape.constant(x), tape.constant(cond), 2).value() == x);
    }
    // Final layer is zero too, so the model output is exactly zero.
    const auto imgs = uniform_tensor<float>({2, 4, cfg.input_size, cfg.input_size}, rng);
    const std::vector<Index> t{3, 999}, y{0, kNullLabel};
    const auto out = predict(m, imgs, t, y);
    CHECK(out.all_finite());
    CHECK(max_abs_diff(out, Tensorf(out.shape())) == 0.0f);
  }
}

TEST_CASE("MoE block with E=1 K=1 equals the dense block") {
  auto dense_cfg = tiny(1);
  auto moe_cfg = dense_cfg;
  moe_cfg.moe = MoEConfig{.experts = 1, .active = 1};
  DiTModel<double> dense(dense_cfg, 5, InitScheme::random);
  DiTModel<double> moe(moe_cfg, 5, InitScheme::random);
  for (auto& p : moe.parameters()) {
    std::string name = p.name;
    const auto pos = name.find("moe.experts.0.");
    if (pos != std::string::npos) name = name.substr(0, pos) + "mlp." + name.substr(pos + 14);
    if (name.find("router") != std::string::npos) continue;
    p.value = dense.param(name).value;
  }
  Rng rng(2);
  const auto imgs = uniform_tensor<double>({2, 4, 8, 8}, rng);
  const std::vector<Index> t{10, 500}, y{1, 3};
  CHECK(max_abs_diff(predict(dense, imgs, t, y), predict(moe, imgs, t, y)) == 0.0);
}

TEST_CASE("S/2 forward shape and variant shape contract") {
  const std::vector<Index> t{1, 2}, y{0, 1};
  Rng rng(0);
  const auto imgs = uniform_tensor<float>({2, 4, 32, 32}, rng);
  DiTModel<float> m(named_config("S/2-base"), 0);
  CHECK(predict(m, imgs, t, y).shape() == Shape{2, 8, 32, 32});
  for (const char* v : {"shallow", "med-4", "fg-2"}) {
    auto c = tiny();
    c.attention = parse_attention_variant(v);
    DiTModel<float> mv(c, 0, InitScheme::random);
    const auto small = uniform_tensor<float>({2, 4, 8, 8}, rng);
    CHECK(predict(mv, small, t, y).shape() == Shape{2, 8, 8, 8});
  }
}

TEST_CASE("determinism: same seed, same weights, same bits") {
  auto cfg = tiny();
  cfg.moe = MoEConfig{.experts = 3, .active = 2, .frequency = 2};
  DiTModel<float> a(cfg, 42, InitScheme::random), b(cfg, 42, InitScheme::random), c(cfg, 43, InitScheme::random);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i].value == b.parameters()[i].value);
  CHECK_FALSE(a.parameters()[0].value == c.parameters()[0].value);
  Rng rng(9);
  const auto imgs = uniform_tensor<float>({3, 4, 8, 8}, rng);
  const std::vector<Index> t{0, 1, 999}, y{0, kNullLabel, 4};
  CHECK(predict(a, imgs, t, y) == predict(a, imgs, t, y));
  CHECK(predict(a, imgs, t, y) == predict(b, imgs, t, y));
}

TEST_CASE("patchify and unpatchify index maps") {
  Rng rng(0);
  const Index B = 2, C = 3, p = 2, g = 2, H = g * p;
  const auto img = uniform_tensor<double>({B, C, H, H}, rng);
  const auto tok = patchify(img, p);
  CHECK(tok.shape() == Shape{B * g * g, C * p * p});
  for (Index b = 0; b < B; ++b)
    for (Index gy = 0; gy < g; ++gy)
      for (Index gx = 0; gx < g; ++gx)
        for (Index c = 0; c < C; ++c)
          for (Index py = 0; py < p; ++py)
            for (Index px = 0; px < p; ++px) {
              const double expect = img[((b * C + c) * H + gy * p + py) * H + gx * p + px];
              CHECK(tok((b * g + gy) * g + gx, (c * p + py) * p + px) == expect);
            }
  Tape<double> tape(false);
  const auto feats = uniform_tensor<double>({B * g * g, p * p * C}, rng);
  const auto back = unpatchify(tape.constant(feats), B, C, p, g).value();
  for (Index b = 0; b < B; ++b)
    for (Index gy = 0; gy < g; ++gy)
      for (Index gx = 0; gx < g; ++gx)
        for (Index py = 0; py < p; ++py)
          for (Index px = 0; px < p; ++px)
            for (Index c = 0; c < C; ++c)
              CHECK(back[((b * C + c) * H + gy * p + py) * H + gx * p + px] ==
                    feats((b * g + gy) * g + gx, (py * p + px) * C + c));
}

TEST_CASE("gradient reaches every parameter") {
  for (const char* v : {"baseline", "shallow", "med-2", "fg-2"}) {
    auto cfg = tiny();
    cfg.attention = parse_attention_variant(v);
    cfg.moe = MoEConfig{.experts = 2, .active = 2, .frequency = 2};
    DiTModel<float> m(cfg, 1, InitScheme::random);
    Rng rng(4);
    const auto imgs = uniform_tensor<float>({2, 4, 8, 8}, rng);
    const std::vector<Index> t{5, 700}, y{1, 2};
    m.zero_grad();
    Tape<float> tape;
    auto res = model_forward(tape, m, imgs, t, y);
    auto loss = add(mean(mul(res.out, res.out)), balance_loss<float>(res.routing, 0.01f));
    tape.backward(loss);
    for (const auto& p : m.parameters()) {
      if (p.frozen) continue;
      bool nonzero = false;
      for (float g : p.grad.values()) nonzero = nonzero || g != 0.0f;
      INFO(v, " ", p.name);
      CHECK(nonzero);
    }
  }
}

TEST_CASE("whole-model gradient check") {
  for (const char* v : {"baseline", "shallow", "med-2", "fg-2"}) {
    auto cfg = tiny(1, 8, 2, 4, 2);
    cfg.attention = parse_attention_variant(v);
    cfg.moe = MoEConfig{.experts = 2, .active = 1};
    DiTModel<double> m(cfg, 2, InitScheme::random);
    Rng rng(6);
    const auto imgs = uniform_tensor<double>({2, 4, 4, 4}, rng);
    const auto r = uniform_tensor<double>({2, 8, 4, 4}, rng);
    const std::vector<Index> t{5, 700}, y{1, kNullLabel};
    auto loss = [&](Tape<double>& tape) {
      auto res = model_forward(tape, m, imgs, t, y);
      return add(sum(mul(res.out, tape.constant(r))), balance_loss<double>(res.routing, 0.1));
    };
    INFO(v);
    CHECK(grad_check_params<double>(loss, m.trainable(), {.eps = 1e-4, .max_elements_per_param = 3, .seed = 1}) <=
          1e-2);
  }
}

TEST_CASE("walked parameter count equals the closed form") {
  for (const char* name : {"S/2-base", "XS/4-base", "S/2-med-4", "S/2-fg-3", "S/2-shallow"}) {
    const auto cfg = named_config(name);
    CHECK(DiTModel<float>(cfg, 0).parameter_count() == count_params(cfg).total);
  }
  auto c = tiny();
  c.moe = MoEConfig{.experts = 3, .active = 1, .frequency = 2, .shared_experts = 1};
  CHECK(DiTModel<float>(c, 0).parameter_count() == count_params(c).total);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  auto cfg = tiny();
  cfg.attention = AttentionVariant::mediated(2);
  cfg.moe = MoEConfig{.experts = 2, .active = 1};
  DiTModel<float> m(cfg, 77, InitScheme::random);
  const auto dir = temp_dir("ckpt");
  save_checkpoint(m, dir);
  CHECK(fs::exists(dir / kManifestFile));
  CHECK(fs::exists(dir / kBlobFile));
  const auto back = load_checkpoint(dir);
  CHECK(back.config() == cfg);
  REQUIRE(back.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == m.parameters()[i].name);
    CHECK(back.parameters()[i].value == m.parameters()[i].value);
  }
  fs::resize_file(dir / kBlobFile, fs::file_size(dir / kBlobFile) - 4);
  CHECK_THROWS_AS(load_checkpoint(dir), InputError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), InputError);
  fs::remove_all(dir);
}
