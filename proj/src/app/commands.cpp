#include "ditopt/app/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>

#include "ditopt/compress/compress.hpp"
#include "ditopt/costmodel/costmodel.hpp"
#include "ditopt/diffusion/diffusion.hpp"
#include "ditopt/distill/distill.hpp"
#include "ditopt/dit/checkpoint.hpp"
#include "ditopt/error.hpp"
#include "ditopt/evalmetrics/evalmetrics.hpp"

namespace ditopt::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kDataStream = 0xD1A7A5EEDULL;

void snapshot(const RunConfig& config, const ModelConfig* model = nullptr) {
  fs::create_directories(config.out);
  json j = config;
  if (model != nullptr) j["model"] = *model;
  write_json_file(config.out / "resolved_config.json", j);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

class LossLog {
 public:
  explicit LossLog(const fs::path& path) : out_(path) {
    if (!out_) throw InputError("cannot write " + path.string());
    out_ << kLossCsvHeader << '\n';
  }
  void write(Index step, const StepLosses& l) {
    out_ << step << ',' << fmt(l.loss) << ',' << fmt(l.l_diff) << ',' << fmt(l.l_kd) << ',' << fmt(l.l_balance)
         << '\n';
  }

 private:
  std::ofstream out_;
};

fs::path step_dir(const fs::path& out, Index step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06lld", static_cast<long long>(step));
  return out / "checkpoints" / buf;
}

void report_progress(std::ostream& log, Index step, Index total, const StepLosses& l) {
  if (step == total || step % 50 == 0) log << "step " << step << "/" << total << "  loss " << fmt(l.loss) << '\n';
}

Image tensor_slice_to_image(const Tensor<float>& images, Index i) {
  const Index C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const Index plane = H * W;
  if (C == kLatentChannels) {
    Tensor<float> one(Shape{C, H, W});
    std::copy_n(images.data() + i * C * plane, C * plane, one.data());
    return latent_to_image(one);
  }
  // No latent decoder for other widths: show channel 0 as gray.
  Image img(W, H);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const float v = std::clamp(0.5f * (images[i * C * plane + y * W + x] + 1.0f), 0.0f, 1.0f);
      for (Index c = 0; c < 3; ++c) img.at(x, y, c) = v;
    }
  return img;
}

std::vector<fs::path> image_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

Tensor<double> image_tensor(const Image& img) {
  Tensor<double> t(Shape{img.height, img.width, 3});
  for (std::size_t i = 0; i < img.rgb.size(); ++i) t[static_cast<Index>(i)] = img.rgb[i];
  return t;
}

}  // namespace

int run_train(const RunConfig& config, std::ostream& log) {
  ModelConfig mc = config.model();
  const Dataset data = load_dataset(config.data, mc);
  mc.num_classes = data.num_classes();
  mc.validate();
  snapshot(config, &mc);

  DiTModel<float> model(mc, config.seed);
  AdamW<float> opt({.lr = config.lr, .weight_decay = config.weight_decay});
  const NoiseSchedule schedule = NoiseSchedule::linear();
  Rng rng(config.seed ^ kDataStream);
  LossLog losses(config.out / "loss.csv");
  log << "training " << mc.name << " (" << model.parameter_count() << " params) on " << data.size() << " images, "
      << data.num_classes() << " classes\n";
  for (Index step = 1; step <= config.steps; ++step) {
    const auto batch = sample_batch<float>(data.latents, data.labels, config.batch, schedule, mc.cfg_dropout, rng);
    const StepLosses l = diffusion_train_step(model, opt, batch, schedule);
    losses.write(step, l);
    report_progress(log, step, config.steps, l);
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      save_checkpoint(model, step_dir(config.out, step));
    }
  }
  save_checkpoint(model, config.out / "checkpoint");
  return kOk;
}

int run_distill(const RunConfig& config, std::ostream& log) {
  if (config.teacher.empty()) throw ConfigError("distill needs --teacher <checkpoint dir>");
  DiTModel<float> teacher = load_checkpoint(config.teacher);
  teacher.set_frozen(true);
  ModelConfig sc = teacher.config();
  from_json(config.model_spec, sc);
  sc.num_classes = teacher.config().num_classes;
  sc.validate();
  if (sc.input_size != teacher.config().input_size || sc.in_channels != teacher.config().in_channels ||
      sc.learn_sigma != teacher.config().learn_sigma) {
    throw ConfigError("student and teacher must share input geometry and output channels");
  }
  const Dataset data = load_dataset(config.data, sc);
  if (data.num_classes() > sc.num_classes) {
    throw InputError("dataset has " + std::to_string(data.num_classes()) + " classes, teacher knows " +
                     std::to_string(sc.num_classes));
  }
  DistillConfig dc;
  dc.alpha = config.alpha;
  dc.optimizer.lr = config.lr;
  dc.optimizer.weight_decay = config.weight_decay;
  dc.validate();
  snapshot(config, &sc);

  DiTModel<float> student(sc, config.seed);
  AdamW<float> opt(dc.optimizer);
  const NoiseSchedule schedule = NoiseSchedule::linear();
  Rng rng(config.seed ^ kDataStream);
  LossLog losses(config.out / "loss.csv");
  log << "distilling " << teacher.config().attention.tag() << " -> " << sc.attention.tag() << ", alpha "
      << config.alpha << '\n';
  for (Index step = 1; step <= config.steps; ++step) {
    const auto batch = sample_batch<float>(data.latents, data.labels, config.batch, schedule, sc.cfg_dropout, rng);
    const StepLosses l =
        distill_train_step(student, teacher, opt, batch, schedule, static_cast<float>(config.alpha));
    losses.write(step, l);
    report_progress(log, step, config.steps, l);
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      save_checkpoint(student, step_dir(config.out, step));
    }
  }
  save_checkpoint(student, config.out / "checkpoint");
  return kOk;
}

int run_sample(const RunConfig& config, std::ostream& log) {
  if (config.checkpoint.empty()) throw ConfigError("sample needs --checkpoint <dir>");
  const DiTModel<float> model = load_checkpoint(config.checkpoint);
  const ModelConfig& mc = model.config();
  std::vector<Index> classes = config.classes;
  if (classes.empty()) {
    for (Index c = 0; c < std::min<Index>(8, mc.num_classes); ++c) classes.push_back(c);
  }
  for (Index c : classes) {
    if (c < 0 || c >= mc.num_classes) {
      throw InputError("class " + std::to_string(c) + " out of range [0, " + std::to_string(mc.num_classes) + ")");
    }
  }
  RunConfig resolved = config;
  resolved.classes = classes;
  snapshot(resolved, &mc);

  SamplerOptions opts;
  opts.steps = config.sample_steps;
  opts.cfg_scale = config.cfg_scale;
  opts.seed = config.seed;
  const auto result = ddpm_sample(model, classes, NoiseSchedule::linear(), opts);
  std::vector<Image> tiles;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    Image img = tensor_slice_to_image(result.images, static_cast<Index>(i));
    char name[64];
    std::snprintf(name, sizeof name, "sample_c%03lld_s%llu.png", static_cast<long long>(classes[i]),
                  static_cast<unsigned long long>(config.seed));
    write_png(config.out / name, img);
    tiles.push_back(std::move(img));
  }
  char montage_name[64];
  std::snprintf(montage_name, sizeof montage_name, "montage_s%llu.png", static_cast<unsigned long long>(config.seed));
  const Index columns = std::min<Index>(8, static_cast<Index>(tiles.size()));
  write_png(config.out / montage_name, montage(tiles, columns));
  log << "wrote " << tiles.size() << " samples (" << result.model_calls << " model calls)\n";
  return kOk;
}

int run_profile(const RunConfig& config, std::ostream& log) {
  snapshot(config);
  std::vector<CostReport> reports;
  std::vector<ModelConfig> configs;
  std::vector<bool> valid;
  auto add_error = [&](std::string name, std::string message) {
    CostReport r;
    r.name = std::move(name);
    r.error = std::move(message);
    reports.push_back(std::move(r));
    configs.emplace_back();
    valid.push_back(false);
  };
  std::vector<json> entries;
  if (config.profile_configs) {
    entries = *config.profile_configs;
  } else {
    for (const auto& c : table_suite()) entries.push_back(c.name);
  }
  for (const auto& e : entries) {
    ModelConfig c;
    std::string label = e.is_string() ? e.get<std::string>() : e.value("name", std::string("custom"));
    try {
      if (e.is_string()) {
        c = e.get<std::string>() == "desk" ? desk_model() : named_config(e.get<std::string>());
      } else {
        from_json(e, c);
      }
    } catch (const Error& err) {
      add_error(label, err.what());
      continue;
    } catch (const json::exception& err) {
      add_error(label, err.what());
      continue;
    }
    reports.push_back(make_cost_report(c));
    configs.push_back(c);
    valid.push_back(!reports.back().error.has_value());
  }
  if (config.measure) {
    for (std::size_t i = 0; i < reports.size(); ++i) {
      if (!valid[i]) continue;
      const ModelConfig& c = configs[i];
      const DiTModel<float> model(c, config.seed);
      Rng rng(config.seed);
      Tensor<float> x(Shape{1, c.in_channels, c.input_size, c.input_size});
      for (Index k = 0; k < x.numel(); ++k) x[k] = static_cast<float>(rng.normal());
      const std::vector<Index> t{500}, y{0};
      reports[i].measured =
          profile_throughput([&] { (void)predict<float>(model, x, t, y); }, config.iterations, config.warmup);
    }
  }
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  const std::string table = format_cost_table(reports);
  {
    std::ofstream(config.out / "profile.txt") << table;
    std::ofstream(config.out / "profile.csv") << format_cost_csv(reports);
  }
  write_json_file(config.out / "profile.json", arr);
  log << table;
  const bool any_error = std::any_of(reports.begin(), reports.end(), [](const auto& r) { return r.error.has_value(); });
  return any_error ? kUsageError : kOk;
}

int run_prune(const RunConfig& config, std::ostream& log) {
  if (config.checkpoint.empty()) throw ConfigError("prune needs --checkpoint <dir>");
  if (config.keep_heads < 1) throw ConfigError("prune needs --keep-heads >= 1");
  const DiTModel<float> model = load_checkpoint(config.checkpoint);
  snapshot(config, &model.config());
  const auto scores = score_attention_heads(model);
  const DiTModel<float> pruned = prune_heads(model, config.keep_heads);
  save_checkpoint(pruned, config.out / "checkpoint");

  json report;
  report["keep_heads"] = config.keep_heads;
  json s = json::array();
  for (const auto& h : scores) s.push_back({{"layer", h.layer}, {"head", h.head}, {"score", h.score}});
  report["scores"] = s;
  report["live_heads"] = live_heads(pruned);
  const auto before = count_flops(model.config());
  const auto after = count_flops(model.config(), {.elide_pruned = true, .kept_heads = config.keep_heads});
  report["gflops"] = {{"dense", static_cast<double>(before.total) / 1e9},
                      {"elided", static_cast<double>(after.total) / 1e9}};
  write_json_file(config.out / "prune_report.json", report);
  log << "kept " << config.keep_heads << " of " << model.config().heads << " heads per layer; GFLOPS "
      << fmt(before.total / 1e9) << " -> " << fmt(after.total / 1e9) << " with masked heads elided\n";
  return kOk;
}

int run_quantize(const RunConfig& config, std::ostream& log) {
  if (config.checkpoint.empty()) throw ConfigError("quantize needs --checkpoint <dir>");
  const DiTModel<float> model = load_checkpoint(config.checkpoint);
  snapshot(config, &model.config());
  const auto gran = config.granularity == "per-tensor" ? QuantGranularity::per_tensor : QuantGranularity::per_channel;
  const QuantizedModel qm = quantize_model(model, gran);
  const fs::path dir = config.out / "checkpoint";
  save_quantized_checkpoint(qm, dir);

  double max_err = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& a = model.parameters()[i].value;
    const auto& b = qm.model.parameters()[i].value;
    for (Index k = 0; k < a.numel(); ++k) max_err = std::max(max_err, std::abs(double(a[k]) - double(b[k])));
  }
  const auto in_bytes = checkpoint_size_bytes(config.checkpoint);
  const auto out_bytes = checkpoint_size_bytes(dir);
  const double ratio = static_cast<double>(out_bytes) / static_cast<double>(in_bytes);
  write_json_file(config.out / "quantize_report.json", {{"granularity", config.granularity},
                                                        {"quantized_tensors", qm.quantized.size()},
                                                        {"input_bytes", in_bytes},
                                                        {"quantized_bytes", out_bytes},
                                                        {"size_ratio", ratio},
                                                        {"max_abs_weight_error", max_err}});
  log << "quantized " << qm.quantized.size() << " weight tensors; size " << in_bytes << " -> " << out_bytes
      << " bytes (ratio " << fmt(ratio) << ")\n";
  return kOk;
}

int run_compare(const RunConfig& config, std::ostream& log) {
  if (config.compare_a.empty() || config.compare_b.empty()) throw ConfigError("compare needs --a and --b");
  snapshot(config);
  const auto files_a = image_files(config.compare_a);
  const auto files_b = image_files(config.compare_b);
  json pairs = json::array();
  std::vector<Image> set_a, set_b;
  for (const auto& f : files_a) set_a.push_back(read_image(f));
  for (const auto& f : files_b) set_b.push_back(read_image(f));
  for (std::size_t i = 0; i < files_a.size(); ++i) {
    const auto match = std::find_if(files_b.begin(), files_b.end(),
                                    [&](const fs::path& p) { return p.filename() == files_a[i].filename(); });
    if (match == files_b.end()) continue;
    const auto diff = image_diff(set_a[i], set_b[static_cast<std::size_t>(match - files_b.begin())],
                                 static_cast<float>(config.threshold));
    write_png(config.out / ("diff_" + files_a[i].stem().string() + ".png"), diff.overlay);
    pairs.push_back({{"file", files_a[i].filename().string()},
                     {"deviating_pixels", diff.deviating},
                     {"deviation_fraction", diff.fraction}});
  }
  json result{{"pairs", pairs}, {"feature_dim", config.feature_dim}, {"frechet_distance", nullptr}};
  // Features need one geometry; montages and other odd sizes are left out.
  Index skipped = 0;
  auto same_size = [&](std::vector<Image>& set, const Image& ref) {
    const auto keep = std::stable_partition(set.begin(), set.end(), [&](const Image& im) {
      return im.width == ref.width && im.height == ref.height;
    });
    skipped += static_cast<Index>(set.end() - keep);
    set.erase(keep, set.end());
  };
  if (!set_a.empty()) {
    std::map<std::pair<Index, Index>, Index> sizes;
    for (const auto& im : set_a) ++sizes[{im.width, im.height}];
    const auto common = std::max_element(sizes.begin(), sizes.end(),
                                          [](const auto& x, const auto& y) { return x.second < y.second; });
    const Image ref(common->first.first, common->first.second);
    same_size(set_a, ref);
    same_size(set_b, ref);
  }
  result["skipped_images"] = skipped;
  if (set_a.size() >= 2 && set_b.size() >= 2) {
    const Index input = set_a.front().width * set_a.front().height * 3;
    const FeatureProjector<double> proj(input, config.seed, config.feature_dim);
    auto features = [&](const std::vector<Image>& set) {
      Eigen::MatrixXd f(static_cast<Index>(set.size()), config.feature_dim);
      for (std::size_t i = 0; i < set.size(); ++i) f.row(static_cast<Index>(i)) = proj(image_tensor(set[i])).transpose();
      return GaussianSummary<double>::from_samples(f);
    };
    const double d = frechet_distance(features(set_a), features(set_b));
    result["frechet_distance"] = d;
    log << "frechet distance (" << config.feature_dim << "-d projection): " << fmt(d) << '\n';
  } else {
    log << "fewer than two images in a set: frechet distance skipped\n";
  }
  write_json_file(config.out / "compare.json", result);
  log << "compared " << pairs.size() << " image pairs\n";
  return kOk;
}

int run_gen_data(const RunConfig& config, std::ostream& log) {
  SyntheticSpec spec;
  spec.classes = config.data.classes;
  spec.per_class = config.data.per_class;
  spec.size = config.data.size == 0 ? config.model().input_size : config.data.size;
  spec.seed = config.data.seed;
  snapshot(config);
  std::vector<Index> labels;
  const auto images = synthetic_images(spec, labels);
  write_image_folder(config.out, images, labels);
  log << "wrote " << images.size() << " images in " << spec.classes << " classes to " << config.out.string() << '\n';
  return kOk;
}

}  // namespace ditopt::app
