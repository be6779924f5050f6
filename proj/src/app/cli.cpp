#include <CLI11.hpp>

#include <functional>
#include <map>
#include <ostream>

#include "ditopt/app/commands.hpp"
#include "ditopt/error.hpp"

namespace ditopt::app {

using nlohmann::json;

namespace {

// Options are bound to scratch storage; only the ones actually given on the
// command line are copied into the flag overrides.
struct Flags {
  std::vector<std::function<void(json&)>> apply;

  template <typename T>
  void add(CLI::App* cmd, const std::string& name, const std::string& help,
           std::function<void(json&, const T&)> set) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = cmd->add_option(name, *value, help);
    apply.push_back([opt, value, set](json& j) {
      if (opt->count() > 0) set(j, *value);
    });
  }
  template <typename T>
  void key(CLI::App* cmd, const std::string& name, const std::string& key, const std::string& help) {
    add<T>(cmd, name, help, [key](json& j, const T& v) { j[key] = v; });
  }
  void model_key(CLI::App* cmd, const std::string& name, const std::string& key, const std::string& help) {
    add<std::string>(cmd, name, help, [key](json& j, const std::string& v) { j["model"][key] = v; });
  }
  void data_key(CLI::App* cmd, const std::string& name, const std::string& key, const std::string& help) {
    add<Index>(cmd, name, help, [key](json& j, const Index& v) { j["data"][key] = v; });
  }

  json collect() const {
    json j = json::object();
    for (const auto& f : apply) f(j);
    return j;
  }
};

int exit_for(const std::exception& e, std::ostream& err, int code, const char* kind) {
  err << "error (" << kind << "): " << e.what() << '\n';
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Efficient diffusion-transformer toolkit: train, distill, compress, profile, sample.", "ditopt"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, Flags> flags;
  std::map<std::string, std::function<int(const RunConfig&, std::ostream&)>> commands{
      {"train", run_train},   {"distill", run_distill},   {"sample", run_sample},   {"profile", run_profile},
      {"prune", run_prune},   {"quantize", run_quantize}, {"compare", run_compare}, {"gen-data", run_gen_data},
  };
  const std::map<std::string, std::string> about{
      {"train", "train a denoiser on synthetic data or an image folder"},
      {"distill", "train a student against a frozen teacher checkpoint"},
      {"sample", "class-conditional DDPM sampling with guidance"},
      {"profile", "parameter, FLOP and throughput table for model configs"},
      {"prune", "zero the lowest-norm attention heads of a checkpoint"},
      {"quantize", "int8 weight-only quantization of a checkpoint"},
      {"compare", "pixel diffs and Frechet distance between two sample folders"},
      {"gen-data", "write the synthetic texture dataset as an image folder"},
  };
  for (const auto& [name, run] : commands) {
    CLI::App* cmd = app.add_subcommand(name, about.at(name));
    Flags& f = flags[name];
    cmd->add_option("--config", config_path, "JSON run config");
    f.key<std::uint64_t>(cmd, "--seed", "seed", "random seed");
    f.key<std::string>(cmd, "--out", "out", "output directory");
    if (name == "train" || name == "distill") {
      f.key<Index>(cmd, "--steps", "steps", "optimizer steps");
      f.key<Index>(cmd, "--batch", "batch", "batch size");
      f.key<double>(cmd, "--lr", "lr", "learning rate");
      f.key<Index>(cmd, "--checkpoint-every", "checkpoint_every", "extra checkpoint interval (0: end only)");
      f.model_key(cmd, "--variant", "attention", "attention variant: baseline, shallow, med-<n>, fg-<G>");
      f.add<std::string>(cmd, "--data", "image folder (default: synthetic textures)",
                         [](json& j, const std::string& v) {
                           j["data"]["kind"] = "folder";
                           j["data"]["path"] = v;
                         });
    }
    if (name == "train") f.model_key(cmd, "--preset", "preset", "architecture, e.g. S/2-base, XS/2-fg-6");
    if (name == "distill") {
      f.key<std::string>(cmd, "--teacher", "teacher", "teacher checkpoint directory");
      f.key<double>(cmd, "--alpha", "alpha", "weight of the teacher-matching term");
    }
    if (name == "sample" || name == "prune" || name == "quantize") {
      f.key<std::string>(cmd, "--checkpoint", "checkpoint", "checkpoint directory");
    }
    if (name == "sample") {
      f.add<std::vector<Index>>(cmd, "--classes", "class ids, comma separated",
                                [](json& j, const std::vector<Index>& v) { j["classes"] = v; });
      f.key<Index>(cmd, "--steps", "sample_steps", "sampler steps");
      f.key<double>(cmd, "--cfg-scale", "cfg_scale", "guidance scale (1: off)");
    }
    if (name == "profile") {
      f.add<std::vector<std::string>>(cmd, "--preset", "config names, comma separated (default: the table suite)",
                                      [](json& j, const std::vector<std::string>& v) { j["profile_configs"] = v; });
      f.add<bool>(cmd, "--measure", "time forward passes", [](json& j, const bool& v) { j["measure"] = v; });
      f.key<Index>(cmd, "--iterations", "iterations", "timed forward passes per config");
      f.key<Index>(cmd, "--warmup", "warmup", "untimed forward passes per config");
    }
    if (name == "prune") f.key<Index>(cmd, "--keep-heads", "keep_heads", "heads kept per layer");
    if (name == "quantize") f.key<std::string>(cmd, "--granularity", "granularity", "per-channel or per-tensor");
    if (name == "compare") {
      f.key<std::string>(cmd, "--a", "compare_a", "baseline sample folder");
      f.key<std::string>(cmd, "--b", "compare_b", "variant sample folder");
      f.key<double>(cmd, "--threshold", "threshold", "per-channel deviation threshold in [0, 1]");
      f.key<Index>(cmd, "--dim", "feature_dim", "projection feature dimension");
    }
    if (name == "gen-data") {
      f.data_key(cmd, "--num-classes", "classes", "number of classes");
      f.data_key(cmd, "--per-class", "per_class", "images per class");
      f.data_key(cmd, "--size", "size", "image side in pixels");
    }
    for (auto* o : cmd->get_options()) {
      if (o->get_name() == "--measure") o->expected(0, 1)->default_str("true");
      if (o->get_name() == "--classes" || o->get_name() == "--preset") o->delimiter(',');
    }
  }

  std::vector<std::string> reversed(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(reversed.begin(), reversed.end());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const json file = config_path.empty() ? json::object() : read_json_file(config_path);
    const RunConfig config = resolve_run_config(name, file, flags.at(name).collect());
    return commands.at(name)(config, out);
  } catch (const ConfigError& e) {
    return exit_for(e, err, kUsageError, "config");
  } catch (const UnsupportedVariantError& e) {
    return exit_for(e, err, kUsageError, "unsupported");
  } catch (const NumericError& e) {
    return exit_for(e, err, kNumericError, "numeric");
  } catch (const Error& e) {
    return exit_for(e, err, kDataError, "data");
  } catch (const nlohmann::json::exception& e) {
    return exit_for(e, err, kUsageError, "config");
  } catch (const std::exception& e) {
    return exit_for(e, err, kDataError, "io");
  }
}

}  // namespace ditopt::app
