#include "ditopt/app/run_config.hpp"

#include <fstream>

#include "ditopt/error.hpp"

namespace ditopt::app {

using nlohmann::json;

ModelConfig desk_model() {
  ModelConfig c;
  c.name = "desk";
  c.depth = 2;
  c.hidden = 64;
  c.heads = 4;
  c.patch = 2;
  c.input_size = 16;
  c.num_classes = 8;
  c.frequency_dim = 64;
  return c;
}

ModelConfig RunConfig::model() const {
  ModelConfig c = desk_model();
  from_json(model_spec, c);
  c.validate();
  return c;
}

void to_json(json& j, const DataSource& d) {
  j = json{{"kind", d.kind},       {"path", d.path.string()}, {"classes", d.classes},
           {"per_class", d.per_class}, {"size", d.size},        {"seed", d.seed}};
}

void from_json(const json& j, DataSource& d) {
  if (!j.is_object()) throw ConfigError("\"data\" must be an object");
  d.kind = j.value("kind", d.kind);
  d.path = j.value("path", d.path.string());
  d.classes = j.value("classes", d.classes);
  d.per_class = j.value("per_class", d.per_class);
  d.size = j.value("size", d.size);
  d.seed = j.value("seed", d.seed);
  if (d.kind != "synthetic" && d.kind != "folder") {
    throw ConfigError("data.kind must be \"synthetic\" or \"folder\", got \"" + d.kind + "\"");
  }
}

void to_json(json& j, const RunConfig& c) {
  j = json{
      {"command", c.command},
      {"seed", c.seed},
      {"out", c.out.string()},
      {"model", c.model_spec},
      {"data", c.data},
      {"steps", c.steps},
      {"batch", c.batch},
      {"lr", c.lr},
      {"weight_decay", c.weight_decay},
      {"checkpoint_every", c.checkpoint_every},
      {"teacher", c.teacher.string()},
      {"alpha", c.alpha},
      {"checkpoint", c.checkpoint.string()},
      {"classes", c.classes},
      {"sample_steps", c.sample_steps},
      {"cfg_scale", c.cfg_scale},
      {"keep_heads", c.keep_heads},
      {"granularity", c.granularity},
      {"measure", c.measure},
      {"iterations", c.iterations},
      {"warmup", c.warmup},
      {"compare_a", c.compare_a.string()},
      {"compare_b", c.compare_b.string()},
      {"feature_dim", c.feature_dim},
      {"threshold", c.threshold},
  };
  j["profile_configs"] = c.profile_configs ? json(*c.profile_configs) : json(nullptr);
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  try {
    c.command = j.value("command", c.command);
    c.seed = j.value("seed", c.seed);
    c.out = j.value("out", c.out.string());
    if (j.contains("model")) c.model_spec = j.at("model");
    if (j.contains("data")) from_json(j.at("data"), c.data);
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.teacher = j.value("teacher", c.teacher.string());
    c.alpha = j.value("alpha", c.alpha);
    c.checkpoint = j.value("checkpoint", c.checkpoint.string());
    c.classes = j.value("classes", c.classes);
    c.sample_steps = j.value("sample_steps", c.sample_steps);
    c.cfg_scale = j.value("cfg_scale", c.cfg_scale);
    c.keep_heads = j.value("keep_heads", c.keep_heads);
    c.granularity = j.value("granularity", c.granularity);
    if (j.contains("profile_configs") && !j.at("profile_configs").is_null()) {
      c.profile_configs = j.at("profile_configs").get<std::vector<json>>();
    }
    c.measure = j.value("measure", c.measure);
    c.iterations = j.value("iterations", c.iterations);
    c.warmup = j.value("warmup", c.warmup);
    c.compare_a = j.value("compare_a", c.compare_a.string());
    c.compare_b = j.value("compare_b", c.compare_b.string());
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.threshold = j.value("threshold", c.threshold);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
  if (c.steps < 0 || c.batch < 1 || c.checkpoint_every < 0 || c.keep_heads < 0 || c.iterations < 1 || c.sample_steps < 1 ||
      c.warmup < 0 || c.feature_dim < 1) {
    throw ConfigError("run config has a negative count or a zero batch/iteration/feature size");
  }
  if (c.granularity != "per-channel" && c.granularity != "per-tensor") {
    throw ConfigError("granularity must be per-channel or per-tensor");
  }
}

namespace {

json normalized_model(json m) {
  if (m.is_string()) return json{{"preset", m.get<std::string>()}};
  if (!m.is_object()) throw ConfigError("\"model\" must be a preset name or an object");
  return m;
}

json normalized(json j) {
  if (j.is_null()) return json::object();
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  if (j.contains("model")) j["model"] = normalized_model(j["model"]);
  return j;
}

}  // namespace

RunConfig resolve_run_config(const std::string& command, const json& file, const json& flags) {
  RunConfig defaults;
  json merged = defaults;
  merged.merge_patch(normalized(file));
  merged.merge_patch(normalized(flags));
  merged["command"] = command;
  RunConfig c = merged.get<RunConfig>();
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Dataset load_dataset(const DataSource& source, const ModelConfig& model) {
  const Index size = source.size == 0 ? model.input_size : source.size;
  if (size != model.input_size) {
    throw InputError("data size " + std::to_string(size) + " does not match model input size " +
                     std::to_string(model.input_size));
  }
  if (model.in_channels != kLatentChannels) {
    throw InputError("datasets provide " + std::to_string(kLatentChannels) + " latent channels, model expects " +
                     std::to_string(model.in_channels));
  }
  if (source.kind == "folder") {
    if (source.path.empty()) throw InputError("data.kind is \"folder\" but no data.path was given");
    return load_image_folder(source.path, size);
  }
  return make_synthetic_dataset({source.classes, source.per_class, size, source.seed});
}

}  // namespace ditopt::app
