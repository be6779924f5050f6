#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditopt/data/dataset.hpp"
#include "ditopt/dit/config.hpp"

namespace ditopt::app {

enum ExitCode : int { kOk = 0, kUsageError = 1, kDataError = 2, kNumericError = 3 };

/// Small model used when no architecture is given; trains in seconds.
ModelConfig desk_model();

struct DataSource {
  std::string kind = "synthetic";  // or "folder"
  std::filesystem::path path;      // folder only
  Index classes = 8;
  Index per_class = 16;
  Index size = 0;  // 0: the model's input size
  std::uint64_t seed = 0;
};

/// Every setting of every command. Resolution order: defaults, then the
/// JSON file, then flags. The resolved value is what gets snapshotted.
struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";

  nlohmann::json model_spec = nlohmann::json::object();  // ModelConfig overrides, may hold "preset"
  DataSource data;

  Index steps = 200;  // optimizer steps (train, distill)
  Index batch = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  Index checkpoint_every = 0;

  std::filesystem::path teacher;
  double alpha = 0.3;

  std::filesystem::path checkpoint;
  std::vector<Index> classes;  // empty: the first min(8, num_classes)
  Index sample_steps = 250;
  double cfg_scale = 4.0;

  Index keep_heads = 0;
  std::string granularity = "per-channel";

  // Names or objects. Unset means the table suite; an empty list profiles nothing.
  std::optional<std::vector<nlohmann::json>> profile_configs;
  bool measure = false;
  Index iterations = 50;
  Index warmup = 5;

  std::filesystem::path compare_a;
  std::filesystem::path compare_b;
  Index feature_dim = 64;
  double threshold = 8.0 / 255.0;

  /// Architecture described by model_spec (preset/overrides on desk_model()).
  ModelConfig model() const;
};

void to_json(nlohmann::json& j, const DataSource& d);
void from_json(const nlohmann::json& j, DataSource& d);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// defaults <- file <- flags, merged as JSON objects.
RunConfig resolve_run_config(const std::string& command, const nlohmann::json& file, const nlohmann::json& flags);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

/// Synthetic set or image folder, sized for `model`.
Dataset load_dataset(const DataSource& source, const ModelConfig& model);

}  // namespace ditopt::app
