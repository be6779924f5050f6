#include "ditopt/dit/checkpoint.hpp"

#include "ditopt/error.hpp"

namespace ditopt {

const char* to_string(ParamRole role) {
  switch (role) {
    case ParamRole::linear_weight: return "linear_weight";
    case ParamRole::conv_weight: return "conv_weight";
    case ParamRole::bias: return "bias";
    case ParamRole::embedding: return "embedding";
    case ParamRole::buffer: return "buffer";
  }
  return "?";
}

CheckpointData checkpoint_data(const DiTModel<float>& model) {
  CheckpointData data;
  data.meta["format"] = "ditopt-checkpoint-1";
  data.meta["config"] = model.config();
  for (const auto& p : model.parameters()) {
    TensorRecord r;
    r.name = p.name;
    r.role = to_string(p.role);
    r.shape = p.value.shape();
    r.f32 = p.value.storage();
    data.tensors.push_back(std::move(r));
  }
  return data;
}

void save_checkpoint(const DiTModel<float>& model, const std::filesystem::path& dir) {
  write_checkpoint(dir, checkpoint_data(model));
}

DiTModel<float> model_from_checkpoint_data(const CheckpointData& data) {
  if (!data.meta.contains("config")) throw InputError("checkpoint manifest has no config");
  ModelConfig config;
  try {
    config = data.meta.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint config unreadable: " + std::string(e.what()));
  }
  DiTModel<float> model(config, 0, InitScheme::dit);
  std::vector<bool> seen(model.parameters().size(), false);
  for (const auto& r : data.tensors) {
    Parameter<float>& p = model.param(r.name);
    if (p.value.shape() != r.shape) {
      throw InputError("tensor '" + r.name + "' has shape " + shape_string(r.shape) + ", model expects " +
                       shape_string(p.value.shape()));
    }
    if (r.dtype == "f32") {
      p.value = Tensor<float>(r.shape, r.f32);
    } else {
      // Symmetric int8: w = scale * q, one scale per output row or one overall.
      const Index rows = r.shape.empty() ? 1 : r.shape[0];
      const Index per_row = rows == 0 ? 0 : shape_numel(r.shape) / rows;
      const bool per_channel = static_cast<Index>(r.scales.size()) == rows;
      if (!per_channel && r.scales.size() != 1) throw InputError("tensor '" + r.name + "' has bad scale count");
      Tensor<float> w(r.shape);
      for (Index i = 0; i < w.numel(); ++i) {
        const float s = r.scales[per_channel ? static_cast<std::size_t>(i / per_row) : 0];
        w[i] = s * static_cast<float>(r.i8[static_cast<std::size_t>(i)]);
      }
      p.value = std::move(w);
    }
    seen[static_cast<std::size_t>(&p - model.parameters().data())] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) throw InputError("checkpoint is missing tensor '" + model.parameters()[i].name + "'");
  }
  return model;
}

DiTModel<float> load_checkpoint(const std::filesystem::path& dir) {
  return model_from_checkpoint_data(read_checkpoint(dir));
}

}  // namespace ditopt
