#pragma once

#include <filesystem>

#include "ditopt/dit/model.hpp"
#include "ditopt/io/checkpoint_format.hpp"

namespace ditopt {

const char* to_string(ParamRole role);

/// Float32 record for every parameter, in model order.
CheckpointData checkpoint_data(const DiTModel<float>& model);

/// manifest.json + weights.bin under `dir`; round trip is bit-exact.
void save_checkpoint(const DiTModel<float>& model, const std::filesystem::path& dir);

/// Rebuilds the model from the stored config and fills every tensor by name.
/// int8 records are dequantized (scale * q per output row). Missing or
/// misshapen tensors -> InputError.
DiTModel<float> load_checkpoint(const std::filesystem::path& dir);
DiTModel<float> model_from_checkpoint_data(const CheckpointData& data);

}  // namespace ditopt
