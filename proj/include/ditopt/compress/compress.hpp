#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "ditopt/dit/model.hpp"
#include "ditopt/io/checkpoint_format.hpp"

namespace ditopt {

struct HeadScore {
  Index layer = 0;
  Index head = 0;
  double score = 0;
};

/// Per (layer, head): ||W_q slice||_F + ||W_k slice||_F + ||W_v slice||_F,
/// where a head's slice is its d output rows. Softmax attention only:
/// mediated and focused models -> UnsupportedVariantError.
template <typename S>
std::vector<HeadScore> score_attention_heads(const DiTModel<S>& model);

/// Indices of the k highest scores, ties to the lower index, ascending.
std::vector<Index> top_k_heads(const std::vector<double>& scores, Index k);

/// Copy of `model` whose (heads - k) lowest-scoring heads per layer have
/// their Q/K/V weight rows and bias entries set to zero.
template <typename S>
DiTModel<S> prune_heads(const DiTModel<S>& model, Index keep);

/// Heads per layer with any nonzero Q/K/V weight or bias.
template <typename S>
std::vector<Index> live_heads(const DiTModel<S>& model);

enum class QuantGranularity { per_channel, per_tensor };

/// Symmetric int8 weights: w ~ scale * (q - zero_point), zero_point = 0.
struct QuantizedTensor {
  Shape shape;
  std::vector<std::int8_t> q;
  std::vector<float> scales;       // one per output row, or one
  std::vector<float> zero_points;  // same length as scales, all 0
  QuantGranularity granularity = QuantGranularity::per_channel;

  float scale_of(Index flat_index) const;
};

/// q = clamp(round(w / S), -128, 127), S = max|w| / 127 over the row (or the
/// whole tensor), S = 1 for an all-zero group; rounding is half away from
/// zero. Non-finite weights -> NumericError.
QuantizedTensor quantize_tensor(const Tensor<float>& w, QuantGranularity granularity = QuantGranularity::per_channel);

Tensor<float> dequantize(const QuantizedTensor& qt);

/// x[.. x in] * dequant(qw)^T + bias with float activations.
Tensor<float> quantized_linear(const Tensor<float>& x, const QuantizedTensor& qw, const Tensor<float>& bias);

/// A model whose linear-layer weights are stored in int8. `model` carries
/// the dequantized weights and runs the ordinary float forward, which is
/// exactly the weight-only scheme: int8 storage, float arithmetic.
struct QuantizedModel {
  DiTModel<float> model;
  std::map<Slot, QuantizedTensor> quantized;
};

/// Quantizes every linear weight (attention, MLP/experts, router, adaLN,
/// timestep MLP, final layer). Patch projection, depthwise kernels,
/// embeddings, positional table and biases stay float32.
QuantizedModel quantize_model(const DiTModel<float>& model,
                              QuantGranularity granularity = QuantGranularity::per_channel);

CheckpointData quantized_checkpoint_data(const QuantizedModel& qm);
void save_quantized_checkpoint(const QuantizedModel& qm, const std::filesystem::path& dir);

}  // namespace ditopt
