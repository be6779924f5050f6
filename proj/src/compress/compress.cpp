#include "ditopt/compress/compress.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ditopt/dit/checkpoint.hpp"
#include "ditopt/error.hpp"
#include "ditopt/numerics/tape.hpp"

namespace ditopt {

namespace {

void require_softmax_attention(const ModelConfig& c) {
  if (c.attention.kind != AttentionKind::baseline && c.attention.kind != AttentionKind::shallow) {
    throw UnsupportedVariantError("head scoring needs per-head Q/K/V slices; '" + c.attention.tag() +
                                  "' attention is not supported");
  }
}

template <typename S>
double row_block_norm(const Tensor<S>& w, Index first_row, Index rows) {
  double acc = 0;
  const Index cols = w.dim(1);
  for (Index i = first_row * cols; i < (first_row + rows) * cols; ++i) acc += static_cast<double>(w[i]) * w[i];
  return std::sqrt(acc);
}

}  // namespace

template <typename S>
std::vector<HeadScore> score_attention_heads(const DiTModel<S>& model) {
  const auto& c = model.config();
  require_softmax_attention(c);
  std::vector<HeadScore> out;
  for (Index layer = 0; layer < c.depth; ++layer) {
    const auto& a = model.slots().blocks[static_cast<std::size_t>(layer)].attn;
    const auto& wq = model.param(a.wq).value;
    const Index d = wq.dim(0) / c.heads;
    for (Index h = 0; h < c.heads; ++h) {
      const double s = row_block_norm(wq, h * d, d) + row_block_norm(model.param(a.wk).value, h * d, d) +
                       row_block_norm(model.param(a.wv).value, h * d, d);
      out.push_back({layer, h, s});
    }
  }
  return out;
}

std::vector<Index> top_k_heads(const std::vector<double>& scores, Index k) {
  const Index n = static_cast<Index>(scores.size());
  if (k < 1 || k > n) throw ConfigError("keep-heads k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

template <typename S>
DiTModel<S> prune_heads(const DiTModel<S>& model, Index keep) {
  const auto& c = model.config();
  require_softmax_attention(c);
  if (keep < 1 || keep > c.heads) {
    throw ConfigError("keep-heads k=" + std::to_string(keep) + " outside [1, " + std::to_string(c.heads) + "]");
  }
  DiTModel<S> out = model;
  if (keep == c.heads) return out;
  const auto scores = score_attention_heads(model);
  for (Index layer = 0; layer < c.depth; ++layer) {
    std::vector<double> layer_scores;
    for (Index h = 0; h < c.heads; ++h) layer_scores.push_back(scores[static_cast<std::size_t>(layer * c.heads + h)].score);
    const auto kept = top_k_heads(layer_scores, keep);
    const auto& a = out.slots().blocks[static_cast<std::size_t>(layer)].attn;
    const Index d = out.param(a.wq).value.dim(0) / c.heads;
    for (Index h = 0; h < c.heads; ++h) {
      if (std::binary_search(kept.begin(), kept.end(), h)) continue;
      for (Slot w : {a.wq, a.wk, a.wv}) {
        auto& t = out.param(w).value;
        std::fill_n(t.data() + h * d * t.dim(1), d * t.dim(1), S(0));
      }
      for (Slot b : {a.bq, a.bk, a.bv}) std::fill_n(out.param(b).value.data() + h * d, d, S(0));
    }
  }
  return out;
}

template <typename S>
std::vector<Index> live_heads(const DiTModel<S>& model) {
  const auto& c = model.config();
  require_softmax_attention(c);
  std::vector<Index> out;
  for (const auto& blk : model.slots().blocks) {
    const Index d = model.param(blk.attn.wq).value.dim(0) / c.heads;
    Index live = 0;
    for (Index h = 0; h < c.heads; ++h) {
      bool any = false;
      for (Slot w : {blk.attn.wq, blk.attn.wk, blk.attn.wv}) {
        const auto& t = model.param(w).value;
        any = any || std::any_of(t.data() + h * d * t.dim(1), t.data() + (h + 1) * d * t.dim(1),
                                 [](S v) { return v != S(0); });
      }
      for (Slot b : {blk.attn.bq, blk.attn.bk, blk.attn.bv}) {
        const auto& t = model.param(b).value;
        any = any || std::any_of(t.data() + h * d, t.data() + (h + 1) * d, [](S v) { return v != S(0); });
      }
      live += any ? 1 : 0;
    }
    out.push_back(live);
  }
  return out;
}

float QuantizedTensor::scale_of(Index flat_index) const {
  if (granularity == QuantGranularity::per_tensor) return scales.at(0);
  const Index per_row = shape_numel(shape) / shape.at(0);
  return scales.at(static_cast<std::size_t>(flat_index / per_row));
}

QuantizedTensor quantize_tensor(const Tensor<float>& w, QuantGranularity granularity) {
  if (w.rank() != 2) throw ShapeError("quantize_tensor expects a 2-D weight, got " + shape_string(w.shape()));
  if (!w.all_finite()) throw NumericError("quantize_tensor: non-finite weight");
  const Index rows = w.dim(0), cols = w.dim(1);
  const Index groups = granularity == QuantGranularity::per_channel ? rows : 1;
  const Index group_size = granularity == QuantGranularity::per_channel ? cols : rows * cols;
  QuantizedTensor qt;
  qt.shape = w.shape();
  qt.granularity = granularity;
  qt.q.resize(static_cast<std::size_t>(w.numel()));
  for (Index g = 0; g < groups; ++g) {
    const float* src = w.data() + g * group_size;
    float max_abs = 0;
    for (Index i = 0; i < group_size; ++i) max_abs = std::max(max_abs, std::abs(src[i]));
    const float scale = max_abs == 0.0f ? 1.0f : max_abs / 127.0f;
    qt.scales.push_back(scale);
    qt.zero_points.push_back(0.0f);
    for (Index i = 0; i < group_size; ++i) {
      // std::round rounds halfway cases away from zero.
      const double r = std::round(static_cast<double>(src[i]) / static_cast<double>(scale));
      qt.q[static_cast<std::size_t>(g * group_size + i)] = static_cast<std::int8_t>(std::clamp(r, -128.0, 127.0));
    }
  }
  return qt;
}

Tensor<float> dequantize(const QuantizedTensor& qt) {
  Tensor<float> w(qt.shape);
  for (Index i = 0; i < w.numel(); ++i) {
    const std::size_t g = qt.granularity == QuantGranularity::per_tensor ? 0 : static_cast<std::size_t>(i / qt.shape[1]);
    w[i] = qt.scales[g] * (static_cast<float>(qt.q[static_cast<std::size_t>(i)]) - qt.zero_points[g]);
  }
  return w;
}

Tensor<float> quantized_linear(const Tensor<float>& x, const QuantizedTensor& qw, const Tensor<float>& bias) {
  if (qw.shape.size() != 2 || x.rank() < 1 || x.dim(-1) != qw.shape[1]) {
    throw ShapeError("quantized_linear: x " + shape_string(x.shape()) + " vs weight " + shape_string(qw.shape));
  }
  if (bias.numel() != qw.shape[0]) throw ShapeError("quantized_linear: bias must have one entry per output");
  const Tensor<float> w = dequantize(qw);
  Shape out_shape = x.shape();
  out_shape.back() = qw.shape[0];
  Tensor<float> y(out_shape);
  auto ym = as_matrix(y);
  ym.noalias() = as_matrix(x) * as_matrix(w).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.data(), bias.numel());
  return y;
}

QuantizedModel quantize_model(const DiTModel<float>& model, QuantGranularity granularity) {
  QuantizedModel qm{model, {}};
  auto& params = qm.model.parameters();
  for (std::size_t s = 0; s < params.size(); ++s) {
    auto& p = params[s];
    if (p.role != ParamRole::linear_weight) continue;
    auto qt = quantize_tensor(p.value, granularity);
    p.value = dequantize(qt);
    qm.quantized.emplace(s, std::move(qt));
  }
  return qm;
}

CheckpointData quantized_checkpoint_data(const QuantizedModel& qm) {
  CheckpointData data = checkpoint_data(qm.model);
  data.meta["quantization"] = {{"scheme", "int8-symmetric"},
                               {"granularity", qm.quantized.empty() ? "none"
                                               : qm.quantized.begin()->second.granularity ==
                                                       QuantGranularity::per_channel
                                                   ? "per_channel"
                                                   : "per_tensor"}};
  for (const auto& [slot, qt] : qm.quantized) {
    auto& r = data.tensors.at(slot);
    r.dtype = "i8";
    r.f32.clear();
    r.i8 = qt.q;
    r.scales = qt.scales;
  }
  return data;
}

void save_quantized_checkpoint(const QuantizedModel& qm, const std::filesystem::path& dir) {
  write_checkpoint(dir, quantized_checkpoint_data(qm));
}

template std::vector<HeadScore> score_attention_heads(const DiTModel<float>&);
template std::vector<HeadScore> score_attention_heads(const DiTModel<double>&);
template DiTModel<float> prune_heads(const DiTModel<float>&, Index);
template DiTModel<double> prune_heads(const DiTModel<double>&, Index);
template std::vector<Index> live_heads(const DiTModel<float>&);
template std::vector<Index> live_heads(const DiTModel<double>&);

}  // namespace ditopt
