#include "ditopt/moe/moe.hpp"

#include <algorithm>
#include <numeric>

#include "ditopt/error.hpp"
#include "ditopt/numerics/ops.hpp"

namespace ditopt {

void MoEConfig::validate() const {
  if (experts < 1) throw ConfigError("MoE needs at least one expert");
  if (active < 1 || active > experts) {
    throw ConfigError("MoE active experts K=" + std::to_string(active) + " outside [1, E=" + std::to_string(experts) +
                      "]");
  }
  if (frequency < 1) throw ConfigError("MoE frequency must be >= 1");
  if (shared_experts < 0) throw ConfigError("shared expert count must be >= 0");
  if (!(balance_alpha >= 0)) throw ConfigError("balance alpha must be >= 0");
}

template <typename S>
Var<S> mlp_forward(const MlpParams<S>& w, const Var<S>& x) {
  return linear(gelu(linear(x, w.w1, w.b1)), w.w2, w.b2);
}

template <typename S>
Routing<S> route_topk(const Var<S>& logits, Index k) {
  if (logits.value().rank() != 2) throw ShapeError("route_topk: logits must be [T x E]");
  const Index tokens = logits.rows(), experts = logits.cols();
  if (k < 1 || k > experts) throw ConfigError("route_topk: K outside [1, E]");
  auto probs = softmax(logits, -1);
  Tensor<S> mask(Shape{tokens, experts});
  std::vector<Index> order(static_cast<std::size_t>(experts));
  for (Index t = 0; t < tokens; ++t) {
    std::iota(order.begin(), order.end(), Index{0});
    const S* p = probs.value().data() + t * experts;
    // stable_sort keeps lower indices first among equal probabilities.
    std::stable_sort(order.begin(), order.end(), [p](Index a, Index b) { return p[a] > p[b]; });
    for (Index j = 0; j < k; ++j) mask[t * experts + order[static_cast<std::size_t>(j)]] = S(1);
  }
  auto gates = div_rowsum(mul(probs, logits.tape().constant(mask)));
  return {probs, gates, std::move(mask)};
}

template <typename S>
Var<S> moe_layer_forward(const MoEParams<S>& w, const Var<S>& x, Index k, RoutingStats<S>* stats) {
  if (x.value().rank() != 2) throw ShapeError("moe_layer_forward: x must be [T x C]");
  const Index tokens = x.rows(), channels = x.cols();
  const Index experts = static_cast<Index>(w.experts.size());
  if (w.router.rows() != experts || w.router.cols() != channels) {
    throw ShapeError("moe_layer_forward: router " + shape_string(w.router.shape()) + " does not match " +
                     std::to_string(experts) + " experts x " + std::to_string(channels));
  }
  auto routing = route_topk(linear(x, w.router), k);
  Tape<S>& tape = x.tape();
  auto out = tape.constant(Tensor<S>(Shape{tokens, channels}));
  for (Index e = 0; e < experts; ++e) {
    std::vector<Index> rows, gate_idx;
    for (Index t = 0; t < tokens; ++t) {
      if (routing.assignment[t * experts + e] == S(0)) continue;
      rows.push_back(t);
      gate_idx.push_back(t * experts + e);
    }
    if (rows.empty()) continue;
    const Index n = static_cast<Index>(rows.size());
    std::vector<Index> flat;
    flat.reserve(static_cast<std::size_t>(n * channels));
    for (Index t : rows)
      for (Index c = 0; c < channels; ++c) flat.push_back(t * channels + c);
    auto xe = gather(x, flat, Shape{n, channels});
    auto ye = mul_col(mlp_forward(w.experts[static_cast<std::size_t>(e)], xe), gather(routing.gates, gate_idx, Shape{n}));
    out = scatter_add(out, std::move(flat), ye);
  }
  for (const auto& shared : w.shared) out = add(out, mlp_forward(shared, x));
  if (stats) *stats = RoutingStats<S>{routing.probs, routing.assignment, k};
  return out;
}

template <typename S>
Var<S> balance_loss(const RoutingStats<S>& stats, S alpha) {
  if (!stats.probs.valid() || stats.probs.numel() == 0) throw InputError("balance_loss: empty routing statistics");
  const Index tokens = stats.probs.rows(), experts = stats.probs.cols();
  std::vector<S> load(static_cast<std::size_t>(experts), S(0));
  for (Index t = 0; t < tokens; ++t)
    for (Index e = 0; e < experts; ++e) load[static_cast<std::size_t>(e)] += stats.assignment[t * experts + e];
  // sum_i f_i * mean_t P(t,i) == sum_{t,i} P(t,i) * f_i / T
  Tensor<S> weight(Shape{tokens, experts});
  for (Index t = 0; t < tokens; ++t)
    for (Index e = 0; e < experts; ++e)
      weight[t * experts + e] = load[static_cast<std::size_t>(e)] / static_cast<S>(stats.active * tokens);
  auto dot = sum(mul(stats.probs, stats.probs.tape().constant(std::move(weight))));
  return scale(dot, alpha * static_cast<S>(experts) / static_cast<S>(tokens));
}

template <typename S>
Var<S> balance_loss(std::span<const RoutingStats<S>> stats, S alpha) {
  if (stats.empty()) throw InputError("balance_loss: no routing statistics recorded");
  Var<S> total = balance_loss(stats[0], alpha);
  for (std::size_t i = 1; i < stats.size(); ++i) total = add(total, balance_loss(stats[i], alpha));
  return scale(total, S(1) / static_cast<S>(stats.size()));
}

#define DITOPT_INSTANTIATE_MOE(S)                                                        \
  template Var<S> mlp_forward(const MlpParams<S>&, const Var<S>&);                       \
  template Routing<S> route_topk(const Var<S>&, Index);                                  \
  template Var<S> moe_layer_forward(const MoEParams<S>&, const Var<S>&, Index, RoutingStats<S>*); \
  template Var<S> balance_loss(const RoutingStats<S>&, S);                               \
  template Var<S> balance_loss(std::span<const RoutingStats<S>>, S);

DITOPT_INSTANTIATE_MOE(float)
DITOPT_INSTANTIATE_MOE(double)

}  // namespace ditopt
