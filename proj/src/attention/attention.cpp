#include "ditopt/attention/attention.hpp"

#include <cmath>

#include "ditopt/error.hpp"
#include "ditopt/numerics/ops.hpp"

namespace ditopt {

namespace {

template <typename S>
void check_input(const Var<S>& x, const AttentionShape& shape) {
  if (x.value().rank() != 2 || x.rows() != shape.batch * shape.tokens) {
    throw ShapeError("attention: x " + shape_string(x.shape()) + " does not hold batch " +
                     std::to_string(shape.batch) + " x " + std::to_string(shape.tokens) + " tokens");
  }
  if (shape.grid_h * shape.grid_w != shape.tokens) {
    throw ShapeError("attention: grid " + std::to_string(shape.grid_h) + "x" + std::to_string(shape.grid_w) +
                     " does not cover " + std::to_string(shape.tokens) + " tokens");
  }
}

template <typename S>
Var<S> head_of(const Var<S>& projected, Index sample, Index tokens, Index head, Index width) {
  return slice_cols(slice_rows(projected, sample * tokens, tokens), head * width, width);
}

template <typename S>
S inv_sqrt(Index d) {
  return S(1) / std::sqrt(static_cast<S>(d));
}

}  // namespace

template <typename S>
Var<S> softmax_attention_head(const Var<S>& q, const Var<S>& k, const Var<S>& v) {
  auto scores = scale(matmul(q, k, false, true), inv_sqrt<S>(q.cols()));
  return matmul(softmax(scores, -1), v);
}

template <typename S>
Var<S> mediated_attention_head(const Var<S>& q, const Var<S>& k, const Var<S>& v, Index n, const Var<S>* mediators) {
  const S s = inv_sqrt<S>(q.cols());
  const Var<S> t = mediators ? *mediators : adaptive_avg_pool_tokens(q, n);
  auto v_med = matmul(softmax(scale(matmul(t, k, false, true), s), -1), v);
  return matmul(softmax(scale(matmul(q, t, false, true), s), -1), v_med);
}

template <typename S>
Var<S> linear_attention_state(const Var<S>& k_focused, const Var<S>& v) {
  auto ones = v.tape().constant(Tensor<S>(Shape{v.rows(), 1}, S(1)));
  std::vector<Var<S>> parts{v, ones};
  return matmul(k_focused, concat_cols<S>(parts), true, false);
}

template <typename S>
Var<S> linear_attention_head(const Var<S>& q_focused, const Var<S>& k_focused, const Var<S>& v, S eps,
                             Association order) {
  if (order == Association::right) {
    return divide_by_last_col(matmul(q_focused, linear_attention_state(k_focused, v)), eps);
  }
  auto ones = v.tape().constant(Tensor<S>(Shape{v.rows(), 1}, S(1)));
  std::vector<Var<S>> parts{v, ones};
  return divide_by_last_col(matmul(matmul(q_focused, k_focused, false, true), concat_cols<S>(parts)), eps);
}

namespace {

// Shared by baseline and shallow: the head width follows from wq's row count.
template <typename S>
Var<S> softmax_mha(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape) {
  check_input(x, shape);
  const Index width = w.wq.rows();
  if (width % shape.heads != 0) throw ConfigError("attention width not divisible by heads");
  const Index d = width / shape.heads;
  auto q = linear(x, w.wq, w.bq);
  auto k = linear(x, w.wk, w.bk);
  auto v = linear(x, w.wv, w.bv);
  std::vector<Var<S>> samples;
  for (Index b = 0; b < shape.batch; ++b) {
    std::vector<Var<S>> heads;
    for (Index h = 0; h < shape.heads; ++h) {
      heads.push_back(softmax_attention_head(head_of(q, b, shape.tokens, h, d), head_of(k, b, shape.tokens, h, d),
                                             head_of(v, b, shape.tokens, h, d)));
    }
    samples.push_back(concat_cols<S>(heads));
  }
  return linear(concat_rows<S>(samples), w.wo, w.bo);
}

}  // namespace

template <typename S>
Var<S> baseline_mha(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape) {
  if (w.wq.rows() != x.cols()) throw ShapeError("baseline attention expects C x C projections");
  return softmax_mha(w, x, shape);
}

template <typename S>
Var<S> shallow_attention(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape) {
  if (x.cols() % 2 != 0) throw ConfigError("shallow attention needs an even hidden size");
  if (w.wq.rows() * 2 != x.cols()) throw ShapeError("shallow attention expects C/2 x C projections");
  return softmax_mha(w, x, shape);
}

template <typename S>
Var<S> mediated_attention(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape, Index n) {
  check_input(x, shape);
  if (n < 1 || n > shape.tokens) {
    throw ConfigError("mediator tokens n=" + std::to_string(n) + " outside [1, " + std::to_string(shape.tokens) + "]");
  }
  const Index c = x.cols();
  const Index d = c / shape.heads;
  auto q = linear(x, w.wq, w.bq);
  auto k = linear(x, w.wk, w.bk);
  auto v = linear(x, w.wv, w.bv);
  std::vector<Var<S>> samples;
  for (Index b = 0; b < shape.batch; ++b) {
    std::vector<Var<S>> heads;
    for (Index h = 0; h < shape.heads; ++h) {
      heads.push_back(mediated_attention_head(head_of(q, b, shape.tokens, h, d), head_of(k, b, shape.tokens, h, d),
                                              head_of(v, b, shape.tokens, h, d), n));
    }
    auto local = depthwise_conv_tokens(slice_rows(v, b * shape.tokens, shape.tokens), shape.grid_h, shape.grid_w,
                                       w.dwc_kernel, w.dwc_bias);
    samples.push_back(add(concat_cols<S>(heads), local));
  }
  return linear(concat_rows<S>(samples), w.wo, w.bo);
}

template <typename S>
Var<S> focused_gq_attention(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape,
                            const AttentionVariant& variant, Association order) {
  check_input(x, shape);
  const Index groups = variant.kv_groups;
  if (groups < 1 || shape.heads % groups != 0) {
    throw ConfigError("G=" + std::to_string(groups) + " does not divide heads=" + std::to_string(shape.heads));
  }
  const Index c = x.cols();
  const Index d = c / shape.heads;
  const Index kv_heads = shape.heads / groups;
  if (w.wk.rows() != kv_heads * d || w.wv.rows() != kv_heads * d) {
    throw ShapeError("focused attention expects C/G x C key/value projections");
  }
  const S eps = static_cast<S>(variant.focus_eps);
  auto q = linear(x, w.wq, w.bq);
  auto k = linear(x, w.wk, w.bk);
  auto v = linear(x, w.wv, w.bv);
  std::vector<Var<S>> samples;
  for (Index b = 0; b < shape.batch; ++b) {
    std::vector<Var<S>> heads;
    for (Index g = 0; g < kv_heads; ++g) {
      auto kp = focus(head_of(k, b, shape.tokens, g, d), variant.focus_power, variant.rectify);
      auto vg = head_of(v, b, shape.tokens, g, d);
      Var<S> state;
      if (order == Association::right) state = linear_attention_state(kp, vg);
      for (Index i = g * groups; i < (g + 1) * groups; ++i) {
        auto qp = focus(head_of(q, b, shape.tokens, i, d), variant.focus_power, variant.rectify);
        if (order == Association::right) {
          heads.push_back(divide_by_last_col(matmul(qp, state), eps));
        } else {
          heads.push_back(linear_attention_head(qp, kp, vg, eps, Association::left));
        }
      }
    }
    samples.push_back(concat_cols<S>(heads));
  }
  return linear(concat_rows<S>(samples), w.wo, w.bo);
}

template <typename S>
Var<S> focused_gq_attention(const AttentionParams<S>& w, const Var<S>& x, const AttentionShape& shape,
                            const AttentionVariant& variant) {
  return focused_gq_attention(w, x, shape, variant, Association::right);
}

template <typename S>
Var<S> attention_forward(const AttentionVariant& variant, const AttentionParams<S>& w, const Var<S>& x,
                         const AttentionShape& shape) {
  switch (variant.kind) {
    case AttentionKind::baseline: return baseline_mha(w, x, shape);
    case AttentionKind::shallow: return shallow_attention(w, x, shape);
    case AttentionKind::mediated: return mediated_attention(w, x, shape, variant.mediator_tokens);
    case AttentionKind::focused: return focused_gq_attention(w, x, shape, variant);
  }
  throw ConfigError("unknown attention kind");
}

#define DITOPT_INSTANTIATE_ATTENTION(S)                                                                          \
  template Var<S> attention_forward(const AttentionVariant&, const AttentionParams<S>&, const Var<S>&,           \
                                    const AttentionShape&);                                                      \
  template Var<S> baseline_mha(const AttentionParams<S>&, const Var<S>&, const AttentionShape&);                 \
  template Var<S> shallow_attention(const AttentionParams<S>&, const Var<S>&, const AttentionShape&);            \
  template Var<S> mediated_attention(const AttentionParams<S>&, const Var<S>&, const AttentionShape&, Index);    \
  template Var<S> focused_gq_attention(const AttentionParams<S>&, const Var<S>&, const AttentionShape&,          \
                                       const AttentionVariant&);                                                 \
  template Var<S> focused_gq_attention(const AttentionParams<S>&, const Var<S>&, const AttentionShape&,          \
                                       const AttentionVariant&, Association);                                    \
  template Var<S> softmax_attention_head(const Var<S>&, const Var<S>&, const Var<S>&);                           \
  template Var<S> mediated_attention_head(const Var<S>&, const Var<S>&, const Var<S>&, Index, const Var<S>*);    \
  template Var<S> linear_attention_state(const Var<S>&, const Var<S>&);                                          \
  template Var<S> linear_attention_head(const Var<S>&, const Var<S>&, const Var<S>&, S, Association);

DITOPT_INSTANTIATE_ATTENTION(float)
DITOPT_INSTANTIATE_ATTENTION(double)

}  // namespace ditopt
