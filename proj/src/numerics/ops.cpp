#include "ditopt/numerics/ops.hpp"

#include <cmath>
#include <numbers>

#include "ditopt/numerics/mac_counter.hpp"

namespace ditopt {

namespace {

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

template <typename S>
void require_same(const Var<S>& a, const Var<S>& b, const char* op) {
  require(a.shape() == b.shape(), op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

template <typename S>
void add_into(Tensor<S>* dst, const Tensor<S>& src, S factor = S(1)) {
  if (dst == nullptr) return;
  for (Index i = 0; i < src.numel(); ++i) (*dst)[i] += factor * src[i];
}

Shape with_last(Shape shape, Index last) {
  if (shape.empty()) return Shape{last};
  shape.back() = last;
  return shape;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same(a, b, "add");
  Tensor<S> out = a.value();
  for (Index i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [ia, ib](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    add_into(t.grad_target(ia), g);
    add_into(t.grad_target(ib), g);
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same(a, b, "sub");
  Tensor<S> out = a.value();
  for (Index i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("sub", std::move(out), {a, b}, [ia, ib](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    add_into(t.grad_target(ia), g);
    add_into(t.grad_target(ib), g, S(-1));
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same(a, b, "mul");
  Tensor<S> out = a.value();
  for (Index i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [ia, ib](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    const Tensor<S>& av = t.value(ia);
    const Tensor<S>& bv = t.value(ib);
    if (auto* ga = t.grad_target(ia)) {
      for (Index i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = t.grad_target(ib)) {
      for (Index i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const auto ia = a.id();
  return a.tape().record("scale", std::move(out), {a},
                         [ia, factor](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) { add_into(t.grad_target(ia), g, factor); });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S offset) {
  Tensor<S> out = a.value();
  for (auto& v : out.values()) v += offset;
  const auto ia = a.id();
  return a.tape().record("add_scalar", std::move(out), {a},
                         [ia](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) { add_into(t.grad_target(ia), g); });
}

template <typename S>
Var<S> add_row(const Var<S>& x, const Var<S>& v) {
  const Index rows = x.rows(), cols = x.cols();
  require(v.numel() == cols, "add_row", shape_string(x.shape()) + " + " + shape_string(v.shape()));
  Tensor<S> out = x.value();
  as_matrix(out).rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(v.value().data(), cols);
  const auto ix = x.id(), iv = v.id();
  return x.tape().record("add_row", std::move(out), {x, v}, [ix, iv, rows, cols](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    add_into(t.grad_target(ix), g);
    if (auto* gv = t.grad_target(iv)) {
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*gv)[c] += g[r * cols + c];
    }
  });
}

template <typename S>
Var<S> mul_row(const Var<S>& x, const Var<S>& v) {
  const Index rows = x.rows(), cols = x.cols();
  require(v.numel() == cols, "mul_row", shape_string(x.shape()) + " * " + shape_string(v.shape()));
  Tensor<S> out = x.value();
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) out[r * cols + c] *= v.value()[c];
  const auto ix = x.id(), iv = v.id();
  return x.tape().record("mul_row", std::move(out), {x, v}, [ix, iv, rows, cols](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    const Tensor<S>& xv = t.value(ix);
    const Tensor<S>& vv = t.value(iv);
    if (auto* gx = t.grad_target(ix)) {
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*gx)[r * cols + c] += g[r * cols + c] * vv[c];
    }
    if (auto* gv = t.grad_target(iv)) {
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*gv)[c] += g[r * cols + c] * xv[r * cols + c];
    }
  });
}

template <typename S>
Var<S> mul_col(const Var<S>& x, const Var<S>& v) {
  const Index rows = x.rows(), cols = x.cols();
  require(v.numel() == rows, "mul_col", shape_string(x.shape()) + " * " + shape_string(v.shape()));
  Tensor<S> out = x.value();
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) out[r * cols + c] *= v.value()[r];
  const auto ix = x.id(), iv = v.id();
  return x.tape().record("mul_col", std::move(out), {x, v}, [ix, iv, rows, cols](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    const Tensor<S>& xv = t.value(ix);
    const Tensor<S>& vv = t.value(iv);
    if (auto* gx = t.grad_target(ix)) {
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*gx)[r * cols + c] += g[r * cols + c] * vv[r];
    }
    if (auto* gv = t.grad_target(iv)) {
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) (*gv)[r] += g[r * cols + c] * xv[r * cols + c];
    }
  });
}

// ---------------------------------------------------------------- matmul

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b, bool transpose_a, bool transpose_b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul", "rank-2 operands required");
  const Index m = transpose_a ? a.dim(1) : a.dim(0);
  const Index k = transpose_a ? a.dim(0) : a.dim(1);
  const Index kb = transpose_b ? b.dim(1) : b.dim(0);
  const Index n = transpose_b ? b.dim(0) : b.dim(1);
  require(k == kb, "matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor<S> out(Shape{m, n});
  auto am = as_matrix(a.value());
  auto bm = as_matrix(b.value());
  auto om = as_matrix(out);
  if (!transpose_a && !transpose_b) om.noalias() = am * bm;
  else if (transpose_a && !transpose_b) om.noalias() = am.transpose() * bm;
  else if (!transpose_a && transpose_b) om.noalias() = am * bm.transpose();
  else om.noalias() = am.transpose() * bm.transpose();
  MacCounter::add(static_cast<std::uint64_t>(m * k * n));
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(
      "matmul", std::move(out), {a, b}, [ia, ib, transpose_a, transpose_b](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
        auto gm = as_matrix(g);
        auto av = as_matrix(t.value(ia));
        auto bv = as_matrix(t.value(ib));
        if (auto* ga = t.grad_target(ia)) {
          auto gam = as_matrix(*ga);
          // C = op(A) op(B): dA-side = g op(B)^T, transposed back when A was transposed.
          if (!transpose_a) {
            if (!transpose_b) gam.noalias() += gm * bv.transpose();
            else gam.noalias() += gm * bv;
          } else {
            if (!transpose_b) gam.noalias() += bv * gm.transpose();
            else gam.noalias() += bv.transpose() * gm.transpose();
          }
        }
        if (auto* gb = t.grad_target(ib)) {
          auto gbm = as_matrix(*gb);
          if (!transpose_b) {
            if (!transpose_a) gbm.noalias() += av.transpose() * gm;
            else gbm.noalias() += av * gm;
          } else {
            if (!transpose_a) gbm.noalias() += gm.transpose() * av;
            else gbm.noalias() += gm.transpose() * av.transpose();
          }
        }
      });
}

namespace {

template <typename S>
Var<S> linear_impl(const Var<S>& x, const Var<S>& weight, const Var<S>* bias) {
  require(weight.value().rank() == 2, "linear", "weight must be [out x in]");
  const Index in = weight.dim(1), outf = weight.dim(0);
  require(x.cols() == in, "linear", shape_string(x.shape()) + " with weight " + shape_string(weight.shape()));
  if (bias) require(bias->numel() == outf, "linear", "bias " + shape_string(bias->shape()));
  const Index rows = x.rows();
  Tensor<S> out(with_last(x.shape(), outf));
  auto om = as_matrix(out);
  om.noalias() = as_matrix(x.value()) * as_matrix(weight.value()).transpose();
  if (bias) om.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias->value().data(), outf);
  MacCounter::add(static_cast<std::uint64_t>(rows * in * outf));
  const auto ix = x.id(), iw = weight.id();
  const std::size_t ib = bias ? bias->id() : 0;
  const bool has_bias = bias != nullptr;
  std::vector<Var<S>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return x.tape().record("linear", std::move(out), inputs,
                         [ix, iw, ib, has_bias, rows, outf](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
                           auto gm = as_matrix(g);
                           if (auto* gx = t.grad_target(ix)) as_matrix(*gx).noalias() += gm * as_matrix(t.value(iw));
                           if (auto* gw = t.grad_target(iw))
                             as_matrix(*gw).noalias() += gm.transpose() * as_matrix(t.value(ix));
                           if (has_bias) {
                             if (auto* gb = t.grad_target(ib)) {
                               for (Index r = 0; r < rows; ++r)
                                 for (Index c = 0; c < outf; ++c) (*gb)[c] += g[r * outf + c];
                             }
                           }
                         });
}

}  // namespace

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight) {
  return linear_impl<S>(x, weight, nullptr);
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  return linear_impl<S>(x, weight, &bias);
}

// ---------------------------------------------------------------- nonlinearities

template <typename S>
Var<S> softmax(const Var<S>& x, Index axis) {
  const Tensor<S>& xv = x.value();
  const Index rank = xv.rank();
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "softmax", "axis out of range for " + shape_string(xv.shape()));
  if (!xv.all_finite()) throw NumericError("softmax: non-finite input");
  Index outer = 1, inner = 1;
  const Index len = xv.dim(axis);
  for (Index i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (Index i = axis + 1; i < rank; ++i) inner *= xv.dim(i);
  Tensor<S> out(xv.shape());
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      S mx = xv[base];
      for (Index j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      S total = 0;
      for (Index j = 0; j < len; ++j) {
        const S e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (Index j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  const auto ix = x.id();
  return x.tape().record("softmax", std::move(out), {x},
                         [ix, outer, inner, len](Tape<S>& t, const Tensor<S>& g, const Tensor<S>& y) {
                           auto* gx = t.grad_target(ix);
                           if (!gx) return;
                           for (Index o = 0; o < outer; ++o) {
                             for (Index in = 0; in < inner; ++in) {
                               const Index base = o * len * inner + in;
                               S dot = 0;
                               for (Index j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                               for (Index j = 0; j < len; ++j) {
                                 const Index k = base + j * inner;
                                 (*gx)[k] += y[k] * (g[k] - dot);
                               }
                             }
                           }
                         });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, S eps) {
  const Index rows = x.rows(), cols = x.cols();
  const Tensor<S>& xv = x.value();
  Tensor<S> out(xv.shape());
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    S mu = 0;
    for (Index c = 0; c < cols; ++c) mu += xv[r * cols + c];
    mu /= S(cols);
    S var = 0;
    for (Index c = 0; c < cols; ++c) {
      const S d = xv[r * cols + c] - mu;
      var += d * d;
    }
    var /= S(cols);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (Index c = 0; c < cols; ++c) out[r * cols + c] = (xv[r * cols + c] - mu) * is;
  }
  const auto ix = x.id();
  return x.tape().record("layer_norm", std::move(out), {x},
                         [ix, rows, cols, inv_std = std::move(inv_std)](Tape<S>& t, const Tensor<S>& g,
                                                                        const Tensor<S>& y) {
                           auto* gx = t.grad_target(ix);
                           if (!gx) return;
                           for (Index r = 0; r < rows; ++r) {
                             S mg = 0, mgy = 0;
                             for (Index c = 0; c < cols; ++c) {
                               mg += g[r * cols + c];
                               mgy += g[r * cols + c] * y[r * cols + c];
                             }
                             mg /= S(cols);
                             mgy /= S(cols);
                             const S is = inv_std[static_cast<std::size_t>(r)];
                             for (Index c = 0; c < cols; ++c) {
                               const Index k = r * cols + c;
                               (*gx)[k] += is * (g[k] - mg - y[k] * mgy);
                             }
                           }
                         });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor<S> out = x.value();
  for (auto& v : out.values()) {
    const S u = S(kC) * (v + S(kA) * v * v * v);
    v = S(0.5) * v * (S(1) + std::tanh(u));
  }
  const auto ix = x.id();
  return x.tape().record("gelu", std::move(out), {x}, [ix](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    auto* gx = t.grad_target(ix);
    if (!gx) return;
    const Tensor<S>& xv = t.value(ix);
    for (Index i = 0; i < g.numel(); ++i) {
      const S v = xv[i];
      const S th = std::tanh(S(kC) * (v + S(kA) * v * v * v));
      const S d = S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * S(kC) * (S(1) + S(3 * kA) * v * v);
      (*gx)[i] += g[i] * d;
    }
  });
}

template <typename S>
Var<S> silu(const Var<S>& x) {
  Tensor<S> out = x.value();
  for (auto& v : out.values()) v = v / (S(1) + std::exp(-v));
  const auto ix = x.id();
  return x.tape().record("silu", std::move(out), {x}, [ix](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    auto* gx = t.grad_target(ix);
    if (!gx) return;
    const Tensor<S>& xv = t.value(ix);
    for (Index i = 0; i < g.numel(); ++i) {
      const S s = S(1) / (S(1) + std::exp(-xv[i]));
      (*gx)[i] += g[i] * (s + xv[i] * s * (S(1) - s));
    }
  });
}

template <typename S>
Var<S> focus(const Var<S>& x, int power, bool rectify) {
  if (power < 1) throw ConfigError("focus: power must be >= 1");
  const Index rows = x.rows(), cols = x.cols();
  const Tensor<S>& xv = x.value();
  Tensor<S> out(xv.shape());
  auto base_of = [rectify](S v) { return rectify ? std::max(v, S(0)) : v; };
  auto spow = [power](S v) {
    const S m = std::pow(std::abs(v), S(power));
    return v < 0 ? -m : m;
  };
  for (Index r = 0; r < rows; ++r) {
    S a2 = 0, b2 = 0;
    for (Index c = 0; c < cols; ++c) {
      const S xb = base_of(xv[r * cols + c]);
      const S u = spow(xb);
      a2 += xb * xb;
      b2 += u * u;
    }
    const S a = std::sqrt(a2), b = std::sqrt(b2);
    for (Index c = 0; c < cols; ++c) {
      const S xb = base_of(xv[r * cols + c]);
      out[r * cols + c] = (a == 0 || b == 0) ? xb : (a / b) * spow(xb);
    }
  }
  const auto ix = x.id();
  return x.tape().record("focus", std::move(out), {x},
                         [ix, rows, cols, power, rectify, base_of, spow](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
                           auto* gx = t.grad_target(ix);
                           if (!gx) return;
                           const Tensor<S>& xv = t.value(ix);
                           std::vector<S> xb(static_cast<std::size_t>(cols)), u(xb.size()), du(xb.size());
                           for (Index r = 0; r < rows; ++r) {
                             S a2 = 0, b2 = 0, gu = 0;
                             for (Index c = 0; c < cols; ++c) {
                               const auto k = static_cast<std::size_t>(c);
                               xb[k] = base_of(xv[r * cols + c]);
                               u[k] = spow(xb[k]);
                               du[k] = S(power) * std::pow(std::abs(xb[k]), S(power - 1));
                               a2 += xb[k] * xb[k];
                               b2 += u[k] * u[k];
                               gu += g[r * cols + c] * u[k];
                             }
                             const S a = std::sqrt(a2), b = std::sqrt(b2);
                             for (Index c = 0; c < cols; ++c) {
                               const auto k = static_cast<std::size_t>(c);
                               const S mask = (rectify && xv[r * cols + c] <= 0) ? S(0) : S(1);
                               S d;
                               if (a == 0 || b == 0) {
                                 d = g[r * cols + c];
                               } else {
                                 d = (a / b) * g[r * cols + c] * du[k] +
                                     gu * (xb[k] / (a * b) - a * u[k] * du[k] / (b * b * b));
                               }
                               (*gx)[r * cols + c] += mask * d;
                             }
                           }
                         });
}

// ---------------------------------------------------------------- token ops

template <typename S>
Var<S> adaptive_avg_pool_tokens(const Var<S>& x, Index n) {
  const Tensor<S>& xv = x.value();
  require(xv.rank() >= 2, "adaptive_avg_pool_tokens", "need [.. x N x d], got " + shape_string(xv.shape()));
  const Index tokens = xv.dim(-2), d = xv.dim(-1);
  if (n < 1 || n > tokens) {
    throw ConfigError("adaptive_avg_pool_tokens: need 1 <= n <= N, got n=" + std::to_string(n) +
                      " N=" + std::to_string(tokens));
  }
  const Index lead = xv.numel() / (tokens * d);
  Shape out_shape = xv.shape();
  out_shape[out_shape.size() - 2] = n;
  Tensor<S> out(out_shape);
  auto bucket = [tokens, n](Index i) { return std::pair<Index, Index>{i * tokens / n, (i + 1) * tokens / n}; };
  for (Index l = 0; l < lead; ++l) {
    for (Index i = 0; i < n; ++i) {
      const auto [lo, hi] = bucket(i);
      for (Index j = lo; j < hi; ++j)
        for (Index c = 0; c < d; ++c) out[(l * n + i) * d + c] += xv[(l * tokens + j) * d + c];
      for (Index c = 0; c < d; ++c) out[(l * n + i) * d + c] /= S(hi - lo);
    }
  }
  const auto ix = x.id();
  return x.tape().record("adaptive_avg_pool_tokens", std::move(out), {x},
                         [ix, lead, tokens, n, d, bucket](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
                           auto* gx = t.grad_target(ix);
                           if (!gx) return;
                           for (Index l = 0; l < lead; ++l) {
                             for (Index i = 0; i < n; ++i) {
                               const auto [lo, hi] = bucket(i);
                               const S w = S(1) / S(hi - lo);
                               for (Index j = lo; j < hi; ++j)
                                 for (Index c = 0; c < d; ++c)
                                   (*gx)[(l * tokens + j) * d + c] += w * g[(l * n + i) * d + c];
                             }
                           }
                         });
}

namespace {

template <typename S>
Var<S> dwconv_impl(const Var<S>& v, Index height, Index width, const Var<S>& kernel, const Var<S>* bias) {
  const Tensor<S>& vv = v.value();
  require(vv.rank() == 2, "depthwise_conv_tokens", "v must be [N x C]");
  const Index tokens = vv.dim(0), channels = vv.dim(1);
  if (tokens != height * width) {
    throw ShapeError("depthwise_conv_tokens: N=" + std::to_string(tokens) + " != H*W=" +
                     std::to_string(height * width));
  }
  const Tensor<S>& kv = kernel.value();
  require(kv.rank() == 3 && kv.dim(0) == channels && kv.dim(1) == kv.dim(2), "depthwise_conv_tokens",
          "kernel must be [C x k x k], got " + shape_string(kv.shape()));
  const Index k = kv.dim(1);
  if (k % 2 == 0) throw ConfigError("depthwise_conv_tokens: kernel size must be odd");
  if (bias) require(bias->numel() == channels, "depthwise_conv_tokens", "bias must be [C]");
  const Index half = k / 2;
  Tensor<S> out(Shape{tokens, channels});
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      S* o = out.data() + (r * width + c) * channels;
      if (bias) {
        for (Index ch = 0; ch < channels; ++ch) o[ch] = bias->value()[ch];
      }
      for (Index dy = 0; dy < k; ++dy) {
        const Index rr = r + dy - half;
        if (rr < 0 || rr >= height) continue;
        for (Index dx = 0; dx < k; ++dx) {
          const Index cc = c + dx - half;
          if (cc < 0 || cc >= width) continue;
          const S* in = vv.data() + (rr * width + cc) * channels;
          for (Index ch = 0; ch < channels; ++ch) o[ch] += kv[(ch * k + dy) * k + dx] * in[ch];
        }
      }
    }
  }
  MacCounter::add(static_cast<std::uint64_t>(tokens * channels * k * k));
  const auto iv = v.id(), ik = kernel.id();
  const std::size_t ib = bias ? bias->id() : 0;
  const bool has_bias = bias != nullptr;
  std::vector<Var<S>> inputs{v, kernel};
  if (bias) inputs.push_back(*bias);
  return v.tape().record(
      "depthwise_conv_tokens", std::move(out), inputs,
      [iv, ik, ib, has_bias, height, width, channels, k, half](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
        const Tensor<S>& vv = t.value(iv);
        const Tensor<S>& kv = t.value(ik);
        auto* gv = t.grad_target(iv);
        auto* gk = t.grad_target(ik);
        for (Index r = 0; r < height; ++r) {
          for (Index c = 0; c < width; ++c) {
            const S* go = g.data() + (r * width + c) * channels;
            for (Index dy = 0; dy < k; ++dy) {
              const Index rr = r + dy - half;
              if (rr < 0 || rr >= height) continue;
              for (Index dx = 0; dx < k; ++dx) {
                const Index cc = c + dx - half;
                if (cc < 0 || cc >= width) continue;
                const Index src = (rr * width + cc) * channels;
                for (Index ch = 0; ch < channels; ++ch) {
                  const Index ki = (ch * k + dy) * k + dx;
                  if (gv) (*gv)[src + ch] += kv[ki] * go[ch];
                  if (gk) (*gk)[ki] += vv[src + ch] * go[ch];
                }
              }
            }
          }
        }
        if (has_bias) {
          if (auto* gb = t.grad_target(ib)) {
            for (Index i = 0; i < height * width; ++i)
              for (Index ch = 0; ch < channels; ++ch) (*gb)[ch] += g[i * channels + ch];
          }
        }
      });
}

}  // namespace

template <typename S>
Var<S> depthwise_conv_tokens(const Var<S>& v, Index height, Index width, const Var<S>& kernel) {
  return dwconv_impl<S>(v, height, width, kernel, nullptr);
}

template <typename S>
Var<S> depthwise_conv_tokens(const Var<S>& v, Index height, Index width, const Var<S>& kernel, const Var<S>& bias) {
  return dwconv_impl<S>(v, height, width, kernel, &bias);
}

// ---------------------------------------------------------------- structural

template <typename S>
Var<S> slice_cols(const Var<S>& x, Index start, Index width) {
  const Index rows = x.rows(), cols = x.cols();
  require(start >= 0 && width >= 0 && start + width <= cols, "slice_cols",
          "range [" + std::to_string(start) + ", +" + std::to_string(width) + ") of " + shape_string(x.shape()));
  Tensor<S> out(with_last(x.shape(), width));
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < width; ++c) out[r * width + c] = x.value()[r * cols + start + c];
  const auto ix = x.id();
  return x.tape().record("slice_cols", std::move(out), {x},
                         [ix, rows, cols, start, width](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
                           auto* gx = t.grad_target(ix);
                           if (!gx) return;
                           for (Index r = 0; r < rows; ++r)
                             for (Index c = 0; c < width; ++c) (*gx)[r * cols + start + c] += g[r * width + c];
                         });
}

template <typename S>
Var<S> slice_rows(const Var<S>& x, Index start, Index count) {
  require(x.value().rank() == 2, "slice_rows", "rank-2 input required");
  const Index rows = x.dim(0), cols = x.dim(1);
  require(start >= 0 && count >= 0 && start + count <= rows, "slice_rows", "row range out of bounds");
  Tensor<S> out(Shape{count, cols});
  std::copy_n(x.value().data() + start * cols, count * cols, out.data());
  const auto ix = x.id();
  return x.tape().record("slice_rows", std::move(out), {x}, [ix, start, cols](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    auto* gx = t.grad_target(ix);
    if (!gx) return;
    for (Index i = 0; i < g.numel(); ++i) (*gx)[start * cols + i] += g[i];
  });
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const Index rows = parts[0].rows();
  std::vector<Index> widths, ids;
  Index total = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols", "row mismatch");
    widths.push_back(p.cols());
    ids.push_back(static_cast<Index>(p.id()));
    total += p.cols();
  }
  Tensor<S> out(with_last(parts[0].shape(), total));
  Index off = 0;
  for (const auto& p : parts) {
    const Index w = p.cols();
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < w; ++c) out[r * total + off + c] = p.value()[r * w + c];
    off += w;
  }
  return parts[0].tape().record("concat_cols", std::move(out), parts,
                                [ids, widths, rows, total](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
                                  Index off = 0;
                                  for (std::size_t i = 0; i < ids.size(); ++i) {
                                    const Index w = widths[i];
                                    if (auto* gp = t.grad_target(static_cast<std::size_t>(ids[i]))) {
                                      for (Index r = 0; r < rows; ++r)
                                        for (Index c = 0; c < w; ++c) (*gp)[r * w + c] += g[r * total + off + c];
                                    }
                                    off += w;
                                  }
                                });
}

template <typename S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const Index cols = parts[0].cols();
  std::vector<Index> counts, ids;
  Index total = 0;
  for (const auto& p : parts) {
    require(p.value().rank() == 2 && p.cols() == cols, "concat_rows", "column mismatch");
    counts.push_back(p.numel());
    ids.push_back(static_cast<Index>(p.id()));
    total += p.rows();
  }
  Tensor<S> out(Shape{total, cols});
  Index off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.numel(), out.data() + off);
    off += p.numel();
  }
  return parts[0].tape().record("concat_rows", std::move(out), parts, [ids, counts](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (auto* gp = t.grad_target(static_cast<std::size_t>(ids[i]))) {
        for (Index j = 0; j < counts[i]; ++j) (*gp)[j] += g[off + j];
      }
      off += counts[i];
    }
  });
}

template <typename S>
Var<S> gather(const Var<S>& x, std::vector<Index> indices, Shape out_shape) {
  require(shape_numel(out_shape) == static_cast<Index>(indices.size()), "gather",
          "index count does not match " + shape_string(out_shape));
  const Index n = x.numel();
  Tensor<S> out(std::move(out_shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < n, "gather", "index out of range");
    out[static_cast<Index>(i)] = x.value()[indices[i]];
  }
  const auto ix = x.id();
  return x.tape().record("gather", std::move(out), {x},
                         [ix, indices = std::move(indices)](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
                           auto* gx = t.grad_target(ix);
                           if (!gx) return;
                           for (std::size_t i = 0; i < indices.size(); ++i)
                             (*gx)[indices[i]] += g[static_cast<Index>(i)];
                         });
}

template <typename S>
Var<S> scatter_add(const Var<S>& base, std::vector<Index> indices, const Var<S>& src) {
  require(src.numel() == static_cast<Index>(indices.size()), "scatter_add", "index count != src size");
  Tensor<S> out = base.value();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < out.numel(), "scatter_add", "index out of range");
    out[indices[i]] += src.value()[static_cast<Index>(i)];
  }
  const auto ib = base.id(), is = src.id();
  return base.tape().record("scatter_add", std::move(out), {base, src},
                            [ib, is, indices = std::move(indices)](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
                              add_into(t.grad_target(ib), g);
                              if (auto* gs = t.grad_target(is)) {
                                for (std::size_t i = 0; i < indices.size(); ++i)
                                  (*gs)[static_cast<Index>(i)] += g[indices[i]];
                              }
                            });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape", shape_string(x.shape()) + " -> " + shape_string(shape));
  Tensor<S> out = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.tape().record("reshape", std::move(out), {x},
                         [ix](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) { add_into(t.grad_target(ix), g); });
}

// ---------------------------------------------------------------- reductions

template <typename S>
Var<S> sum(const Var<S>& x) {
  S total = 0;
  for (S v : x.value().values()) total += v;
  const auto ix = x.id();
  return x.tape().record("sum", Tensor<S>::scalar(total), {x}, [ix](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    if (auto* gx = t.grad_target(ix)) {
      for (auto& v : gx->values()) v += g[0];
    }
  });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  return scale(sum(x), S(1) / S(x.numel()));
}

template <typename S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  require_same(a, b, "mse");
  const Index n = a.numel();
  S total = 0;
  for (Index i = 0; i < n; ++i) {
    const S d = a.value()[i] - b.value()[i];
    total += d * d;
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("mse", Tensor<S>::scalar(total / S(n)), {a, b}, [ia, ib, n](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    const Tensor<S>& av = t.value(ia);
    const Tensor<S>& bv = t.value(ib);
    auto* ga = t.grad_target(ia);
    auto* gb = t.grad_target(ib);
    const S f = S(2) * g[0] / S(n);
    for (Index i = 0; i < n; ++i) {
      const S d = f * (av[i] - bv[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

template <typename S>
Var<S> div_rowsum(const Var<S>& x) {
  const Index rows = x.rows(), cols = x.cols();
  Tensor<S> out = x.value();
  for (Index r = 0; r < rows; ++r) {
    S s = 0;
    for (Index c = 0; c < cols; ++c) s += out[r * cols + c];
    for (Index c = 0; c < cols; ++c) out[r * cols + c] /= s;
  }
  const auto ix = x.id();
  return x.tape().record("div_rowsum", std::move(out), {x}, [ix, rows, cols](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
    auto* gx = t.grad_target(ix);
    if (!gx) return;
    const Tensor<S>& xv = t.value(ix);
    for (Index r = 0; r < rows; ++r) {
      S s = 0, gxs = 0;
      for (Index c = 0; c < cols; ++c) {
        s += xv[r * cols + c];
        gxs += g[r * cols + c] * xv[r * cols + c];
      }
      for (Index c = 0; c < cols; ++c) (*gx)[r * cols + c] += g[r * cols + c] / s - gxs / (s * s);
    }
  });
}

template <typename S>
Var<S> divide_by_last_col(const Var<S>& x, S eps) {
  const Index rows = x.rows(), cols = x.cols();
  require(cols >= 2, "divide_by_last_col", "need at least two columns");
  const Index d = cols - 1;
  Tensor<S> out(with_last(x.shape(), d));
  for (Index r = 0; r < rows; ++r) {
    const S den = x.value()[r * cols + d] + eps;
    for (Index c = 0; c < d; ++c) out[r * d + c] = x.value()[r * cols + c] / den;
  }
  const auto ix = x.id();
  return x.tape().record("divide_by_last_col", std::move(out), {x},
                         [ix, rows, cols, d, eps](Tape<S>& t, const Tensor<S>& g, const Tensor<S>&) {
                           auto* gx = t.grad_target(ix);
                           if (!gx) return;
                           const Tensor<S>& xv = t.value(ix);
                           for (Index r = 0; r < rows; ++r) {
                             const S den = xv[r * cols + d] + eps;
                             S acc = 0;
                             for (Index c = 0; c < d; ++c) {
                               (*gx)[r * cols + c] += g[r * d + c] / den;
                               acc += g[r * d + c] * xv[r * cols + c];
                             }
                             (*gx)[r * cols + d] -= acc / (den * den);
                           }
                         });
}

// ---------------------------------------------------------------- value-level

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, Index axis) {
  Tape<S> tape(false);
  return softmax(tape.constant(x), axis).value();
}

template <typename S>
Tensor<S> adaptive_avg_pool_tokens(const Tensor<S>& x, Index n) {
  Tape<S> tape(false);
  return adaptive_avg_pool_tokens(tape.constant(x), n).value();
}

template <typename S>
Tensor<S> depthwise_conv_tokens(const Tensor<S>& v, Index height, Index width, const Tensor<S>& kernel) {
  Tape<S> tape(false);
  return depthwise_conv_tokens(tape.constant(v), height, width, tape.constant(kernel)).value();
}

template <typename S>
Tensor<S> focusing_transform(const Tensor<S>& x, int power, bool rectify) {
  Tape<S> tape(false);
  return focus(tape.constant(x), power, rectify).value();
}

#define DITOPT_INSTANTIATE_OPS(S)                                                                        \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> scale(const Var<S>&, S);                                                               \
  template Var<S> add_scalar(const Var<S>&, S);                                                          \
  template Var<S> add_row(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> mul_row(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> mul_col(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> matmul(const Var<S>&, const Var<S>&, bool, bool);                                      \
  template Var<S> linear(const Var<S>&, const Var<S>&);                                                  \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                                   \
  template Var<S> softmax(const Var<S>&, Index);                                                         \
  template Var<S> layer_norm(const Var<S>&, S);                                                          \
  template Var<S> gelu(const Var<S>&);                                                                   \
  template Var<S> silu(const Var<S>&);                                                                   \
  template Var<S> focus(const Var<S>&, int, bool);                                                       \
  template Var<S> adaptive_avg_pool_tokens(const Var<S>&, Index);                                        \
  template Var<S> depthwise_conv_tokens(const Var<S>&, Index, Index, const Var<S>&);                     \
  template Var<S> depthwise_conv_tokens(const Var<S>&, Index, Index, const Var<S>&, const Var<S>&);      \
  template Var<S> slice_cols(const Var<S>&, Index, Index);                                               \
  template Var<S> slice_rows(const Var<S>&, Index, Index);                                               \
  template Var<S> concat_cols(std::span<const Var<S>>);                                                  \
  template Var<S> concat_rows(std::span<const Var<S>>);                                                  \
  template Var<S> gather(const Var<S>&, std::vector<Index>, Shape);                                      \
  template Var<S> scatter_add(const Var<S>&, std::vector<Index>, const Var<S>&);                         \
  template Var<S> reshape(const Var<S>&, Shape);                                                         \
  template Var<S> sum(const Var<S>&);                                                                    \
  template Var<S> mean(const Var<S>&);                                                                   \
  template Var<S> mse(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> div_rowsum(const Var<S>&);                                                             \
  template Var<S> divide_by_last_col(const Var<S>&, S);                                                  \
  template Tensor<S> softmax(const Tensor<S>&, Index);                                                   \
  template Tensor<S> adaptive_avg_pool_tokens(const Tensor<S>&, Index);                                  \
  template Tensor<S> depthwise_conv_tokens(const Tensor<S>&, Index, Index, const Tensor<S>&);            \
  template Tensor<S> focusing_transform(const Tensor<S>&, int, bool);

DITOPT_INSTANTIATE_OPS(float)
DITOPT_INSTANTIATE_OPS(double)

}  // namespace ditopt
