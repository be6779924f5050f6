#include "ditopt/numerics/grad_check.hpp"

#include <cmath>

#include "ditopt/rng.hpp"

namespace ditopt {

namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-4 && eps <= 1e-2)) throw ConfigError("grad_check: eps must be in [1e-4, 1e-2]");
}

template <typename S>
S relative_error(S analytic, S numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + S(1e-8));
}

}  // namespace

template <typename S>
S grad_check(const ScalarFunction<S>& f, const Tensor<S>& x, S eps) {
  check_eps(static_cast<double>(eps));
  Tensor<S> analytic(x.shape());
  {
    Tape<S> tape;
    Var<S> xv = tape.variable(x);
    Var<S> y = f(tape, xv);
    tape.backward(y);
    if (const auto* g = tape.grad(xv)) analytic = *g;
  }
  if (!analytic.all_finite()) throw NumericError("grad_check: non-finite analytic gradient");

  auto eval = [&](const Tensor<S>& at) {
    Tape<S> tape(false);
    return f(tape, tape.constant(at)).item();
  };
  S worst = 0;
  Tensor<S> probe = x;
  for (Index i = 0; i < x.numel(); ++i) {
    const S orig = probe[i];
    probe[i] = orig + eps;
    const S up = eval(probe);
    probe[i] = orig - eps;
    const S down = eval(probe);
    probe[i] = orig;
    const S numeric = (up - down) / (S(2) * eps);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

template <typename S>
S grad_check_params(const std::function<Var<S>(Tape<S>&)>& loss, std::span<Parameter<S>* const> params,
                    const GradCheckOptions& options) {
  check_eps(options.eps);
  const S eps = static_cast<S>(options.eps);
  for (auto* p : params) p->zero_grad();
  {
    Tape<S> tape;
    tape.backward(loss(tape));
  }
  Rng rng(options.seed);
  S worst = 0;
  for (auto* p : params) {
    if (!p->grad.all_finite()) throw NumericError("grad_check: non-finite gradient for " + p->name);
    const Index n = p->value.numel();
    std::vector<Index> probe;
    if (options.max_elements_per_param <= 0 || options.max_elements_per_param >= n) {
      for (Index i = 0; i < n; ++i) probe.push_back(i);
    } else {
      for (Index k = 0; k < options.max_elements_per_param; ++k)
        probe.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    }
    for (Index i : probe) {
      const S orig = p->value[i];
      p->value[i] = orig + eps;
      Tape<S> up_tape(false);
      const S up = loss(up_tape).item();
      p->value[i] = orig - eps;
      Tape<S> down_tape(false);
      const S down = loss(down_tape).item();
      p->value[i] = orig;
      worst = std::max(worst, relative_error(p->grad[i], (up - down) / (S(2) * eps)));
    }
  }
  return worst;
}

template float grad_check(const ScalarFunction<float>&, const Tensor<float>&, float);
template double grad_check(const ScalarFunction<double>&, const Tensor<double>&, double);
template float grad_check_params(const std::function<Var<float>(Tape<float>&)>&, std::span<Parameter<float>* const>,
                                 const GradCheckOptions&);
template double grad_check_params(const std::function<Var<double>(Tape<double>&)>&,
                                  std::span<Parameter<double>* const>, const GradCheckOptions&);

}  // namespace ditopt
