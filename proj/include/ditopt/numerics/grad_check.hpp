#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "ditopt/numerics/tape.hpp"

namespace ditopt {

template <typename S>
using ScalarFunction = std::function<Var<S>(Tape<S>&, const Var<S>&)>;

/// Max over elements of |analytic - central difference| / (|central difference| + 1e-8)
/// for a scalar function of one tensor. `eps` must lie in [1e-4, 1e-2].
/// A non-finite analytic gradient raises NumericError.
template <typename S>
S grad_check(const ScalarFunction<S>& f, const Tensor<S>& x, S eps = S(1e-3));

struct GradCheckOptions {
  double eps = 1e-3;
  /// Elements probed per parameter; <= 0 probes all of them.
  Index max_elements_per_param = 0;
  std::uint64_t seed = 0;
};

/// Same metric over the parameters a loss closure binds on its tape. The
/// closure must be deterministic; it is re-evaluated twice per probed element.
template <typename S>
S grad_check_params(const std::function<Var<S>(Tape<S>&)>& loss, std::span<Parameter<S>* const> params,
                    const GradCheckOptions& options = {});

}  // namespace ditopt
