#pragma once

#include "ditopt/diffusion/diffusion.hpp"
#include "ditopt/numerics/optim.hpp"

namespace ditopt {

struct DistillConfig {
  double alpha = 0.3;  // weight of the teacher-matching term
  AdamWConfig optimizer{.lr = 1e-4, .weight_decay = 0.0};

  void validate() const;
};

template <typename S>
struct DistillTerms {
  Var<S> total;
  Var<S> l_diff;
  Var<S> l_kd;
};

/// (1 - alpha) MSE(true_eps, student) + alpha MSE(student, teacher).
template <typename S>
DistillTerms<S> combined_distill_loss(const Var<S>& student_eps, const Tensor<S>& teacher_eps,
                                      const Tensor<S>& true_eps, S alpha);

/// Value-level form.
template <typename S>
S combined_distill_loss(const Tensor<S>& student_eps, const Tensor<S>& teacher_eps, const Tensor<S>& true_eps, S alpha);

/// Both models see the same (x_t, t, y). Only the student is differentiated
/// and updated. A teacher with any trainable parameter -> ContractError.
template <typename S>
StepLosses distill_train_step(DiTModel<S>& student, const DiTModel<S>& teacher, AdamW<S>& optimizer,
                              const TrainBatch<S>& batch, const NoiseSchedule& schedule, S alpha);

}  // namespace ditopt
