#include "ditopt/distill/distill.hpp"

#include <cmath>

#include "ditopt/error.hpp"
#include "ditopt/numerics/ops.hpp"

namespace ditopt {

void DistillConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("distillation alpha must lie in [0, 1]");
}

template <typename S>
DistillTerms<S> combined_distill_loss(const Var<S>& student_eps, const Tensor<S>& teacher_eps,
                                      const Tensor<S>& true_eps, S alpha) {
  if (student_eps.shape() != teacher_eps.shape() || student_eps.shape() != true_eps.shape()) {
    throw ShapeError("distill loss: student " + shape_string(student_eps.shape()) + ", teacher " +
                     shape_string(teacher_eps.shape()) + ", target " + shape_string(true_eps.shape()));
  }
  if (!(alpha >= S(0) && alpha <= S(1))) throw ConfigError("distillation alpha must lie in [0, 1]");
  Tape<S>& tape = student_eps.tape();
  DistillTerms<S> t;
  t.l_diff = mse(student_eps, tape.constant(true_eps));
  t.l_kd = mse(student_eps, tape.constant(teacher_eps));
  t.total = add(scale(t.l_diff, S(1) - alpha), scale(t.l_kd, alpha));
  return t;
}

template <typename S>
S combined_distill_loss(const Tensor<S>& student_eps, const Tensor<S>& teacher_eps, const Tensor<S>& true_eps,
                        S alpha) {
  Tape<S> tape(false);
  return combined_distill_loss(tape.constant(student_eps), teacher_eps, true_eps, alpha).total.item();
}

template <typename S>
StepLosses distill_train_step(DiTModel<S>& student, const DiTModel<S>& teacher, AdamW<S>& optimizer,
                              const TrainBatch<S>& batch, const NoiseSchedule& schedule, S alpha) {
  for (const auto& p : teacher.parameters()) {
    if (!p.frozen) throw ContractError("teacher parameter '" + p.name + "' is trainable; freeze the teacher first");
  }
  const Index channels = student.config().in_channels;
  const Tensor<S> xt = q_sample(batch.x0, batch.t, batch.eps, schedule);

  Tensor<S> teacher_eps;
  {
    Tape<S> tape(false);
    teacher_eps = epsilon_part(model_forward(tape, teacher, xt, batch.t, batch.y).out, channels).value();
  }

  student.zero_grad();
  Tape<S> tape;
  auto fwd = model_forward(tape, student, xt, batch.t, batch.y);
  auto terms = combined_distill_loss(epsilon_part(fwd.out, channels), teacher_eps, batch.eps, alpha);
  Var<S> loss = terms.total;
  Var<S> l_balance;
  if (student.config().moe && !fwd.routing.empty()) {
    l_balance = balance_loss<S>(fwd.routing, static_cast<S>(student.config().moe->balance_alpha));
    loss = add(loss, l_balance);
  }
  StepLosses out;
  out.loss = static_cast<double>(loss.item());
  out.l_diff = static_cast<double>(terms.l_diff.item());
  out.l_kd = static_cast<double>(terms.l_kd.item());
  out.l_balance = l_balance.valid() ? static_cast<double>(l_balance.item()) : 0.0;
  if (!std::isfinite(out.loss)) throw NumericError("distillation loss is not finite");
  tape.backward(loss);
  auto params = student.trainable();
  optimizer.step(params);
  return out;
}

#define DITOPT_INSTANTIATE_DISTILL(S)                                                                           \
  template DistillTerms<S> combined_distill_loss(const Var<S>&, const Tensor<S>&, const Tensor<S>&, S);         \
  template S combined_distill_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                    \
  template StepLosses distill_train_step(DiTModel<S>&, const DiTModel<S>&, AdamW<S>&, const TrainBatch<S>&,     \
                                         const NoiseSchedule&, S);

DITOPT_INSTANTIATE_DISTILL(float)
DITOPT_INSTANTIATE_DISTILL(double)

}  // namespace ditopt
