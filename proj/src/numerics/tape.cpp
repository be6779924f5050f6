#include "ditopt/numerics/tape.hpp"

namespace ditopt {

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Tensor<Scalar> value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::variable(Tensor<Scalar> value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = recording_;
  return push(std::move(n));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::bind(Parameter<Scalar>& param) {
  Node n;
  n.external = &param.value;
  n.requires_grad = recording_ && !param.frozen;
  n.sink = n.requires_grad ? &param : nullptr;
  return push(std::move(n));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::bind(const Parameter<Scalar>& param) {
  Node n;
  n.external = &param.value;
  return push(std::move(n));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(const char* op, Tensor<Scalar> value, std::span<const Var<Scalar>> inputs,
                                 BackwardFn backward) {
  bool any = false;
  if (recording_) {
    for (const auto& in : inputs) any = any || nodes_[in.id()].requires_grad;
  }
  Node n;
  n.owned = std::move(value);
  n.requires_grad = any;
  Var<Scalar> out = push(std::move(n));
  if (any) records_.push_back(Record{op, out.id(), std::move(backward)});
  return out;
}

template <typename Scalar>
const Tensor<Scalar>& Tape<Scalar>::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

template <typename Scalar>
Tensor<Scalar>* Tape<Scalar>::grad_target(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor<Scalar>(value(id).shape());
    n.has_grad = true;
  }
  return &n.grad;
}

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& root) {
  if (root.numel() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_string(root.shape()));
  if (backward_done_) throw ContractError("backward() already ran on this tape");
  backward_done_ = true;
  if (!nodes_[root.id()].requires_grad) return;
  (*grad_target(root.id()))[0] = Scalar(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    Node& out = nodes_[it->output];
    if (!out.has_grad) continue;
    it->backward(*this, out.grad, value(it->output));
  }
  for (Node& n : nodes_) {
    if (n.sink == nullptr || !n.has_grad) continue;
    Tensor<Scalar>& dst = n.sink->grad;
    if (dst.shape() != n.grad.shape()) dst = Tensor<Scalar>(n.grad.shape());
    for (Index i = 0; i < dst.numel(); ++i) dst[i] += n.grad[i];
  }
}

template <typename Scalar>
const Tensor<Scalar>* Tape<Scalar>::grad(const Var<Scalar>& v) const {
  const Node& n = nodes_[v.id()];
  return n.has_grad ? &n.grad : nullptr;
}

template <typename Scalar>
std::vector<std::string> Tape<Scalar>::op_names() const {
  std::vector<std::string> names;
  names.reserve(records_.size());
  for (const auto& r : records_) names.emplace_back(r.op);
  return names;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace ditopt
