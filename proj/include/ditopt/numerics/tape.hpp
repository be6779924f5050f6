#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ditopt/numerics/tensor.hpp"

namespace ditopt {

/// How a parameter is used; decides e.g. which tensors get int8-quantized.
enum class ParamRole {
  linear_weight,
  conv_weight,
  bias,
  embedding,
  buffer,  // fixed, never trained (sin-cos positional table)
};

/// A named trainable tensor with its accumulated gradient.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  ParamRole role = ParamRole::linear_weight;
  bool frozen = false;

  void zero_grad() { grad = Tensor<Scalar>(value.shape()); }
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index numel() const { return value().numel(); }
  Scalar item() const { return value().item(); }

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape.
///
/// Ops are recorded in execution order together with their backward rule.
/// backward() replays the records in reverse; every rule adds (+=) into its
/// inputs' gradient buffers, so a value consumed by several ops receives the
/// sum of all contributions. A non-recording tape evaluates values only.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn =
      std::function<void(Tape&, const Tensor<Scalar>& grad_out, const Tensor<Scalar>& output)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  Var<Scalar> constant(Tensor<Scalar> value);
  Var<Scalar> variable(Tensor<Scalar> value);

  /// Leaf referencing a parameter's storage. Gradients flow into
  /// `param.grad` on backward() unless the parameter is frozen.
  Var<Scalar> bind(Parameter<Scalar>& param);
  Var<Scalar> bind(const Parameter<Scalar>& param);

  Var<Scalar> record(const char* op, Tensor<Scalar> value, std::span<const Var<Scalar>> inputs, BackwardFn backward);
  Var<Scalar> record(const char* op, Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var<Scalar>>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool needs_grad(const Var<Scalar>& v) const { return needs_grad(v.id()); }

  const Tensor<Scalar>& value(std::size_t id) const;

  /// Gradient buffer of node `id`, zero-initialized on first access, or
  /// nullptr when the node does not require a gradient.
  Tensor<Scalar>* grad_target(std::size_t id);

  /// Seeds d(root)/d(root) = 1 and replays every record in reverse.
  void backward(const Var<Scalar>& root);

  /// Gradient accumulated for `v`, or nullptr if none reached it.
  const Tensor<Scalar>* grad(const Var<Scalar>& v) const;

  std::size_t op_count() const noexcept { return records_.size(); }
  std::vector<std::string> op_names() const;

 private:
  struct Node {
    Tensor<Scalar> owned;
    const Tensor<Scalar>* external = nullptr;
    Tensor<Scalar> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter<Scalar>* sink = nullptr;
  };
  struct Record {
    const char* op;
    std::size_t output;
    BackwardFn backward;
  };

  Var<Scalar> push(Node node);

  bool recording_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
  std::vector<Record> records_;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace ditopt
