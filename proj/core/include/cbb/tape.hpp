// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "cbb/kernels.hpp"
#include "cbb/tensor.hpp"

namespace cbb {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// What a backward rule sees: upstream gradient, input/output values and
/// one accumulator per input (null when that input needs no gradient).
struct BackwardContext {
  const Tensor& grad_out;
  const Tensor& output;
  std::span<const Tensor* const> inputs;
  std::span<Tensor* const> grad_inputs;

  const Tensor& input(std::size_t i) const { return *inputs[i]; }
  Tensor* grad(std::size_t i) const { return grad_inputs[i]; }
};

/// Records operations in execution order and replays them in reverse.
///
/// A tape is built fresh for each forward pass. Parameters enter through
/// watch(); backward() adds d(loss)/d(param) into the gradient of every
/// watched tensor that has requires_grad set.
class Tape {
 public:
  using BackwardFn = std::function<void(const BackwardContext&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to `param`. The tensor must outlive the tape.
  Var watch(Tensor& param);
  /// Appends an operation. `value` must be finite; inputs must belong to this tape.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id_).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id_).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar (single-element) loss.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool needs_grad = false;
  };

  std::deque<Node> nodes_;
};

// Differentiable operations. Operands must live on the same tape.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var softmax(Var x, int axis);
/// Solves s·W = rhs (s SPD [k×k], rhs [k×n]) via Cholesky.
Var solve_spd(Var s, Var rhs);
Var conv2d(Var x, Var w);
Var elementwise(kernels::ElementwiseOp op, Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var broadcast_mul(Var a, Var b);
Var scale(Var a, double factor);
Var reshape(Var a, Shape shape);
Var sum(Var a);
Var sum_axis(Var a, int axis, bool keepdim);
Var mean_axis(Var a, int axis, bool keepdim);
/// a [R×n] plus bias [n] added to every row.
Var add_bias(Var a, Var bias);
/// Mean softmax cross-entropy of logits [B×classes] against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace cbb
