// SPDX-License-Identifier: Apache-2.0
#include "cbb/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "cbb/errors.hpp"

namespace cbb {

namespace k = kernels;

const Tensor& Var::value() const {
  if (!tape_) throw UsageError("Var is not bound to a tape");
  return tape_->value(*this);
}

Var Tape::constant(Tensor value) {
  value.check_finite("constant");
  Node node;
  node.value = std::move(value);
  node.value.clear_grad();
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::watch(Tensor& param) {
  param.check_finite("watch");
  Node node;
  node.value = param.reshaped(param.shape());
  node.param = &param;
  node.needs_grad = param.requires_grad();
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  value.check_finite("tape op");
  Node node;
  node.value = std::move(value);
  node.backward = std::move(backward);
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw UsageError("operand recorded on a different tape");
    node.inputs.push_back(in.id_);
    node.needs_grad = node.needs_grad || nodes_[in.id_].needs_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw UsageError("loss recorded on a different tape");
  const Node& root = nodes_.at(loss.id_);
  if (root.value.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + shape_str(root.value.shape()));
  }
  std::vector<Tensor> grads(loss.id_ + 1);
  grads[loss.id_] = Tensor::full(root.value.shape(), 1.0);

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t idx = loss.id_ + 1; idx-- > 0;) {
    Node& node = nodes_[idx];
    if (!node.needs_grad || grads[idx].empty()) continue;
    if (node.param) {
      auto dst = node.param->mutable_grad();
      const auto src = grads[idx].data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      continue;
    }
    if (!node.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].needs_grad) {
        if (grads[in].empty()) grads[in] = Tensor::zeros(nodes_[in].value.shape());
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardContext{grads[idx], node.value, in_values, in_grads});
    grads[idx] = Tensor();
  }
}

namespace {

Tape& common_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw UsageError("operands recorded on different tapes");
  return a.tape();
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  if (dst->numel() != src.numel()) {
    throw ShapeError("gradient " + shape_str(src.shape()) + " does not fit " + shape_str(dst->shape()));
  }
  for (std::size_t i = 0; i < src.numel(); ++i) (*dst)[i] += src[i];
}

// Sums a batched gradient down to a plain matrix when that operand was shared.
Tensor fold_batch(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target);
  const std::size_t block = out.numel();
  for (std::size_t i = 0; i < g.numel(); ++i) out[i % block] += g[i];
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  return tape.record(k::matmul(a.value(), b.value()), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& av = ctx.input(0);
    const Tensor& bv = ctx.input(1);
    if (ctx.grad(0)) accumulate(ctx.grad(0), fold_batch(k::matmul(ctx.grad_out, k::transpose(bv)), av.shape()));
    if (ctx.grad(1)) {
      if (bv.rank() == 2 && av.rank() > 2) {
        // Shared right operand: dB = Σ_batch Aᵀ·dOut with the batch folded into rows.
        const std::size_t kk = av.shape().back();
        const std::size_t rows = av.numel() / kk;
        const std::size_t n = bv.dim(1);
        Tensor gb(bv.shape());
        k::gemm_tn(av.data().data(), ctx.grad_out.data().data(), gb.data().data(), kk, rows, n);
        accumulate(ctx.grad(1), gb);
      } else {
        accumulate(ctx.grad(1), fold_batch(k::matmul(k::transpose(av), ctx.grad_out), bv.shape()));
      }
    }
  });
}

Var transpose(Var a) {
  return a.tape().record(k::transpose(a.value()), {a}, [](const BackwardContext& ctx) {
    accumulate(ctx.grad(0), k::transpose(ctx.grad_out));
  });
}

Var softmax(Var x, int axis) {
  return x.tape().record(k::softmax(x.value(), axis), {x}, [axis](const BackwardContext& ctx) {
    accumulate(ctx.grad(0), k::softmax_backward(ctx.output, ctx.grad_out, axis));
  });
}

Var solve_spd(Var s, Var rhs) {
  Tape& tape = common_tape(s, rhs);
  auto solved = k::solve_spd_factored(s.value(), rhs.value());
  auto factor = std::make_shared<k::SpdFactor>(std::move(solved.factor));
  return tape.record(std::move(solved.solution), {s, rhs}, [factor](const BackwardContext& ctx) {
    // Adjoint: dRhs = S⁻¹·dW, dS = −dRhs·Wᵀ symmetrized.
    Tensor g_rhs = k::cholesky_solve(*factor, ctx.grad_out);
    if (ctx.grad(0)) {
      Tensor g_s = k::scale(k::matmul(g_rhs, k::transpose(ctx.output)), -1.0);
      Tensor sym(g_s.shape());
      const std::size_t n = g_s.dim(0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) sym.at(i, j) = 0.5 * (g_s.at(i, j) + g_s.at(j, i));
      accumulate(ctx.grad(0), sym);
    }
    accumulate(ctx.grad(1), g_rhs);
  });
}

Var conv2d(Var x, Var w) {
  Tape& tape = common_tape(x, w);
  return tape.record(k::conv2d(x.value(), w.value()), {x, w}, [](const BackwardContext& ctx) {
    if (ctx.grad(0)) accumulate(ctx.grad(0), k::conv2d_grad_input(ctx.grad_out, ctx.input(1)));
    if (ctx.grad(1)) accumulate(ctx.grad(1), k::conv2d_grad_weight(ctx.grad_out, ctx.input(0)));
  });
}

Var elementwise(k::ElementwiseOp op, Var a, Var b) {
  Tape& tape = common_tape(a, b);
  return tape.record(k::elementwise(op, a.value(), b.value()), {a, b}, [op](const BackwardContext& ctx) {
    using Op = k::ElementwiseOp;
    switch (op) {
      case Op::add:
        accumulate(ctx.grad(0), ctx.grad_out);
        accumulate(ctx.grad(1), ctx.grad_out);
        break;
      case Op::sub:
        accumulate(ctx.grad(0), ctx.grad_out);
        accumulate(ctx.grad(1), k::scale(ctx.grad_out, -1.0));
        break;
      case Op::mul:
        accumulate(ctx.grad(0), k::elementwise(Op::mul, ctx.grad_out, ctx.input(1)));
        accumulate(ctx.grad(1), k::elementwise(Op::mul, ctx.grad_out, ctx.input(0)));
        break;
      case Op::broadcast_mul:
        if (ctx.grad(0)) accumulate(ctx.grad(0), k::elementwise(Op::broadcast_mul, ctx.grad_out, ctx.input(1)));
        if (ctx.grad(1)) {
          accumulate(ctx.grad(1),
                     k::reduce_to(k::elementwise(Op::mul, ctx.grad_out, ctx.input(0)), ctx.input(1).shape()));
        }
        break;
    }
  });
}

Var add(Var a, Var b) { return elementwise(k::ElementwiseOp::add, a, b); }
Var sub(Var a, Var b) { return elementwise(k::ElementwiseOp::sub, a, b); }
Var mul(Var a, Var b) { return elementwise(k::ElementwiseOp::mul, a, b); }
Var broadcast_mul(Var a, Var b) { return elementwise(k::ElementwiseOp::broadcast_mul, a, b); }

Var scale(Var a, double factor) {
  return a.tape().record(k::scale(a.value(), factor), {a}, [factor](const BackwardContext& ctx) {
    accumulate(ctx.grad(0), k::scale(ctx.grad_out, factor));
  });
}

Var reshape(Var a, Shape shape) {
  return a.tape().record(a.value().reshaped(std::move(shape)), {a}, [](const BackwardContext& ctx) {
    accumulate(ctx.grad(0), ctx.grad_out);
  });
}

Var sum(Var a) {
  return a.tape().record(Tensor::scalar(k::sum(a.value())), {a}, [](const BackwardContext& ctx) {
    if (!ctx.grad(0)) return;
    const double g = ctx.grad_out[0];
    for (auto& v : ctx.grad(0)->data()) v += g;
  });
}

Var sum_axis(Var a, int axis, bool keepdim) {
  const std::size_t ax = k::normalize_axis(axis, a.value().rank());
  return a.tape().record(k::sum_axis(a.value(), axis, keepdim), {a}, [ax](const BackwardContext& ctx) {
    if (!ctx.grad(0)) return;
    const Shape& in = ctx.input(0).shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
    for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
    Tensor& g = *ctx.grad(0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t e = 0; e < in[ax]; ++e)
        for (std::size_t i = 0; i < inner; ++i) g[(o * in[ax] + e) * inner + i] += ctx.grad_out[o * inner + i];
  });
}

Var mean_axis(Var a, int axis, bool keepdim) {
  const std::size_t ax = k::normalize_axis(axis, a.value().rank());
  return scale(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(a.value().dim(ax)));
}

Var add_bias(Var a, Var bias) {
  Tape& tape = common_tape(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  const std::size_t n = av.shape().back();
  if (bv.numel() != n) {
    throw ShapeError("bias " + shape_str(bv.shape()) + " does not match last axis of " + shape_str(av.shape()));
  }
  Tensor out = av;
  out.clear_grad();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % n];
  return tape.record(std::move(out), {a, bias}, [n](const BackwardContext& ctx) {
    accumulate(ctx.grad(0), ctx.grad_out);
    if (ctx.grad(1)) {
      Tensor& gb = *ctx.grad(1);
      for (std::size_t i = 0; i < ctx.grad_out.numel(); ++i) gb[i % n] += ctx.grad_out[i];
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(z.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t rows = z.dim(0), classes = z.dim(1);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  Tensor probs = k::softmax(z, 1);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    // log-sum-exp form keeps the loss finite when a probability underflows.
    double mx = z.at(r, 0);
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z.at(r, c));
    double lse = 0.0;
    for (std::size_t c = 0; c < classes; ++c) lse += std::exp(z.at(r, c) - mx);
    loss += mx + std::log(lse) - z.at(r, static_cast<std::size_t>(labels[r]));
  }
  loss /= static_cast<double>(rows);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape().record(Tensor::scalar(loss), {logits},
                              [probs = std::move(probs), ys = std::move(ys)](const BackwardContext& ctx) {
                                if (!ctx.grad(0)) return;
                                const std::size_t rows = probs.dim(0), classes = probs.dim(1);
                                const double g = ctx.grad_out[0] / static_cast<double>(rows);
                                Tensor& gz = *ctx.grad(0);
                                for (std::size_t r = 0; r < rows; ++r) {
                                  for (std::size_t c = 0; c < classes; ++c) {
                                    const double target = static_cast<std::size_t>(ys[r]) == c ? 1.0 : 0.0;
                                    gz.at(r, c) += g * (probs.at(r, c) - target);
                                  }
                                }
                              });
}

}  // namespace cbb
