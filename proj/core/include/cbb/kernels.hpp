// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tape-free numeric kernels. The differentiable ops in tape.hpp are thin
// wrappers over these; the inference path calls them directly.

#include <cstdint>
#include <vector>

#include "cbb/tensor.hpp"

namespace cbb::kernels {

// Raw row-major GEMM helpers; all accumulate into `c`.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

/// Batched matrix product [..×m×k]·[..×k×n]. Batch dims must match, or one
/// side must be a plain matrix shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Swaps the last two axes.
Tensor transpose(const Tensor& a);

/// Resolves a possibly negative axis, throwing ShapeError when out of range.
std::size_t normalize_axis(int axis, std::size_t rank);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
/// Given y = softmax(x) and dL/dy, returns dL/dx.
Tensor softmax_backward(const Tensor& y, const Tensor& grad_y, int axis);

enum class ElementwiseOp { add, sub, mul, broadcast_mul };

/// `b` must equal `a` in shape, except for broadcast_mul where `b` may carry
/// trailing singleton axes (e.g. [B×N×1] against [B×N×C]).
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// Sums `g` (shaped like the broadcast result) down to `target` by reducing
/// over the trailing axes where `target` has extent 1.
Tensor reduce_to(const Tensor& g, const Shape& target);

/// Sum over one axis; keepdim retains it with extent 1.
Tensor sum_axis(const Tensor& x, int axis, bool keepdim);
double sum(const Tensor& x);

/// Cholesky factor of a symmetric positive definite matrix.
struct SpdFactor {
  Tensor lower;         // L with s + ridge·I = L·Lᵀ
  double ridge = 0.0;   // diagonal shift actually applied
};

/// Factorizes `s`; on failure retries once with `fallback_ridge` on the
/// diagonal, then throws NumericalError with pivot and scale diagnostics.
SpdFactor cholesky(const Tensor& s, double fallback_ridge = 1e-6);
Tensor cholesky_solve(const SpdFactor& factor, const Tensor& rhs);

/// Solves s·W = rhs for SPD `s` [k×k] and `rhs` [k×n]. Counts toward
/// solve_count().
Tensor solve_spd(const Tensor& s, const Tensor& rhs);

struct SpdSolution {
  SpdFactor factor;
  Tensor solution;
};
/// solve_spd that also hands back the factor for reuse in a backward pass.
SpdSolution solve_spd_factored(const Tensor& s, const Tensor& rhs);

/// Number of solve_spd calls made on this thread.
std::uint64_t solve_count();

/// 3×3, stride 1, zero-padding 1 cross-correlation. x: [B×C×H×W],
/// w: [C×C×3×3].
Tensor conv2d(const Tensor& x, const Tensor& w);
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& w);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& x);

/// Singular values of a rank-2 tensor, descending (one-sided Jacobi).
std::vector<double> singular_values(const Tensor& a);

/// Count of singular values at or above rel_tol·σ₁.
std::size_t numerical_rank(const Tensor& a, double rel_tol);

}  // namespace cbb::kernels
