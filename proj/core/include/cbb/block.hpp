// SPDX-License-Identifier: Apache-2.0
#pragma once

// Causal Basis Block.
//
// For features X [B×N×C] (N = H·W) each branch estimates an expectation:
//   R = X·Qᵀ                 query responses            [B×N×S]
//   A = Σ_s softmax_s(R)·R   spatial weighting map      [B×N×1]
//   Xq = A ⊙ X               query-guided features      [B×N×C]
//   Coef = Xq·Bᵀ(BBᵀ+εI)⁻¹   least-squares coefficients [B×N×K]
//   Ê = Coef·B               low-rank reconstruction    [B×N×C]
// The block output is F = Ê[X] + Ê[M] + M with mediator M = conv3x3(X).

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cbb/tape.hpp"
#include "cbb/tensor.hpp"

namespace cbb {

inline constexpr double kDefaultRidge = 1e-6;
inline constexpr std::size_t kDefaultQueries = 16;
inline constexpr double kDefaultBasisRatio = 0.5;

/// K learnable basis rows spanning a subspace of R^C, 1 <= K < C.
struct BasisSet {
  Tensor bases;  // [K×C]
  double ridge = kDefaultRidge;

  std::size_t count() const { return bases.dim(0); }
  std::size_t channels() const { return bases.dim(1); }
  /// BBᵀ + ridge·I.
  Tensor gram() const;
  void validate() const;
};

/// S learnable sample queries in R^C.
struct SampleQueries {
  Tensor queries;  // [S×C]

  std::size_t count() const { return queries.dim(0); }
  std::size_t channels() const { return queries.dim(1); }
  void validate() const;
};

struct Branch {
  BasisSet basis;
  SampleQueries queries;
};

struct CbbConfig {
  std::size_t channels = 0;
  std::size_t num_queries = kDefaultQueries;
  double basis_ratio = kDefaultBasisRatio;
  double ridge = kDefaultRidge;
  bool share_branches = false;
  std::uint64_t seed = 0;
};

/// K = floor(ratio·C); throws ParameterError unless 1 <= K < C.
std::size_t basis_count(std::size_t channels, double ratio);

/// Learnable state of one block: an x-branch, an m-branch (aliasing the
/// x-branch when shared) and the mediator kernel [C×C×3×3].
///
/// Every non-const accessor bumps generation(), which is how a
/// ProjectionCache notices it has gone stale.
class CbbParams {
 public:
  CbbParams(CbbConfig config, Branch x_branch, Branch m_branch, Tensor conv_w);

  const CbbConfig& config() const { return config_; }
  std::size_t channels() const { return config_.channels; }
  std::size_t basis_count() const { return x_.basis.count(); }
  std::size_t query_count() const { return x_.queries.count(); }
  double ridge() const { return x_.basis.ridge; }
  bool shared() const { return config_.share_branches; }
  std::uint64_t generation() const { return generation_; }

  const Branch& x_branch() const { return x_; }
  const Branch& m_branch() const { return config_.share_branches ? x_ : m_; }
  const Tensor& conv_weight() const { return conv_w_; }

  Branch& mutable_x_branch();
  Branch& mutable_m_branch();
  Tensor& mutable_conv_weight();

  /// Distinct learnable tensors in a fixed order, for the optimizer.
  std::vector<Tensor*> parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
  void set_requires_grad(bool on);

  void validate() const;

 private:
  CbbConfig config_;
  Branch x_;
  Branch m_;
  Tensor conv_w_;
  std::uint64_t generation_ = 0;
};

/// Orthonormal bases (QR of a seeded Gaussian), queries ~ N(0, 0.02²),
/// kernel ~ N(0, 2/(9C)). Deterministic in config.seed.
CbbParams init_params(const CbbConfig& config);

/// Kernel whose output channel c copies input channel c at the centre tap.
Tensor identity_kernel(std::size_t channels);

// ---- Tape path -------------------------------------------------------------

struct BranchVars {
  Var bases;
  Var queries;
  double ridge = kDefaultRidge;
};

struct CbbVars {
  BranchVars x;
  BranchVars m;
  Var conv_w;
};

/// Binds every parameter to `tape` (shared branches are watched once).
CbbVars watch_params(Tape& tape, CbbParams& params);

Var query_response(Var x_in, Var queries);
Var spatial_weighting(Var responses);
Var reweight(Var x_in, Var weights);
Var estimate_coefficients(Var x_q, Var bases, double ridge);
Var reconstruct_expectation(Var coeffs, Var bases);
Var mediator(Var x_in, Var conv_w, std::size_t height, std::size_t width);
/// Full expectation pipeline of one branch applied to `features`.
Var branch_expectation(Var features, const BranchVars& branch);

struct CbbOutput {
  Var out;
  Var expected_x;
  Var expected_m;
  Var mediator;
};

CbbOutput cbb_forward(Tape& tape, Var x_in, const CbbVars& vars, std::size_t height, std::size_t width);
CbbOutput cbb_forward(Tape& tape, Var x_in, CbbParams& params, std::size_t height, std::size_t width);

// ---- Tape-free path --------------------------------------------------------

Tensor query_response(const Tensor& x_in, const SampleQueries& queries);
Tensor spatial_weighting(const Tensor& responses);
Tensor reweight(const Tensor& x_in, const Tensor& weights);
Tensor estimate_coefficients(const Tensor& x_q, const BasisSet& basis);
Tensor reconstruct_expectation(const Tensor& coeffs, const BasisSet& basis);
Tensor mediator(const Tensor& x_in, const Tensor& conv_w, std::size_t height, std::size_t width);

/// Per-branch C×C projectors Bᵀ(BBᵀ+εI)⁻¹B, valid for one parameter generation.
class ProjectionCache {
 public:
  ProjectionCache() = default;
  ProjectionCache(Tensor x_proj, Tensor m_proj, std::uint64_t generation);

  const Tensor& x_projection() const { return x_proj_; }
  const Tensor& m_projection() const { return m_proj_; }
  /// True when never computed, invalidated, or `params` changed since.
  bool stale(const CbbParams& params) const;
  void invalidate() { valid_ = false; }

 private:
  Tensor x_proj_;
  Tensor m_proj_;
  std::uint64_t generation_ = 0;
  bool valid_ = false;
};

Tensor projection_matrix(const BasisSet& basis);
ProjectionCache precompute_projection(const CbbParams& params);

struct InferOutput {
  Tensor out;
  Tensor expected_x;
  Tensor expected_m;
  Tensor mediator;
};

/// Deployment path: Ê = Xq·P with the cached projector, no tape, no solves.
/// Throws UsageError when the cache is stale.
InferOutput cbb_infer_parts(const Tensor& x_in, const CbbParams& params, const ProjectionCache& cache,
                            std::size_t height, std::size_t width);
Tensor cbb_infer(const Tensor& x_in, const CbbParams& params, const ProjectionCache& cache, std::size_t height,
                 std::size_t width);

// ---- Multi-scale -----------------------------------------------------------

struct ScaleInput {
  Var features;  // [B×(H·W)×C]
  std::size_t height = 0;
  std::size_t width = 0;
};

/// One independently parameterized block per feature scale.
std::vector<CbbOutput> cbb_forward_multiscale(Tape& tape, std::span<const ScaleInput> inputs,
                                              std::span<CbbParams> blocks);

// ---- Checkpoints -----------------------------------------------------------

/// Writes one CBTN file per named parameter plus manifest.json.
void save_checkpoint(const std::filesystem::path& dir, const CbbParams& params);
CbbParams load_checkpoint(const std::filesystem::path& dir);

}  // namespace cbb
