// SPDX-License-Identifier: Apache-2.0
#pragma once

// Exact enumeration over a small discrete SCM with the fixed graph
//   Z -> X -> M -> Y,  Z -> Y
// Z confounds X and Y; M carries the whole effect of X on Y, so both the
// back-door (observed Z) and front-door (via M) adjustments identify
// P(Y | do(X)).

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cbb::causal {

inline constexpr int kMaxCardinality = 8;

/// Probabilities over outcomes 0..n-1.
using Dist = std::vector<double>;

struct Scm {
  int card_z = 0;
  int card_x = 0;
  int card_m = 0;
  int card_y = 0;
  std::vector<double> p_z;          // [Z]
  std::vector<double> p_x_given_z;  // [Z×X], row z
  std::vector<double> p_m_given_x;  // [X×M], row x
  std::vector<double> p_y_given_mz; // [M×Z×Y], row (m,z)

  double px_z(int z, int x) const { return p_x_given_z[z * card_x + x]; }
  double pm_x(int x, int m) const { return p_m_given_x[x * card_m + m]; }
  double py_mz(int m, int z, int y) const { return p_y_given_mz[(m * card_z + z) * card_y + y]; }

  /// Throws ParameterError on bad cardinalities, table sizes, negative
  /// entries or rows not summing to 1 within 1e-12.
  void validate() const;
};

/// Full joint P(z, x, m, y), indexed [((z·X + x)·M + m)·Y + y].
std::vector<double> joint(const Scm& scm);

/// P(Y | X=x) = Σ_z P(Y|x,z)·P(z|x). ConditioningError when P(X=x) = 0.
Dist observational(const Scm& scm, int x);
/// P(Y | do(x)) via Σ_z P(Y|x,z)·P(z). Strata with P(x,z) = 0 contribute
/// through the structural P(Y|x,z) = Σ_m P(m|x)·P(Y|m,z).
Dist backdoor(const Scm& scm, int x);
/// P(Y | do(x)) via Σ_m P(m|x)·Σ_x' P(Y|x',m)·P(x'), every factor taken
/// from the observational joint.
Dist frontdoor(const Scm& scm, int x);
/// Ground truth on the mutilated graph: Σ_z Σ_m P(z)·P(m|x)·P(Y|m,z).
Dist interventional_truth(const Scm& scm, int x);

double total_variation(const Dist& a, const Dist& b);
double max_abs_diff(const Dist& a, const Dist& b);
/// Nonnegative entries summing to 1 within `tol`.
bool is_distribution(const Dist& d, double tol = 1e-12);

/// Every conditional row ~ Dirichlet(1), seeded.
Scm random_scm(int card_z, int card_x, int card_m, int card_y, std::uint64_t seed);

/// Binary SCM where Z nearly determines both X and Y while X has a weak
/// causal effect; observational and interventional P(Y|X) differ widely.
Scm strongly_confounded_scm();

enum class Regime { observational, interventional };

struct Sample {
  int x = 0;
  int m = 0;
  int y = 0;
  int z = 0;
  bool operator==(const Sample&) const = default;
};

/// n i.i.d. draws. Under the interventional regime X is assigned uniformly
/// at random, independent of Z.
std::vector<Sample> sample_dataset(const Scm& scm, std::size_t n, Regime regime, std::uint64_t seed);

std::string scm_to_json(const Scm& scm);
/// Throws FormatError on malformed JSON, ParameterError on invalid tables.
Scm scm_from_json(std::string_view text);

}  // namespace cbb::causal
