// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cbb/tape.hpp"

namespace cbb {

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const;
  double max_rel_err() const;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Relative error is |a − n| / max(|a|, |n|, denom_floor).
  double denom_floor = 1e-6;
};

using NamedTensor = std::pair<std::string, Tensor*>;

/// Central finite differences against reverse-mode gradients.
/// `loss` must rebuild the graph on the tape it is given, watching the
/// listed tensors, and return a scalar.
GradcheckReport check_gradients(const std::function<Var(Tape&)>& loss, const std::vector<NamedTensor>& params,
                                const GradcheckOptions& options = {});

/// Seeded block instance used by the gradient check command.
struct CbbGradcheckSetup {
  std::size_t channels = 16;
  double basis_ratio = 0.5;
  std::size_t num_queries = 4;
  std::size_t batch = 2;
  std::size_t height = 3;
  std::size_t width = 3;
  std::uint64_t seed = 0;
  /// Queries are redrawn at this scale so the softmax is far from uniform.
  double query_std = 0.5;
  bool share_branches = false;
  GradcheckOptions options;
};

/// Maps the block output to the scalar being differentiated.
using OutputLoss = std::function<Var(Var out)>;

/// Checks every learnable of a seeded block. The default loss is
/// sum(F ⊙ R) for a fixed random R.
GradcheckReport check_cbb_gradients(const CbbGradcheckSetup& setup, const OutputLoss& loss = {});

}  // namespace cbb
