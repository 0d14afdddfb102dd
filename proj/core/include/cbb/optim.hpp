// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "cbb/tensor.hpp"

namespace cbb {

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity:
///   v <- momentum·v + grad + weight_decay·p;  p <- p - lr·v.
/// Velocity buffers are tied to parameter position, so every step must pass
/// the same parameter list in the same order.
class Sgd {
 public:
  explicit Sgd(SgdOptions options = {}) : options_(options) {}

  const SgdOptions& options() const { return options_; }

  /// Applies one update and zeroes the gradients. Throws UsageError if any
  /// parameter lacks a gradient.
  void step(std::span<Tensor* const> params);

  std::span<const std::vector<double>> velocities() const { return velocity_; }

 private:
  SgdOptions options_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace cbb
