// SPDX-License-Identifier: Apache-2.0
#include "cbb/optim.hpp"

#include "cbb/errors.hpp"

namespace cbb {

void Sgd::step(std::span<Tensor* const> params) {
  if (velocity_.empty()) {
    for (const Tensor* p : params) velocity_.emplace_back(p->numel(), 0.0);
  }
  if (velocity_.size() != params.size()) {
    throw UsageError("Sgd::step called with " + std::to_string(params.size()) + " parameters, expected " +
                     std::to_string(velocity_.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) {
      throw UsageError("Sgd::step: parameter " + std::to_string(i) + " " + shape_str(params[i]->shape()) +
                       " has no gradient");
    }
    if (velocity_[i].size() != params[i]->numel()) {
      throw UsageError("Sgd::step: parameter " + std::to_string(i) + " changed size");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto& v = velocity_[i];
    auto g = p.mutable_grad();
    auto data = p.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      v[j] = options_.momentum * v[j] + g[j] + options_.weight_decay * data[j];
      data[j] -= options_.lr * v[j];
    }
    p.zero_grad();
    p.check_finite("Sgd::step");
  }
}

}  // namespace cbb
