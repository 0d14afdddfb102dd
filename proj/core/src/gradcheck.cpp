// SPDX-License-Identifier: Apache-2.0
#include "cbb/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cbb/block.hpp"

namespace cbb {

bool GradcheckReport::passed() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double GradcheckReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_err);
  return m;
}

GradcheckReport check_gradients(const std::function<Var(Tape&)>& loss, const std::vector<NamedTensor>& params,
                                const GradcheckOptions& options) {
  for (const auto& [name, t] : params) {
    t->set_requires_grad(true);
    t->clear_grad();
  }
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto eval = [&] {
    Tape tape;
    return loss(tape).value()[0];
  };

  GradcheckReport report;
  report.tolerance = options.tolerance;
  for (const auto& [name, t] : params) {
    GradcheckEntry entry;
    entry.name = name;
    const std::vector<double> analytic = t->has_grad() ? std::vector<double>(t->grad().begin(), t->grad().end())
                                                       : std::vector<double>(t->numel(), 0.0);
    for (std::size_t i = 0; i < t->numel(); ++i) {
      const double orig = (*t)[i];
      (*t)[i] = orig + options.step;
      const double up = eval();
      (*t)[i] = orig - options.step;
      const double down = eval();
      (*t)[i] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.denom_floor});
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, abs_err / denom);
      ++entry.checked;
    }
    entry.passed = entry.max_rel_err < options.tolerance;
    report.entries.push_back(entry);
  }
  for (const auto& [name, t] : params) t->clear_grad();
  return report;
}

GradcheckReport check_cbb_gradients(const CbbGradcheckSetup& setup, const OutputLoss& loss) {
  CbbConfig cfg;
  cfg.channels = setup.channels;
  cfg.num_queries = setup.num_queries;
  cfg.basis_ratio = setup.basis_ratio;
  cfg.share_branches = setup.share_branches;
  cfg.seed = setup.seed;
  CbbParams params = init_params(cfg);

  std::mt19937_64 rng(setup.seed ^ 0xA5A5A5A5ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto redraw = [&](Tensor& t, double stddev) {
    for (auto& v : t.data()) v = stddev * gauss(rng);
  };
  redraw(params.mutable_x_branch().queries.queries, setup.query_std);
  if (!params.shared()) redraw(params.mutable_m_branch().queries.queries, setup.query_std);

  const std::size_t n = setup.height * setup.width;
  Tensor x({setup.batch, n, setup.channels});
  redraw(x, 1.0);
  Tensor weights({setup.batch, n, setup.channels});
  redraw(weights, 1.0);

  auto build = [&](Tape& tape) {
    const CbbOutput out = cbb_forward(tape, tape.constant(x), params, setup.height, setup.width);
    if (loss) return loss(out.out);
    return sum(mul(out.out, tape.constant(weights)));
  };
  std::vector<NamedTensor> named;
  const std::vector<Tensor*> tensors = params.parameters();
  const auto names = params.named_parameters();
  for (std::size_t i = 0; i < tensors.size(); ++i) named.emplace_back(names[i].first, tensors[i]);
  return check_gradients(build, named, setup.options);
}

}  // namespace cbb
