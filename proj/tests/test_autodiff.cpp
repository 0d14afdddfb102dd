// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <functional>

#include "cbb/errors.hpp"
#include "cbb/kernels.hpp"
#include "cbb/optim.hpp"
#include "cbb/tape.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cbb;
namespace k = cbb::kernels;

namespace {

// Max relative error between tape gradients and central differences over
// every entry of every input. `f` builds a scalar from watched inputs.
double fd_max_rel_err(const std::function<Var(Tape&, std::vector<Var>&)>& f, std::vector<Tensor>& inputs,
                      double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  auto run = [&](bool grad) {
    Tape tape;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(tape.watch(t));
    Var out = f(tape, vars);
    if (grad) tape.backward(out);
    return out.value()[0];
  };
  run(true);
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = run(false);
      t[i] = orig - h;
      const double down = run(false);
      t[i] = orig;
      const double num = (up - down) / (2 * h);
      const double denom = std::max({std::abs(num), std::abs(analytic[i]), 1e-6});
      worst = std::max(worst, std::abs(num - analytic[i]) / denom);
    }
  }
  return worst;
}

// Fixed random projection so every output entry influences the loss.
Var project(Tape& tape, Var v, std::uint64_t seed) {
  return sum(mul(v, tape.constant(oracle::random_tensor(v.shape(), seed))));
}

}  // namespace

TEST_SUITE("matmul") {
  TEST_CASE("identity and dot product") {
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    const Tensor b({2, 2}, {3, 4, 5, 6});
    CHECK(identical(k::matmul(eye, b), b));
    const Tensor r = k::matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}));
    CHECK(r.shape() == Shape{1, 1});
    CHECK(r[0] == 11.0);
  }

  TEST_CASE("random 7x5 by 5x3 matches triple loop") {
    const Tensor a = oracle::random_tensor({7, 5}, 1);
    const Tensor b = oracle::random_tensor({5, 3}, 2);
    CHECK(max_abs_diff(k::matmul(a, b), oracle::matmul(a, b)) < 1e-12);
  }

  TEST_CASE("batched and shared operands agree with per-slice products") {
    const Tensor a = oracle::random_tensor({3, 4, 5}, 3);
    const Tensor shared = oracle::random_tensor({5, 2}, 4);
    const Tensor out = k::matmul(a, shared);
    REQUIRE(out.shape() == Shape{3, 4, 2});
    for (std::size_t t = 0; t < 3; ++t) {
      Tensor slice({4, 5});
      std::copy_n(a.data().begin() + static_cast<long>(t * 20), 20, slice.data().begin());
      const Tensor ref = oracle::matmul(slice, shared);
      for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(out[t * 8 + i] - ref[i]) < 1e-12);
    }
  }

  TEST_CASE("dimension mismatch is a shape error") {
    CHECK_THROWS_AS(k::matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
    CHECK_THROWS_AS(k::matmul(Tensor({2, 2, 3}), Tensor({3, 3, 1})), ShapeError);
  }

  TEST_CASE("gradients match finite differences") {
    std::vector<Tensor> in{oracle::random_tensor({2, 3, 4}, 5), oracle::random_tensor({4, 3}, 6)};
    CHECK(fd_max_rel_err([](Tape& t, std::vector<Var>& v) { return project(t, matmul(v[0], v[1]), 7); }, in) < 1e-6);
    std::vector<Tensor> batched{oracle::random_tensor({2, 3, 4}, 8), oracle::random_tensor({2, 4, 2}, 9)};
    CHECK(fd_max_rel_err([](Tape& t, std::vector<Var>& v) { return project(t, matmul(v[0], v[1]), 10); }, batched) <
          1e-6);
  }
}

TEST_SUITE("softmax") {
  TEST_CASE("uniform on equal inputs") {
    const Tensor y = k::softmax(Tensor({3}, {0, 0, 0}), -1);
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("large logits stay finite") {
    const Tensor y = k::softmax(Tensor({2}, {1000, 0}), 0);
    CHECK(y.all_finite());
    CHECK(y[0] == doctest::Approx(1.0));
    CHECK(y[1] < 1e-300);
  }

  TEST_CASE("matches extended precision oracle") {
    const Tensor x = oracle::random_tensor({1, 9}, 11, 3.0);
    const Tensor y = k::softmax(x, -1);
    const auto ref = oracle::softmax_ld(std::vector<double>(x.data().begin(), x.data().end()));
    for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(static_cast<long double>(y[i]) - ref[i]) < 1e-12L);
  }

  TEST_CASE("rows are positive and sum to one along any axis") {
    const Tensor x = oracle::random_tensor({3, 4, 5}, 12, 4.0);
    for (int axis : {0, 1, 2}) {
      const Tensor y = k::softmax(x, axis);
      const Tensor s = k::sum_axis(y, axis, false);
      for (double v : s.data()) CHECK(std::abs(v - 1.0) < 1e-12);
      for (double v : y.data()) CHECK(v > 0.0);
    }
  }

  TEST_CASE("invalid axis") { CHECK_THROWS_AS(k::softmax(Tensor({2, 2}), 2), ShapeError); }

  TEST_CASE("gradient") {
    std::vector<Tensor> in{oracle::random_tensor({2, 3, 4}, 13)};
    CHECK(fd_max_rel_err([](Tape& t, std::vector<Var>& v) { return project(t, softmax(v[0], 1), 14); }, in) < 1e-6);
  }
}

TEST_SUITE("solve_spd") {
  TEST_CASE("identity and diagonal systems") {
    const Tensor rhs = oracle::random_tensor({3, 2}, 15);
    CHECK(max_abs_diff(k::solve_spd(Tensor::eye(3), rhs), rhs) < 1e-15);
    const Tensor w = k::solve_spd(Tensor({2, 2}, {2, 0, 0, 4}), Tensor({2, 1}, {2, 4}));
    CHECK(w[0] == doctest::Approx(1.0));
    CHECK(w[1] == doctest::Approx(1.0));
  }

  TEST_CASE("random 8x8 SPD residual") {
    const Tensor g = oracle::random_tensor({8, 8}, 16);
    Tensor s = oracle::matmul(g, k::transpose(g));
    for (std::size_t i = 0; i < 8; ++i) s.at(i, i) += 0.5;
    const Tensor rhs = oracle::random_tensor({8, 3}, 17);
    const Tensor w = k::solve_spd(s, rhs);
    CHECK(max_abs_diff(oracle::matmul(s, w), rhs) < 1e-8);
  }

  TEST_CASE("singular matrix is rescued by the fallback ridge") {
    // rank-1 Gram: factorization fails without the ridge.
    const Tensor s({2, 2}, {1, 1, 1, 1});
    const auto f = k::cholesky(s);
    CHECK(f.ridge == 1e-6);
  }

  TEST_CASE("indefinite matrix raises with diagnostics") {
    const Tensor s({2, 2}, {1, 0, 0, -1});
    try {
      k::solve_spd(s, Tensor({2, 1}, {1, 1}));
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("not positive definite") != std::string::npos);
    }
  }

  TEST_CASE("asymmetric matrix is rejected") {
    CHECK_THROWS_AS(k::solve_spd(Tensor({2, 2}, {2, 1, 0, 2}), Tensor({2, 1}, {1, 1})), NumericalError);
  }

  TEST_CASE("gradient through a symmetric parameterization") {
    // S = G·Gᵀ + I keeps symmetric perturbations, matching how the block uses it.
    std::vector<Tensor> in{oracle::random_tensor({4, 4}, 18), oracle::random_tensor({4, 3}, 19)};
    auto f = [](Tape& t, std::vector<Var>& v) {
      Var s = add(matmul(v[0], transpose(v[0])), t.constant(Tensor::eye(4)));
      return project(t, solve_spd(s, v[1]), 20);
    };
    CHECK(fd_max_rel_err(f, in) < 1e-6);
  }

  TEST_CASE("solve counter increments per call") {
    const auto before = k::solve_count();
    k::solve_spd(Tensor::eye(2), Tensor({2, 1}, {1, 2}));
    CHECK(k::solve_count() == before + 1);
  }
}

TEST_SUITE("conv2d") {
  TEST_CASE("delta kernel is the identity") {
    const Tensor x = oracle::random_tensor({2, 3, 4, 5}, 21);
    Tensor w({3, 3, 3, 3});
    for (std::size_t c = 0; c < 3; ++c) w[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    CHECK(identical(k::conv2d(x, w), x));
  }

  TEST_CASE("all-ones kernel sums a constant neighbourhood") {
    const Tensor x = Tensor::full({1, 1, 5, 5}, 2.5);
    const Tensor y = k::conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0));
    CHECK(y[2 * 5 + 2] == doctest::Approx(9 * 2.5));
    CHECK(y[0] == doctest::Approx(4 * 2.5));  // corner sees 4 taps
  }

  TEST_CASE("matches the seven-loop oracle") {
    const Tensor x = oracle::random_tensor({2, 4, 5, 3}, 22);
    const Tensor w = oracle::random_tensor({4, 4, 3, 3}, 23);
    CHECK(max_abs_diff(k::conv2d(x, w), oracle::conv2d(x, w)) < 1e-12);
  }

  TEST_CASE("channel mismatch") {
    CHECK_THROWS_AS(k::conv2d(Tensor({1, 2, 3, 3}), Tensor({3, 3, 3, 3})), ShapeError);
    CHECK_THROWS_AS(k::conv2d(Tensor({1, 2, 3, 3}), Tensor({2, 2, 5, 5})), ShapeError);
  }

  TEST_CASE("gradients for input and kernel") {
    std::vector<Tensor> in{oracle::random_tensor({2, 3, 4, 3}, 24), oracle::random_tensor({3, 3, 3, 3}, 25)};
    CHECK(fd_max_rel_err([](Tape& t, std::vector<Var>& v) { return project(t, conv2d(v[0], v[1]), 26); }, in) < 1e-6);
  }
}

TEST_SUITE("elementwise") {
  using Op = k::ElementwiseOp;

  TEST_CASE("additive identity and scalar scaling") {
    const Tensor x = oracle::random_tensor({2, 3, 4}, 27);
    CHECK(identical(k::elementwise(Op::add, x, Tensor::zeros(x.shape())), x));
    const Tensor scaled = k::elementwise(Op::broadcast_mul, x, Tensor::full({2, 3, 1}, 2.0));
    CHECK(max_abs_diff(scaled, k::scale(x, 2.0)) == 0.0);
  }

  TEST_CASE("broadcast matches explicit tiling") {
    const Tensor x = oracle::random_tensor({3, 4, 5}, 28);
    const Tensor a = oracle::random_tensor({3, 4, 1}, 29);
    Tensor tiled({3, 4, 5});
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t c = 0; c < 5; ++c) tiled[i * 5 + c] = a[i];
    CHECK(identical(k::elementwise(Op::broadcast_mul, x, a), k::elementwise(Op::mul, x, tiled)));
  }

  TEST_CASE("non-broadcastable shapes") {
    CHECK_THROWS_AS(k::elementwise(Op::add, Tensor({2, 3}), Tensor({3, 2})), ShapeError);
    CHECK_THROWS_AS(k::elementwise(Op::broadcast_mul, Tensor({2, 3, 4}), Tensor({1, 3, 4})), ShapeError);
    CHECK_THROWS_AS(k::elementwise(Op::broadcast_mul, Tensor({2, 3, 4}), Tensor({2, 3})), ShapeError);
  }

  TEST_CASE("gradients including broadcast reduction") {
    std::vector<Tensor> in{oracle::random_tensor({2, 3, 4}, 30), oracle::random_tensor({2, 3, 1}, 31),
                           oracle::random_tensor({2, 3, 4}, 32)};
    auto f = [](Tape& t, std::vector<Var>& v) {
      Var y = add(broadcast_mul(v[0], v[1]), mul(v[0], v[2]));
      return project(t, sub(y, v[2]), 33);
    };
    CHECK(fd_max_rel_err(f, in) < 1e-6);
  }
}

TEST_SUITE("reductions and head ops") {
  TEST_CASE("sum_axis, mean_axis, add_bias and cross_entropy gradients") {
    std::vector<Tensor> in{oracle::random_tensor({3, 4, 5}, 34), oracle::random_tensor({5, 3}, 35),
                           oracle::random_tensor({3}, 36)};
    const std::vector<int> labels{0, 2, 1};
    auto f = [&](Tape&, std::vector<Var>& v) {
      Var pooled = mean_axis(v[0], 1, false);  // [3×5]
      return cross_entropy(add_bias(matmul(pooled, v[1]), v[2]), labels);
    };
    CHECK(fd_max_rel_err(f, in) < 1e-6);
  }

  TEST_CASE("cross entropy of uniform logits is log(classes)") {
    Tape tape;
    const std::vector<int> labels{0, 1};
    Var loss = cross_entropy(tape.constant(Tensor::zeros({2, 4})), labels);
    CHECK(loss.value()[0] == doctest::Approx(std::log(4.0)));
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum gives ones") {
    Tensor x({4}, {1, 2, 3, 4});
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(sum(tape.watch(x)));
    for (double g : x.grad()) CHECK(g == 1.0);
  }

  TEST_CASE("quadratic gives 2x") {
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    Tape tape;
    Var v = tape.watch(x);
    tape.backward(sum(mul(v, v)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
  }

  TEST_CASE("repeated backward accumulates") {
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    Tape tape;
    Var v = tape.watch(x);
    Var loss = sum(mul(v, v));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == 4.0);
    CHECK(x.grad()[1] == 8.0);
  }

  TEST_CASE("non-scalar loss is a usage error") {
    Tensor x({2}, {1, 2});
    Tape tape;
    CHECK_THROWS_AS(tape.backward(tape.watch(x)), UsageError);
  }

  TEST_CASE("only requires_grad tensors receive gradients") {
    Tensor a({2}, {1, 2});
    Tensor b({2}, {3, 4});
    a.set_requires_grad(true);
    Tape tape;
    tape.backward(sum(mul(tape.watch(a), tape.watch(b))));
    CHECK(a.has_grad());
    CHECK_FALSE(b.has_grad());
  }

  TEST_CASE("gradient linearity: backward(L1+L2) = backward(L1) + backward(L2)") {
    Tensor w = oracle::random_tensor({4, 3}, 37);
    const Tensor x = oracle::random_tensor({2, 5, 4}, 38);
    w.set_requires_grad(true);
    auto l1 = [&](Tape& t) { return project(t, softmax(matmul(t.constant(x), t.watch(w)), -1), 39); };
    auto l2 = [&](Tape& t) {
      Var y = matmul(t.constant(x), t.watch(w));
      return sum(mul(y, y));
    };
    {
      Tape t;
      t.backward(add(l1(t), l2(t)));
    }
    const std::vector<double> joint(w.grad().begin(), w.grad().end());
    w.clear_grad();
    {
      Tape t;
      t.backward(l1(t));
    }
    {
      Tape t;
      t.backward(l2(t));
    }
    for (std::size_t i = 0; i < joint.size(); ++i) CHECK(std::abs(joint[i] - w.grad()[i]) < 1e-12);
  }

  TEST_CASE("non-finite results are rejected") {
    Tape tape;
    Var big = tape.constant(Tensor::full({1, 1}, 1e200));
    CHECK_THROWS_AS(matmul(big, big), NumericalError);
  }

  TEST_CASE("custom ops participate through record()") {
    Tensor x({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape tape;
    Var v = tape.watch(x);
    Tensor cubed = x;
    for (auto& e : cubed.data()) e = e * e * e;
    Var c = tape.record(std::move(cubed), {v}, [](const BackwardContext& ctx) {
      for (std::size_t i = 0; i < ctx.grad_out.numel(); ++i) {
        (*ctx.grad(0))[i] += ctx.grad_out[i] * 3 * ctx.input(0)[i] * ctx.input(0)[i];
      }
    });
    tape.backward(sum(c));
    CHECK(x.grad()[2] == 27.0);
  }
}

TEST_SUITE("sgd") {
  TEST_CASE("plain gradient step") {
    Tensor p({3}, {1, 2, 3});
    const std::vector<double> g{0.5, -1, 2};
    std::copy(g.begin(), g.end(), p.mutable_grad().begin());
    Sgd sgd({.lr = 1.0, .momentum = 0.0, .weight_decay = 0.0});
    std::vector<Tensor*> params{&p};
    sgd.step(params);
    CHECK(p[0] == 0.5);
    CHECK(p[1] == 3.0);
    CHECK(p[2] == 1.0);
    for (double v : p.grad()) CHECK(v == 0.0);
  }

  TEST_CASE("zero gradient is a fixed point") {
    Tensor p({2}, {1, -1});
    Sgd sgd({.lr = 0.1, .momentum = 0.9, .weight_decay = 0.0});
    std::vector<Tensor*> params{&p};
    for (int i = 0; i < 2; ++i) {
      p.mutable_grad();
      sgd.step(params);
    }
    CHECK(p[0] == 1.0);
    CHECK(p[1] == -1.0);
    for (double v : sgd.velocities()[0]) CHECK(v == 0.0);
  }

  TEST_CASE("missing gradient is a usage error") {
    Tensor p({2});
    Sgd sgd;
    std::vector<Tensor*> params{&p};
    CHECK_THROWS_AS(sgd.step(params), UsageError);
  }

  TEST_CASE("momentum on a convex quadratic follows the scalar recursion") {
    // f(p) = |p - t|^2 has curvature 2 per coordinate; with lr 0.1 and
    // momentum 0.9 the error contracts by sqrt(0.9) per step, so 1e-3 from a
    // unit-scale start takes roughly 150 steps rather than 50.
    Tensor p = oracle::random_tensor({6}, 40);
    const Tensor target = oracle::random_tensor({6}, 41);
    p.set_requires_grad(true);
    Sgd sgd({.lr = 0.1, .momentum = 0.9, .weight_decay = 0.0});
    std::vector<Tensor*> params{&p};
    std::vector<double> e(6), v(6, 0.0);
    for (std::size_t i = 0; i < 6; ++i) e[i] = p[i] - target[i];
    auto dist = [&] {
      double d = 0.0;
      for (std::size_t i = 0; i < 6; ++i) d += (p[i] - target[i]) * (p[i] - target[i]);
      return std::sqrt(d);
    };
    const double start = dist();
    int reached = -1;
    for (int step = 1; step <= 300; ++step) {
      Tape tape;
      Var d = sub(tape.watch(p), tape.constant(target));
      tape.backward(sum(mul(d, d)));
      sgd.step(params);
      for (std::size_t i = 0; i < 6; ++i) {
        v[i] = 0.9 * v[i] + 2.0 * e[i];
        e[i] -= 0.1 * v[i];
        CHECK(std::abs((p[i] - target[i]) - e[i]) < 1e-12);
      }
      if (step == 50) CHECK(dist() < 0.1 * start);
      if (reached < 0 && dist() < 1e-3) reached = step;
    }
    CHECK(reached > 50);
    CHECK(reached < 200);
  }
}
