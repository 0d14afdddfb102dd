// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "cbb/block.hpp"
#include "cbb/errors.hpp"
#include "cbb/kernels.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cbb;
namespace k = cbb::kernels;

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat to_eigen(const Tensor& t, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const Mat>(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Mat as_rows(const Tensor& t) { return to_eigen(t, t.numel() / t.shape().back(), t.shape().back()); }

bool all_zero(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
}

Eigen::Index svd_rank(const Mat& m, double rel_tol) {
  Eigen::JacobiSVD<Mat> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  return (s.array() > rel_tol * s(0)).count();
}

BasisSet random_basis(std::size_t kk, std::size_t c, std::uint64_t seed, double ridge) {
  return BasisSet{oracle::random_tensor({kk, c}, seed), ridge};
}

CbbParams make_params(std::size_t c, std::size_t s, double ratio, std::uint64_t seed, bool shared = false) {
  CbbConfig cfg;
  cfg.channels = c;
  cfg.num_queries = s;
  cfg.basis_ratio = ratio;
  cfg.share_branches = shared;
  cfg.seed = seed;
  return init_params(cfg);
}

// Queries at init are tiny; larger ones make the weighting map non-trivial.
void scale_queries(CbbParams& p, std::uint64_t seed) {
  p.mutable_x_branch().queries.queries = oracle::random_tensor(p.x_branch().queries.queries.shape(), seed, 0.5);
  if (!p.shared()) {
    p.mutable_m_branch().queries.queries = oracle::random_tensor(p.m_branch().queries.queries.shape(), seed + 1, 0.5);
  }
}

}  // namespace

TEST_SUITE("init_params") {
  TEST_CASE("orthonormal bases at init") {
    const CbbParams p = make_params(8, 4, 0.5, 3);
    CHECK(p.basis_count() == 4);
    const Tensor& b = p.x_branch().basis.bases;
    const Tensor gram = k::matmul(b, k::transpose(b));
    CHECK(max_abs_diff(gram, Tensor::eye(4)) < 1e-12);
  }

  TEST_CASE("ratio 0.125 of 8 channels gives one basis") { CHECK(make_params(8, 4, 0.125, 1).basis_count() == 1); }

  TEST_CASE("same seed, identical parameters") {
    CbbParams a = make_params(8, 4, 0.5, 9);
    CbbParams b = make_params(8, 4, 0.5, 9);
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(identical(*pa[i], *pb[i]));
    CHECK_FALSE(identical(a.x_branch().basis.bases, make_params(8, 4, 0.5, 10).x_branch().basis.bases));
  }

  TEST_CASE("init statistics") {
    const CbbParams p = make_params(64, 64, 0.5, 4);
    auto stddev = [](const Tensor& t) {
      double ss = 0.0;
      for (double v : t.data()) ss += v * v;
      return std::sqrt(ss / static_cast<double>(t.numel()));
    };
    CHECK(stddev(p.x_branch().queries.queries) == doctest::Approx(0.02).epsilon(0.05));
    CHECK(stddev(p.conv_weight()) == doctest::Approx(std::sqrt(2.0 / (9 * 64))).epsilon(0.05));
  }

  TEST_CASE("ratios outside the valid range") {
    CHECK_THROWS_AS(make_params(8, 4, 0.1, 0), ParameterError);  // K = 0
    CHECK_THROWS_AS(make_params(8, 4, 1.0, 0), ParameterError);
    CHECK_THROWS_AS(make_params(8, 4, 0.0, 0), ParameterError);
    CHECK(basis_count(32, 0.9) == 28);
    CHECK(basis_count(32, 0.125) == 4);
  }

  TEST_CASE("shared branches alias one parameter set") {
    CbbParams p = make_params(8, 2, 0.5, 5, true);
    CHECK(&p.x_branch() == &p.m_branch());
    CHECK(p.parameters().size() == 3);
    CHECK(make_params(8, 2, 0.5, 5).parameters().size() == 5);
  }
}

TEST_SUITE("query_response") {
  TEST_CASE("selector queries copy channels") {
    const Tensor x = oracle::random_tensor({2, 3, 5}, 11);
    SampleQueries q{Tensor({2, 5})};
    q.queries.at(0, 0) = 1.0;
    q.queries.at(1, 1) = 1.0;
    const Tensor r = query_response(x, q);
    REQUIRE(r.shape() == Shape{2, 3, 2});
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(r[i * 2] == x[i * 5]);
      CHECK(r[i * 2 + 1] == x[i * 5 + 1]);
    }
  }

  TEST_CASE("zero input") {
    const Tensor r = query_response(Tensor({1, 4, 3}), SampleQueries{oracle::random_tensor({5, 3}, 12)});
    for (double v : r.data()) CHECK(v == 0.0);
  }

  TEST_CASE("dot-product loop oracle") {
    const Tensor x = oracle::random_tensor({2, 6, 7}, 13);
    const Tensor q = oracle::random_tensor({4, 7}, 14);
    const Tensor r = query_response(x, SampleQueries{q});
    for (std::size_t row = 0; row < 12; ++row)
      for (std::size_t s = 0; s < 4; ++s) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 7; ++c) acc += x[row * 7 + c] * q.at(s, c);
        CHECK(std::abs(r[row * 4 + s] - acc) < 1e-12);
      }
  }

  TEST_CASE("width mismatch") {
    CHECK_THROWS_AS(query_response(Tensor({1, 2, 3}), SampleQueries{Tensor({2, 4})}), ShapeError);
  }
}

TEST_SUITE("spatial_weighting") {
  TEST_CASE("single query passes the response through") {
    const Tensor r = oracle::random_tensor({2, 5, 1}, 15);
    CHECK(max_abs_diff(spatial_weighting(r), r) < 1e-15);
  }

  TEST_CASE("equal zero responses give zero") {
    const Tensor a = spatial_weighting(Tensor({1, 3, 2}));
    CHECK(a.shape() == Shape{1, 3, 1});
    for (double v : a.data()) CHECK(v == 0.0);
  }

  TEST_CASE("invariant under permutations of the query axis") {
    const Tensor r = oracle::random_tensor({2, 4, 6}, 16, 2.0);
    const Tensor base = spatial_weighting(r);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor shuffled(r.shape());
      for (std::size_t row = 0; row < 8; ++row)
        for (std::size_t s = 0; s < 6; ++s) shuffled[row * 6 + s] = r[row * 6 + perm[s]];
      CHECK(max_abs_diff(spatial_weighting(shuffled), base) <= 1e-12);
    }
  }
}

TEST_SUITE("reweight") {
  TEST_CASE("unit and zero weights") {
    const Tensor x = oracle::random_tensor({2, 3, 4}, 18);
    CHECK(identical(reweight(x, Tensor::full({2, 3, 1}, 1.0)), x));
    CHECK(all_zero(reweight(x, Tensor({2, 3, 1}))));
  }

  TEST_CASE("tiling oracle") {
    const Tensor x = oracle::random_tensor({2, 3, 4}, 19);
    const Tensor a = oracle::random_tensor({2, 3, 1}, 20);
    const Tensor y = reweight(x, a);
    for (std::size_t row = 0; row < 6; ++row)
      for (std::size_t c = 0; c < 4; ++c) CHECK(y[row * 4 + c] == a[row] * x[row * 4 + c]);
  }

  TEST_CASE("leading dims must match") { CHECK_THROWS_AS(reweight(Tensor({2, 3, 4}), Tensor({2, 2, 1})), ShapeError); }
}

TEST_SUITE("estimate_coefficients") {
  TEST_CASE("orthonormal bases reduce to a plain projection") {
    const CbbParams p = make_params(8, 2, 0.5, 21);
    BasisSet b = p.x_branch().basis;
    b.ridge = 0.0;
    const Tensor xq = oracle::random_tensor({2, 3, 8}, 22);
    const Tensor c = estimate_coefficients(xq, b);
    CHECK(max_abs_diff(c, k::matmul(xq, k::transpose(b.bases))) < 1e-12);
  }

  TEST_CASE("vectors inside the row space reconstruct exactly") {
    const BasisSet b = random_basis(3, 7, 23, 0.0);
    const Tensor coeffs = oracle::random_tensor({1, 5, 3}, 24);
    const Tensor xq = k::matmul(coeffs, b.bases);
    CHECK(max_abs_diff(reconstruct_expectation(estimate_coefficients(xq, b), b), xq) < 1e-10);
  }

  TEST_CASE("matches a dense least-squares solve") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const BasisSet b = random_basis(5, 12, 100 + seed, 0.0);
      const Tensor xq = oracle::random_tensor({2, 6, 12}, 200 + seed);
      const Mat c = as_rows(estimate_coefficients(xq, b));
      // Each row x solves min |x - c·B|, i.e. Bᵀ cᵀ ≈ xᵀ.
      const Mat bt = to_eigen(b.bases, 5, 12).transpose();
      const Mat x = as_rows(xq);
      const Mat ref = bt.colPivHouseholderQr().solve(x.transpose()).transpose();
      CHECK((c - ref).cwiseAbs().maxCoeff() < 1e-8);
    }
  }

  TEST_CASE("perturbing the coefficients never lowers the residual") {
    const BasisSet b = random_basis(4, 10, 25, 0.0);
    const Tensor xq = oracle::random_tensor({1, 6, 10}, 26);
    const Tensor c = estimate_coefficients(xq, b);
    auto residual = [&](const Tensor& coeffs) {
      const Tensor r = k::elementwise(k::ElementwiseOp::sub, xq, reconstruct_expectation(coeffs, b));
      double ss = 0.0;
      for (double v : r.data()) ss += v * v;
      return ss;
    };
    const double best = residual(c);
    std::mt19937_64 rng(27);
    std::normal_distribution<double> g;
    int violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      Tensor delta(c.shape());
      double norm = 0.0;
      for (auto& v : delta.data()) {
        v = g(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      Tensor moved = c;
      for (std::size_t i = 0; i < c.numel(); ++i) moved[i] += 1e-2 * delta[i] / norm;
      if (residual(moved) < best) ++violations;
    }
    CHECK(violations == 0);
  }

  TEST_CASE("residual is orthogonal to the bases") {
    const BasisSet b = random_basis(6, 11, 28, 0.0);
    const Tensor xq = oracle::random_tensor({3, 4, 11}, 29);
    const Tensor r = k::elementwise(k::ElementwiseOp::sub, xq, reconstruct_expectation(estimate_coefficients(xq, b), b));
    const Tensor proj = k::matmul(r, k::transpose(b.bases));
    for (double v : proj.data()) CHECK(std::abs(v) < 1e-8);
  }

  TEST_CASE("estimate then reconstruct is idempotent") {
    const BasisSet b = random_basis(3, 9, 30, 0.0);
    const Tensor xq = oracle::random_tensor({2, 5, 9}, 31);
    auto project = [&](const Tensor& t) { return reconstruct_expectation(estimate_coefficients(t, b), b); };
    const Tensor once = project(xq);
    CHECK(max_abs_diff(project(once), once) < 1e-10);
  }

  TEST_CASE("collinear bases without ridge still solve via the fallback") {
    Tensor bases({2, 4}, {1, 0, 0, 0, 1, 0, 0, 0});
    const Tensor c = estimate_coefficients(oracle::random_tensor({1, 2, 4}, 32), BasisSet{bases, 0.0});
    CHECK(c.all_finite());
  }

  TEST_CASE("width mismatch") {
    CHECK_THROWS_AS(estimate_coefficients(Tensor({1, 2, 5}), random_basis(2, 4, 0, 0.0)), ShapeError);
    CHECK_THROWS_AS(reconstruct_expectation(Tensor({1, 2, 3}), random_basis(2, 4, 0, 0.0)), ShapeError);
  }

  TEST_CASE("zero coefficients reconstruct zero") {
    CHECK(all_zero(reconstruct_expectation(Tensor({1, 3, 2}), random_basis(2, 5, 33, 0.0))));
  }
}

TEST_SUITE("mediator") {
  TEST_CASE("identity and zero kernels") {
    const Tensor x = oracle::random_tensor({2, 12, 5}, 34);
    CHECK(identical(mediator(x, identity_kernel(5), 3, 4), x));
    CHECK(all_zero(mediator(x, Tensor({5, 5, 3, 3}), 3, 4)));
  }

  TEST_CASE("loop oracle through the layout change") {
    const std::size_t b = 2, h = 3, w = 4, c = 5;
    const Tensor x = oracle::random_tensor({b, h * w, c}, 35);
    const Tensor kern = oracle::random_tensor({c, c, 3, 3}, 36);
    Tensor img({b, c, h, w});
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t n = 0; n < h * w; ++n)
        for (std::size_t ci = 0; ci < c; ++ci) img[(bi * c + ci) * h * w + n] = x[(bi * h * w + n) * c + ci];
    const Tensor ref = oracle::conv2d(img, kern);
    const Tensor m = mediator(x, kern, h, w);
    double worst = 0.0;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t n = 0; n < h * w; ++n)
        for (std::size_t ci = 0; ci < c; ++ci)
          worst = std::max(worst, std::abs(m[(bi * h * w + n) * c + ci] - ref[(bi * c + ci) * h * w + n]));
    CHECK(worst < 1e-12);
  }

  TEST_CASE("N must equal H·W") { CHECK_THROWS_AS(mediator(Tensor({1, 5, 2}), identity_kernel(2), 2, 2), ShapeError); }
}

TEST_SUITE("cbb_forward") {
  TEST_CASE("zero input gives zero output") {
    CbbParams p = make_params(8, 4, 0.5, 37);
    Tape tape;
    const CbbOutput out = cbb_forward(tape, tape.constant(Tensor({2, 6, 8})), p, 2, 3);
    for (double v : out.out.value().data()) CHECK(v == 0.0);
  }

  TEST_CASE("identical branches with identity kernel") {
    CbbParams p = make_params(8, 4, 0.5, 38);
    scale_queries(p, 39);
    p.mutable_m_branch() = p.x_branch();
    p.mutable_conv_weight() = identity_kernel(8);
    const Tensor x = oracle::random_tensor({2, 6, 8}, 40);
    Tape tape;
    const CbbOutput out = cbb_forward(tape, tape.constant(x), p, 2, 3);
    CHECK(identical(out.expected_x.value(), out.expected_m.value()));
    const Tensor expect =
        k::elementwise(k::ElementwiseOp::add, k::scale(out.expected_x.value(), 2.0), x);
    CHECK(max_abs_diff(out.out.value(), expect) < 1e-12);
  }

  TEST_CASE("joint permutation of a branch's queries leaves the output unchanged") {
    CbbParams p = make_params(8, 5, 0.5, 41);
    scale_queries(p, 42);
    const Tensor x = oracle::random_tensor({1, 6, 8}, 43);
    auto run = [&] {
      Tape tape;
      return cbb_forward(tape, tape.constant(x), p, 2, 3).out.value();
    };
    const Tensor base = run();
    Tensor& q = p.mutable_x_branch().queries.queries;
    const Tensor orig = q;
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    for (std::size_t s = 0; s < 5; ++s)
      for (std::size_t c = 0; c < 8; ++c) q.at(s, c) = orig.at(perm[s], c);
    CHECK(max_abs_diff(run(), base) <= 1e-12);
  }

  TEST_CASE("expectation component has rank at most K") {
    for (double ratio : {0.125, 0.25, 0.5, 0.75}) {
      CbbParams p = make_params(16, 4, ratio, 44);
      scale_queries(p, 45);
      const Tensor x = oracle::random_tensor({3, 12, 16}, 46);
      Tape tape;
      const CbbOutput out = cbb_forward(tape, tape.constant(x), p, 3, 4);
      const auto rank = svd_rank(as_rows(out.expected_x.value()), 1e-10);
      CHECK(rank <= static_cast<Eigen::Index>(p.basis_count()));
      CHECK(k::numerical_rank(out.expected_x.value().reshaped({36, 16}), 1e-10) == static_cast<std::size_t>(rank));
    }
  }

  TEST_CASE("single spatial location") {
    CbbParams p = make_params(4, 3, 0.5, 47);
    Tape tape;
    const CbbOutput out = cbb_forward(tape, tape.constant(oracle::random_tensor({2, 1, 4}, 48)), p, 1, 1);
    CHECK(out.out.value().all_finite());
  }

  TEST_CASE("every learnable receives a gradient") {
    CbbParams p = make_params(6, 3, 0.5, 49);
    scale_queries(p, 50);
    p.set_requires_grad(true);
    Tape tape;
    const CbbOutput out = cbb_forward(tape, tape.constant(oracle::random_tensor({2, 4, 6}, 51)), p, 2, 2);
    tape.backward(sum(mul(out.out, out.out)));
    for (Tensor* t : p.parameters()) {
      REQUIRE(t->has_grad());
      double mag = 0.0;
      for (double g : t->grad()) mag += std::abs(g);
      CHECK(mag > 0.0);
    }
  }
}

TEST_SUITE("projection cache") {
  TEST_CASE("orthonormal bases give BᵀB") {
    const CbbParams p = make_params(8, 2, 0.5, 52);
    BasisSet b = p.x_branch().basis;
    b.ridge = 0.0;
    const Tensor proj = projection_matrix(b);
    CHECK(max_abs_diff(proj, k::matmul(k::transpose(b.bases), b.bases)) < 1e-12);
    CHECK(max_abs_diff(k::matmul(proj, proj), proj) < 1e-12);
  }

  TEST_CASE("projector rank equals K") {
    for (std::size_t kk : {1, 3, 7}) {
      const Tensor proj = projection_matrix(random_basis(kk, 10, 53 + kk, kDefaultRidge));
      CHECK(svd_rank(to_eigen(proj, 10, 10), 1e-8) == static_cast<Eigen::Index>(kk));
      CHECK(k::numerical_rank(proj, 1e-8) == kk);
    }
  }

  TEST_CASE("idempotent across 100 random bases without ridge") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      const std::size_t c = 4 + rng() % 12;
      const std::size_t kk = 1 + rng() % (c - 1);
      const Tensor proj = projection_matrix(random_basis(kk, c, 1000 + seed, 0.0));
      const Tensor diff = k::elementwise(k::ElementwiseOp::sub, k::matmul(proj, proj), proj);
      for (double v : diff.data()) worst = std::max(worst, std::abs(v));
    }
    CHECK(worst < 1e-10);
  }

  TEST_CASE("inference agrees with the training path") {
    for (bool shared : {false, true}) {
      CbbParams p = make_params(12, 4, 0.5, 54, shared);
      scale_queries(p, 55);
      const Tensor x = oracle::random_tensor({3, 9, 12}, 56);
      Tape tape;
      const CbbOutput train = cbb_forward(tape, tape.constant(x), p, 3, 3);
      const ProjectionCache cache = precompute_projection(p);
      const auto before = k::solve_count();
      const InferOutput inf = cbb_infer_parts(x, p, cache, 3, 3);
      CHECK(k::solve_count() == before);
      CHECK(max_abs_diff(inf.out, train.out.value()) < 1e-6);
      CHECK(max_abs_diff(inf.expected_x, train.expected_x.value()) < 1e-6);
      CHECK(max_abs_diff(inf.mediator, train.mediator.value()) < 1e-12);
    }
  }

  TEST_CASE("zero input through inference") {
    CbbParams p = make_params(6, 2, 0.5, 57);
    const ProjectionCache cache = precompute_projection(p);
    CHECK(all_zero(cbb_infer(Tensor({1, 4, 6}), p, cache, 2, 2)));
  }

  TEST_CASE("parameter mutation makes the cache stale") {
    CbbParams p = make_params(6, 2, 0.5, 58);
    ProjectionCache cache;
    CHECK(cache.stale(p));
    cache = precompute_projection(p);
    CHECK_FALSE(cache.stale(p));
    const Tensor x = oracle::random_tensor({1, 4, 6}, 59);
    CHECK_NOTHROW(cbb_infer(x, p, cache, 2, 2));
    p.mutable_x_branch().basis.bases[0] += 0.1;
    CHECK(cache.stale(p));
    CHECK_THROWS_AS(cbb_infer(x, p, cache, 2, 2), UsageError);
    cache = precompute_projection(p);
    cache.invalidate();
    CHECK_THROWS_AS(cbb_infer(x, p, cache, 2, 2), UsageError);
  }
}

TEST_SUITE("multiscale") {
  TEST_CASE("one block per scale") {
    std::vector<CbbParams> blocks{make_params(4, 2, 0.5, 60), make_params(8, 2, 0.5, 61)};
    Tape tape;
    std::vector<ScaleInput> inputs{{tape.constant(oracle::random_tensor({1, 16, 4}, 62)), 4, 4},
                                   {tape.constant(oracle::random_tensor({1, 4, 8}, 63)), 2, 2}};
    const auto outs = cbb_forward_multiscale(tape, inputs, blocks);
    REQUIRE(outs.size() == 2);
    CHECK(outs[0].out.shape() == Shape{1, 16, 4});
    CHECK(outs[1].out.shape() == Shape{1, 4, 8});
    CHECK_THROWS_AS(cbb_forward_multiscale(tape, std::span(inputs).first(1), blocks), ShapeError);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip restores every tensor bit for bit") {
    const auto dir = std::filesystem::temp_directory_path() / "cbb_test_checkpoint";
    std::filesystem::remove_all(dir);
    for (bool shared : {false, true}) {
      CbbParams p = make_params(8, 3, 0.25, 64, shared);
      scale_queries(p, 65);
      save_checkpoint(dir, p);
      CHECK(std::filesystem::exists(dir / "manifest.json"));
      CbbParams back = load_checkpoint(dir);
      CHECK(back.shared() == shared);
      CHECK(back.basis_count() == p.basis_count());
      CHECK(back.ridge() == p.ridge());
      const auto a = p.parameters();
      const auto b = back.parameters();
      REQUIRE(a.size() == b.size());
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(identical(*a[i], *b[i]));
      std::filesystem::remove_all(dir);
    }
    CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  }
}
