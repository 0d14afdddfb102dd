// SPDX-License-Identifier: Apache-2.0
#include "cbb/block.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "cbb/errors.hpp"
#include "cbb/kernels.hpp"
#include "cbb/tensor_io.hpp"

namespace cbb {

namespace k = kernels;

Tensor BasisSet::gram() const {
  Tensor g = k::matmul(bases, k::transpose(bases));
  for (std::size_t i = 0; i < g.dim(0); ++i) g.at(i, i) += ridge;
  return g;
}

void BasisSet::validate() const {
  if (bases.rank() != 2) throw ShapeError("bases must be [K×C], got " + shape_str(bases.shape()));
  if (count() >= channels()) {
    throw ParameterError("basis count K=" + std::to_string(count()) + " must be below C=" + std::to_string(channels()));
  }
  if (!(ridge >= 0.0)) throw ParameterError("ridge must be non-negative");
}

void SampleQueries::validate() const {
  if (queries.rank() != 2) throw ShapeError("queries must be [S×C], got " + shape_str(queries.shape()));
}

std::size_t basis_count(std::size_t channels, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ParameterError("basis ratio must lie in (0,1), got " + std::to_string(ratio));
  }
  // The small slack keeps ratios like 0.7·10 from flooring to 6.
  const auto kk = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(channels) + 1e-9));
  if (kk < 1 || kk >= channels) {
    throw ParameterError("basis ratio " + std::to_string(ratio) + " with C=" + std::to_string(channels) +
                         " gives K=" + std::to_string(kk) + ", need 1 <= K < C");
  }
  return kk;
}

CbbParams::CbbParams(CbbConfig config, Branch x_branch, Branch m_branch, Tensor conv_w)
    : config_(config), x_(std::move(x_branch)), m_(std::move(m_branch)), conv_w_(std::move(conv_w)) {
  validate();
}

Branch& CbbParams::mutable_x_branch() {
  ++generation_;
  return x_;
}

Branch& CbbParams::mutable_m_branch() {
  ++generation_;
  return config_.share_branches ? x_ : m_;
}

Tensor& CbbParams::mutable_conv_weight() {
  ++generation_;
  return conv_w_;
}

std::vector<Tensor*> CbbParams::parameters() {
  ++generation_;
  std::vector<Tensor*> out{&x_.basis.bases, &x_.queries.queries};
  if (!config_.share_branches) {
    out.push_back(&m_.basis.bases);
    out.push_back(&m_.queries.queries);
  }
  out.push_back(&conv_w_);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> CbbParams::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out{{"x_bases", &x_.basis.bases},
                                                         {"x_queries", &x_.queries.queries}};
  if (!config_.share_branches) {
    out.emplace_back("m_bases", &m_.basis.bases);
    out.emplace_back("m_queries", &m_.queries.queries);
  }
  out.emplace_back("conv_w", &conv_w_);
  return out;
}

void CbbParams::set_requires_grad(bool on) {
  for (Tensor* t : parameters()) t->set_requires_grad(on);
}

void CbbParams::validate() const {
  const std::size_t c = config_.channels;
  for (const Branch* br : {&x_, &m_branch()}) {
    br->basis.validate();
    br->queries.validate();
    if (br->basis.channels() != c || br->queries.channels() != c) {
      throw ShapeError("branch channel width differs from C=" + std::to_string(c));
    }
  }
  if (m_branch().basis.count() != x_.basis.count() || m_branch().queries.count() != x_.queries.count()) {
    throw ShapeError("x- and m-branch must share K and S");
  }
  if (conv_w_.shape() != Shape{c, c, 3, 3}) {
    throw ShapeError("mediator kernel must be [C×C×3×3], got " + shape_str(conv_w_.shape()));
  }
}

namespace {

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Rows of a seeded Gaussian matrix, orthonormalized by modified Gram-Schmidt
// (two passes).
Tensor orthonormal_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Tensor m = gaussian({rows, cols}, 1.0, rng);
  for (std::size_t i = 0; i < rows; ++i) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += m.at(i, c) * m.at(j, c);
        for (std::size_t c = 0; c < cols; ++c) m.at(i, c) -= dot * m.at(j, c);
      }
    }
    double norm = 0.0;
    for (std::size_t c = 0; c < cols; ++c) norm += m.at(i, c) * m.at(i, c);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < cols; ++c) m.at(i, c) /= norm;
  }
  return m;
}

Branch init_branch(std::size_t kk, const CbbConfig& config, std::mt19937_64& rng) {
  Branch br;
  br.basis.bases = orthonormal_rows(kk, config.channels, rng);
  br.basis.ridge = config.ridge;
  br.queries.queries = gaussian({config.num_queries, config.channels}, 0.02, rng);
  return br;
}

}  // namespace

CbbParams init_params(const CbbConfig& config) {
  if (config.channels < 2) throw ParameterError("need at least 2 channels");
  if (config.num_queries < 1) throw ParameterError("need at least one sample query");
  if (!(config.ridge >= 0.0)) throw ParameterError("ridge must be non-negative");
  const std::size_t kk = basis_count(config.channels, config.basis_ratio);
  std::mt19937_64 rng(config.seed);
  Branch x = init_branch(kk, config, rng);
  Branch m = config.share_branches ? x : init_branch(kk, config, rng);
  const double conv_std = std::sqrt(2.0 / (9.0 * static_cast<double>(config.channels)));
  Tensor conv_w = gaussian({config.channels, config.channels, 3, 3}, conv_std, rng);
  return CbbParams(config, std::move(x), std::move(m), std::move(conv_w));
}

Tensor identity_kernel(std::size_t channels) {
  Tensor w({channels, channels, 3, 3});
  for (std::size_t c = 0; c < channels; ++c) w[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
  return w;
}

// ---- Tape path -------------------------------------------------------------

namespace {

void expect_features(const Shape& s, const char* what) {
  if (s.size() != 3) throw ShapeError(std::string(what) + " expects [B×N×C], got " + shape_str(s));
}

void expect_width(const Shape& features, const Shape& matrix, const char* what) {
  if (features.back() != matrix.back()) {
    throw ShapeError(std::string(what) + ": channel width " + std::to_string(features.back()) + " vs " +
                     shape_str(matrix));
  }
}

}  // namespace

CbbVars watch_params(Tape& tape, CbbParams& params) {
  CbbVars vars;
  Branch& x = params.mutable_x_branch();
  vars.x = {tape.watch(x.basis.bases), tape.watch(x.queries.queries), x.basis.ridge};
  if (params.shared()) {
    vars.m = vars.x;
  } else {
    Branch& m = params.mutable_m_branch();
    vars.m = {tape.watch(m.basis.bases), tape.watch(m.queries.queries), m.basis.ridge};
  }
  vars.conv_w = tape.watch(params.mutable_conv_weight());
  return vars;
}

Var query_response(Var x_in, Var queries) {
  expect_features(x_in.shape(), "query_response");
  expect_width(x_in.shape(), queries.shape(), "query_response");
  return matmul(x_in, transpose(queries));
}

Var spatial_weighting(Var responses) {
  expect_features(responses.shape(), "spatial_weighting");
  Var p = softmax(responses, -1);
  return sum_axis(mul(p, responses), -1, true);
}

Var reweight(Var x_in, Var weights) {
  expect_features(x_in.shape(), "reweight");
  return broadcast_mul(x_in, weights);
}

Var estimate_coefficients(Var x_q, Var bases, double ridge) {
  expect_features(x_q.shape(), "estimate_coefficients");
  expect_width(x_q.shape(), bases.shape(), "estimate_coefficients");
  Tape& tape = x_q.tape();
  const Shape s = x_q.shape();
  const std::size_t kk = bases.shape()[0];
  Var gram = matmul(bases, transpose(bases));
  if (ridge > 0.0) gram = add(gram, tape.constant(k::scale(Tensor::eye(kk), ridge)));
  Var flat = reshape(x_q, {s[0] * s[1], s[2]});
  Var rhs = matmul(bases, transpose(flat));  // [K×BN]
  Var w = solve_spd(gram, rhs);
  return reshape(transpose(w), {s[0], s[1], kk});
}

Var reconstruct_expectation(Var coeffs, Var bases) {
  expect_features(coeffs.shape(), "reconstruct_expectation");
  if (coeffs.shape().back() != bases.shape()[0]) {
    throw ShapeError("reconstruct_expectation: coefficients " + shape_str(coeffs.shape()) + " vs bases " +
                     shape_str(bases.shape()));
  }
  return matmul(coeffs, bases);
}

Var mediator(Var x_in, Var conv_w, std::size_t height, std::size_t width) {
  expect_features(x_in.shape(), "mediator");
  const Shape s = x_in.shape();
  if (s[1] != height * width) {
    throw ShapeError("mediator: N=" + std::to_string(s[1]) + " but H·W=" + std::to_string(height * width));
  }
  Var img = reshape(transpose(x_in), {s[0], s[2], height, width});
  Var conv = conv2d(img, conv_w);
  return transpose(reshape(conv, {s[0], s[2], s[1]}));
}

Var branch_expectation(Var features, const BranchVars& branch) {
  Var a = spatial_weighting(query_response(features, branch.queries));
  Var xq = reweight(features, a);
  return reconstruct_expectation(estimate_coefficients(xq, branch.bases, branch.ridge), branch.bases);
}

CbbOutput cbb_forward(Tape& tape, Var x_in, const CbbVars& vars, std::size_t height, std::size_t width) {
  if (&x_in.tape() != &tape) throw UsageError("cbb_forward: input recorded on a different tape");
  CbbOutput out;
  out.expected_x = branch_expectation(x_in, vars.x);
  out.mediator = mediator(x_in, vars.conv_w, height, width);
  out.expected_m = branch_expectation(out.mediator, vars.m);
  out.out = add(add(out.expected_x, out.expected_m), out.mediator);
  return out;
}

CbbOutput cbb_forward(Tape& tape, Var x_in, CbbParams& params, std::size_t height, std::size_t width) {
  return cbb_forward(tape, x_in, watch_params(tape, params), height, width);
}

// ---- Tape-free path --------------------------------------------------------

Tensor query_response(const Tensor& x_in, const SampleQueries& queries) {
  expect_features(x_in.shape(), "query_response");
  expect_width(x_in.shape(), queries.queries.shape(), "query_response");
  return k::matmul(x_in, k::transpose(queries.queries));
}

Tensor spatial_weighting(const Tensor& responses) {
  expect_features(responses.shape(), "spatial_weighting");
  const Tensor p = k::softmax(responses, -1);
  return k::sum_axis(k::elementwise(k::ElementwiseOp::mul, p, responses), -1, true);
}

Tensor reweight(const Tensor& x_in, const Tensor& weights) {
  expect_features(x_in.shape(), "reweight");
  return k::elementwise(k::ElementwiseOp::broadcast_mul, x_in, weights);
}

Tensor estimate_coefficients(const Tensor& x_q, const BasisSet& basis) {
  expect_features(x_q.shape(), "estimate_coefficients");
  expect_width(x_q.shape(), basis.bases.shape(), "estimate_coefficients");
  const Shape& s = x_q.shape();
  const Tensor flat = x_q.reshaped({s[0] * s[1], s[2]});
  const Tensor rhs = k::matmul(basis.bases, k::transpose(flat));
  const Tensor w = k::solve_spd(basis.gram(), rhs);
  return k::transpose(w).reshaped({s[0], s[1], basis.count()});
}

Tensor reconstruct_expectation(const Tensor& coeffs, const BasisSet& basis) {
  expect_features(coeffs.shape(), "reconstruct_expectation");
  if (coeffs.shape().back() != basis.count()) {
    throw ShapeError("reconstruct_expectation: coefficients " + shape_str(coeffs.shape()) + " vs bases " +
                     shape_str(basis.bases.shape()));
  }
  return k::matmul(coeffs, basis.bases);
}

Tensor mediator(const Tensor& x_in, const Tensor& conv_w, std::size_t height, std::size_t width) {
  expect_features(x_in.shape(), "mediator");
  const Shape& s = x_in.shape();
  if (s[1] != height * width) {
    throw ShapeError("mediator: N=" + std::to_string(s[1]) + " but H·W=" + std::to_string(height * width));
  }
  const Tensor img = k::transpose(x_in).reshaped({s[0], s[2], height, width});
  return k::transpose(k::conv2d(img, conv_w).reshaped({s[0], s[2], s[1]}));
}

ProjectionCache::ProjectionCache(Tensor x_proj, Tensor m_proj, std::uint64_t generation)
    : x_proj_(std::move(x_proj)), m_proj_(std::move(m_proj)), generation_(generation), valid_(true) {}

bool ProjectionCache::stale(const CbbParams& params) const {
  return !valid_ || generation_ != params.generation();
}

Tensor projection_matrix(const BasisSet& basis) {
  const Tensor w = k::solve_spd(basis.gram(), basis.bases);  // (BBᵀ+εI)⁻¹B
  return k::matmul(k::transpose(basis.bases), w);
}

ProjectionCache precompute_projection(const CbbParams& params) {
  params.validate();
  Tensor px = projection_matrix(params.x_branch().basis);
  Tensor pm = params.shared() ? px : projection_matrix(params.m_branch().basis);
  return ProjectionCache(std::move(px), std::move(pm), params.generation());
}

namespace {

Tensor branch_expectation_cached(const Tensor& features, const SampleQueries& queries, const Tensor& proj) {
  const Tensor a = spatial_weighting(query_response(features, queries));
  return k::matmul(reweight(features, a), proj);
}

}  // namespace

InferOutput cbb_infer_parts(const Tensor& x_in, const CbbParams& params, const ProjectionCache& cache,
                            std::size_t height, std::size_t width) {
  if (cache.stale(params)) throw UsageError("cbb_infer: projection cache is stale; call precompute_projection");
  InferOutput out;
  out.expected_x = branch_expectation_cached(x_in, params.x_branch().queries, cache.x_projection());
  out.mediator = mediator(x_in, params.conv_weight(), height, width);
  out.expected_m = branch_expectation_cached(out.mediator, params.m_branch().queries, cache.m_projection());
  out.out = k::elementwise(k::ElementwiseOp::add, k::elementwise(k::ElementwiseOp::add, out.expected_x, out.expected_m),
                           out.mediator);
  out.out.check_finite("cbb_infer");
  return out;
}

Tensor cbb_infer(const Tensor& x_in, const CbbParams& params, const ProjectionCache& cache, std::size_t height,
                 std::size_t width) {
  return cbb_infer_parts(x_in, params, cache, height, width).out;
}

std::vector<CbbOutput> cbb_forward_multiscale(Tape& tape, std::span<const ScaleInput> inputs,
                                              std::span<CbbParams> blocks) {
  if (inputs.size() != blocks.size()) {
    throw ShapeError("multiscale: " + std::to_string(inputs.size()) + " inputs for " + std::to_string(blocks.size()) +
                     " blocks");
  }
  std::vector<CbbOutput> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    out.push_back(cbb_forward(tape, inputs[i].features, blocks[i], inputs[i].height, inputs[i].width));
  }
  return out;
}

// ---- Checkpoints -----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const CbbParams& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  const auto& cfg = params.config();
  manifest["format"] = "cbb-checkpoint";
  manifest["version"] = 1;
  manifest["C"] = cfg.channels;
  manifest["K"] = params.basis_count();
  manifest["S"] = params.query_count();
  manifest["basis_ratio"] = cfg.basis_ratio;
  manifest["ridge"] = params.ridge();
  manifest["seed"] = cfg.seed;
  manifest["share_branches"] = cfg.share_branches;
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [name, tensor] : params.named_parameters()) {
    const std::string file = name + ".cbtn";
    save_tensor(dir / file, *tensor);
    files[name] = file;
  }
  manifest["tensors"] = files;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw FormatError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

CbbParams load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
    CbbConfig cfg;
    cfg.channels = manifest.at("C").get<std::size_t>();
    cfg.num_queries = manifest.at("S").get<std::size_t>();
    cfg.basis_ratio = manifest.at("basis_ratio").get<double>();
    cfg.ridge = manifest.at("ridge").get<double>();
    cfg.seed = manifest.at("seed").get<std::uint64_t>();
    cfg.share_branches = manifest.at("share_branches").get<bool>();
    const auto& files = manifest.at("tensors");
    auto load = [&](const char* name) { return load_tensor(dir / files.at(name).get<std::string>()); };
    Branch x{{load("x_bases"), cfg.ridge}, {load("x_queries")}};
    Branch m = cfg.share_branches ? x : Branch{{load("m_bases"), cfg.ridge}, {load("m_queries")}};
    CbbParams params(cfg, std::move(x), std::move(m), load("conv_w"));
    if (params.basis_count() != manifest.at("K").get<std::size_t>()) {
      throw FormatError("checkpoint K disagrees with stored bases");
    }
    return params;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace cbb
