// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic confounded-domain benchmark.
//
// Each sample is a feature map [N×C] built from
//   content_strength · mask(n) · content_dir(label)
// + confounder_strength · style_dir(z)
// + N(0, noise_std²)
// where mask marks a fixed "object" region and z is a nuisance class that
// agrees with the label more often than chance in the source domain and is
// independent of it in the target domain.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cbb/block.hpp"
#include "cbb/optim.hpp"
#include "cbb/tensor.hpp"

namespace cbb::bench {

enum class DomainRegime { source, target };

struct DomainSpec {
  std::size_t n_samples = 2000;
  std::size_t channels = 32;
  std::size_t height = 4;
  std::size_t width = 4;
  int n_classes = 4;
  double content_strength = 1.0;
  double confounder_strength = 2.0;
  /// Source regime: P(z = label) = (1 + corr·(n−1))/n for corr >= 0 and
  /// (1 + corr)/n for corr < 0; other values of z are equally likely.
  double confounder_label_corr = 0.95;
  double noise_std = 0.5;
  /// Fraction of spatial locations carrying class content.
  double object_fraction = 0.25;
  std::uint64_t seed = 0;
  /// Seeds the content/style directions and object mask. Domains meant to
  /// be compared must share it.
  std::uint64_t pattern_seed = 0;
  DomainRegime regime = DomainRegime::source;

  std::size_t locations() const { return height * width; }
  void validate() const;
};

/// Fixed seeded patterns shared by every domain with the same pattern_seed.
struct DomainPatterns {
  Tensor content;            // [classes×C], orthonormal rows
  Tensor style;              // [classes×C], orthonormal, orthogonal to content
  std::vector<double> mask;  // [N], 1 on object locations
};

DomainPatterns domain_patterns(const DomainSpec& spec);

struct LabeledBatch {
  Tensor features;               // [B×N×C]
  std::vector<int> labels;       // [B]
  std::vector<int> confounders;  // [B]
  int n_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

LabeledBatch generate_domain(const DomainSpec& spec);

/// Noise-free, confounder-free feature map of one class, [N×C].
Tensor class_template(const DomainSpec& spec, int label);

enum class ModelKind { baseline, cbb };
std::string_view model_name(ModelKind kind);

struct ModelConfig {
  std::size_t num_queries = kDefaultQueries;
  double basis_ratio = kDefaultBasisRatio;
  double ridge = kDefaultRidge;
  bool share_branches = false;
  double head_init_std = 0.01;
};

struct TrainConfig {
  SgdOptions optim;
  std::size_t epochs = 100;
  std::size_t batch_size = 50;
};

/// Linear head on mean-pooled features, optionally preceded by a CBB.
struct Model {
  ModelKind kind = ModelKind::baseline;
  std::optional<CbbParams> block;
  Tensor head_w;  // [C×classes]
  Tensor head_b;  // [classes]
  std::size_t height = 0;
  std::size_t width = 0;

  std::vector<Tensor*> parameters();
};

Model init_model(ModelKind kind, std::size_t channels, int n_classes, std::size_t height, std::size_t width,
                 const ModelConfig& config, std::uint64_t seed);

struct TrainResult {
  Model model;
  std::vector<double> epoch_losses;  // mean cross-entropy per epoch
};

/// Mini-batch SGD on cross-entropy; deterministic in `seed` (batch order).
/// Throws TrainingError if the loss becomes non-finite.
TrainResult train(Model model, const LabeledBatch& data, const TrainConfig& config, std::uint64_t seed);

/// Class scores [B×classes] through the tape-free path (projection cache for CBB).
Tensor logits(const Model& model, const Tensor& features);
std::vector<int> predict(const Model& model, const Tensor& features);
double evaluate(const Model& model, const LabeledBatch& batch);

/// Max |cbb_forward − cbb_infer| on `features`; 0 for the baseline.
double train_infer_gap(Model& model, const Tensor& features);
/// Numerical rank (σ_i ≥ 1e-8·σ₁) of the block's Ê[X] over `features`
/// viewed as [B·N × C]; 0 for the baseline.
std::size_t expected_x_rank(const Model& model, const Tensor& features);

struct ExperimentConfig {
  DomainSpec source;
  DomainSpec target;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> ratio_grid{0.9, 0.7, 0.5, 0.25, 0.125};
  bool parallel_seeds = false;
};

ExperimentConfig default_experiment();
/// Fields absent from the JSON keep their default_experiment() values.
ExperimentConfig experiment_from_json(std::string_view text);
std::string experiment_to_json(const ExperimentConfig& config);

struct SeedRecord {
  std::uint64_t seed = 0;
  ModelKind model = ModelKind::baseline;
  double source_accuracy = 0.0;
  double target_accuracy = 0.0;
  std::vector<double> train_losses;
};

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;
  double median = 0.0;
};
Aggregate aggregate(std::vector<double> values);

struct CheckResult {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct RunReport {
  double basis_ratio = 0.0;
  std::size_t basis_count = 0;
  std::vector<std::uint64_t> seeds;
  std::size_t epochs = 0;
  std::vector<SeedRecord> records;  // seed-major, baseline before cbb
  std::vector<CheckResult> checks;

  bool all_checks_passed() const;
  std::vector<double> accuracies(ModelKind model, DomainRegime domain) const;
};

struct TrainedSeed {
  std::uint64_t seed = 0;
  Model baseline;
  Model cbb;
};

/// Baseline outcomes keyed by seed. The baseline ignores the block settings,
/// so runs that differ only there (a basis-ratio sweep) can share them.
struct CachedBaseline {
  SeedRecord record;
  Model model;
};
using BaselineCache = std::map<std::uint64_t, CachedBaseline>;

/// Trains baseline and CBB per seed on the source domain, evaluates both on
/// source and target, and records train/infer agreement and Ê[X] rank checks.
/// Trained models are appended to `trained` when given. With `baselines`,
/// cached seeds skip baseline training and new ones are added.
RunReport run_experiment(const ExperimentConfig& config, std::vector<TrainedSeed>* trained = nullptr,
                         BaselineCache* baselines = nullptr);

std::string report_to_json(const RunReport& report);
/// Shortest decimal text that reads back to exactly `v`.
std::string format_number(double v);
/// Header "seed,model,domain,accuracy".
std::string report_to_csv(const RunReport& report);

}  // namespace cbb::bench
