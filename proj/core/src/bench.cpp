// SPDX-License-Identifier: Apache-2.0
#include "cbb/bench.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <future>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cbb/errors.hpp"
#include "cbb/kernels.hpp"
#include "cbb/tape.hpp"

namespace cbb::bench {

namespace k = kernels;

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kPatternStream = 0x5041545445524E;
constexpr std::uint64_t kHeadStream = 0x48454144;
constexpr std::uint64_t kBlockStream = 0x424C4F434B;
constexpr std::uint64_t kShuffleStream = 0x53485546;

}  // namespace

void DomainSpec::validate() const {
  if (n_samples < 1) throw ParameterError("DomainSpec: n_samples must be >= 1");
  if (height < 1 || width < 1) throw ParameterError("DomainSpec: H and W must be >= 1");
  if (n_classes < 2) throw ParameterError("DomainSpec: need at least 2 classes");
  if (channels < 2 * static_cast<std::size_t>(n_classes)) {
    throw ParameterError("DomainSpec: need C >= 2·n_classes for orthogonal content and style directions");
  }
  if (!(std::abs(confounder_label_corr) <= 1.0)) {
    throw ParameterError("DomainSpec: |confounder_label_corr| must be <= 1");
  }
  if (!(noise_std >= 0.0)) throw ParameterError("DomainSpec: noise_std must be >= 0");
  if (!(object_fraction > 0.0 && object_fraction <= 1.0)) {
    throw ParameterError("DomainSpec: object_fraction must lie in (0,1]");
  }
  if (!std::isfinite(content_strength) || !std::isfinite(confounder_strength)) {
    throw ParameterError("DomainSpec: strengths must be finite");
  }
}

DomainPatterns domain_patterns(const DomainSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(spec.pattern_seed, kPatternStream));
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t classes = static_cast<std::size_t>(spec.n_classes);
  const std::size_t c = spec.channels;
  // 2·classes orthonormal rows: content first, then style.
  Tensor dirs({2 * classes, c});
  for (auto& v : dirs.data()) v = gauss(rng);
  for (std::size_t i = 0; i < 2 * classes; ++i) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) dot += dirs.at(i, ch) * dirs.at(j, ch);
        for (std::size_t ch = 0; ch < c; ++ch) dirs.at(i, ch) -= dot * dirs.at(j, ch);
      }
    }
    double norm = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) norm += dirs.at(i, ch) * dirs.at(i, ch);
    norm = std::sqrt(norm);
    for (std::size_t ch = 0; ch < c; ++ch) dirs.at(i, ch) /= norm;
  }
  DomainPatterns p;
  p.content = Tensor({classes, c});
  p.style = Tensor({classes, c});
  std::copy_n(dirs.data().begin(), classes * c, p.content.data().begin());
  std::copy_n(dirs.data().begin() + static_cast<long>(classes * c), classes * c, p.style.data().begin());

  const std::size_t n = spec.locations();
  const auto on = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(spec.object_fraction * static_cast<double>(n))));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  p.mask.assign(n, 0.0);
  for (std::size_t i = 0; i < on; ++i) p.mask[order[i]] = 1.0;
  return p;
}

void LabeledBatch::validate() const {
  if (features.rank() != 3 || features.dim(0) != labels.size()) {
    throw ShapeError("LabeledBatch: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (features.dim(1) != height * width) throw ShapeError("LabeledBatch: N != H·W");
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw ParameterError("LabeledBatch: label out of range");
  }
}

Tensor class_template(const DomainSpec& spec, int label) {
  const DomainPatterns p = domain_patterns(spec);
  if (label < 0 || label >= spec.n_classes) throw ParameterError("class_template: label out of range");
  const std::size_t n = spec.locations(), c = spec.channels;
  Tensor t({n, c});
  for (std::size_t loc = 0; loc < n; ++loc)
    for (std::size_t ch = 0; ch < c; ++ch)
      t.at(loc, ch) = spec.content_strength * p.mask[loc] * p.content.at(static_cast<std::size_t>(label), ch);
  return t;
}

LabeledBatch generate_domain(const DomainSpec& spec) {
  const DomainPatterns p = domain_patterns(spec);
  const std::size_t b = spec.n_samples, n = spec.locations(), c = spec.channels;
  const int classes = spec.n_classes;
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> pick_class(0, classes - 1);
  std::uniform_int_distribution<int> pick_other(0, classes - 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const double corr = spec.confounder_label_corr;
  const double agree = corr >= 0.0 ? (1.0 + corr * (classes - 1)) / classes : (1.0 + corr) / classes;

  LabeledBatch out;
  out.features = Tensor({b, n, c});
  out.labels.resize(b);
  out.confounders.resize(b);
  out.n_classes = classes;
  out.height = spec.height;
  out.width = spec.width;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = pick_class(rng);
    int z = 0;
    if (spec.regime == DomainRegime::target) {
      z = pick_class(rng);
    } else if (unit(rng) < agree) {
      z = y;
    } else {
      z = pick_other(rng);
      if (z >= y) ++z;
    }
    out.labels[i] = y;
    out.confounders[i] = z;
    double* dst = &out.features.data()[i * n * c];
    for (std::size_t loc = 0; loc < n; ++loc) {
      const double content = spec.content_strength * p.mask[loc];
      for (std::size_t ch = 0; ch < c; ++ch) {
        double v = content * p.content.at(static_cast<std::size_t>(y), ch) +
                   spec.confounder_strength * p.style.at(static_cast<std::size_t>(z), ch);
        if (spec.noise_std > 0.0) v += spec.noise_std * noise(rng);
        dst[loc * c + ch] = v;
      }
    }
  }
  return out;
}

std::string_view model_name(ModelKind kind) { return kind == ModelKind::baseline ? "baseline" : "cbb"; }

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  if (block) out = block->parameters();
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

Model init_model(ModelKind kind, std::size_t channels, int n_classes, std::size_t height, std::size_t width,
                 const ModelConfig& config, std::uint64_t seed) {
  if (n_classes < 2) throw ParameterError("init_model: need at least 2 classes");
  Model m;
  m.kind = kind;
  m.height = height;
  m.width = width;
  if (kind == ModelKind::cbb) {
    CbbConfig cfg;
    cfg.channels = channels;
    cfg.num_queries = config.num_queries;
    cfg.basis_ratio = config.basis_ratio;
    cfg.ridge = config.ridge;
    cfg.share_branches = config.share_branches;
    cfg.seed = mix_seed(seed, kBlockStream);
    m.block = init_params(cfg);
  }
  std::mt19937_64 rng(mix_seed(seed, kHeadStream));
  std::normal_distribution<double> gauss(0.0, config.head_init_std);
  m.head_w = Tensor({channels, static_cast<std::size_t>(n_classes)});
  for (auto& v : m.head_w.data()) v = gauss(rng);
  m.head_b = Tensor({static_cast<std::size_t>(n_classes)});
  return m;
}

namespace {

Var forward_logits(Tape& tape, Model& model, const Tensor& features) {
  Var x = tape.constant(features);
  Var feats = model.block ? cbb_forward(tape, x, *model.block, model.height, model.width).out : x;
  Var pooled = mean_axis(feats, 1, false);
  return add_bias(matmul(pooled, tape.watch(model.head_w)), tape.watch(model.head_b));
}

Tensor gather(const Tensor& features, std::span<const std::size_t> rows) {
  const std::size_t per = features.numel() / features.dim(0);
  Tensor out({rows.size(), features.dim(1), features.dim(2)});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(features.data().begin() + static_cast<long>(rows[i] * per), per,
                out.data().begin() + static_cast<long>(i * per));
  }
  return out;
}

}  // namespace

TrainResult train(Model model, const LabeledBatch& data, const TrainConfig& config, std::uint64_t seed) {
  data.validate();
  if (config.batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
  if (data.features.dim(2) != model.head_w.dim(0) || static_cast<std::size_t>(data.n_classes) != model.head_b.numel()) {
    throw ShapeError("train: model does not match data");
  }
  TrainResult result;
  for (Tensor* p : model.parameters()) p->set_requires_grad(true);
  Sgd sgd(config.optim);
  std::mt19937_64 rng(mix_seed(seed, kShuffleStream));
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> rows;
  std::vector<int> labels;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      rows.assign(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(stop));
      labels.clear();
      for (auto r : rows) labels.push_back(data.labels[r]);
      double loss_value = 0.0;
      try {
        Tape tape;
        Var loss = cross_entropy(forward_logits(tape, model, gather(data.features, rows)), labels);
        loss_value = loss.value()[0];
        tape.backward(loss);
        sgd.step(model.parameters());
      } catch (const NumericalError& e) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch << ", batch starting " << start << " (" << model_name(model.kind)
            << ", lr " << config.optim.lr << "): " << e.what();
        throw TrainingError(msg.str());
      }
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch << ": loss " << loss_value;
        throw TrainingError(msg.str());
      }
      total += loss_value * static_cast<double>(stop - start);
    }
    result.epoch_losses.push_back(total / static_cast<double>(n));
  }
  for (Tensor* p : model.parameters()) {
    p->set_requires_grad(false);
    p->clear_grad();
  }
  result.model = std::move(model);
  return result;
}

Tensor logits(const Model& model, const Tensor& features) {
  Tensor feats = features;
  if (model.block) {
    const ProjectionCache cache = precompute_projection(*model.block);
    feats = cbb_infer(features, *model.block, cache, model.height, model.width);
  }
  Tensor pooled = k::scale(k::sum_axis(feats, 1, false), 1.0 / static_cast<double>(feats.dim(1)));
  Tensor z = k::matmul(pooled, model.head_w);
  const std::size_t classes = model.head_b.numel();
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] += model.head_b[i % classes];
  return z;
}

std::vector<int> predict(const Model& model, const Tensor& features) {
  const Tensor z = logits(model, features);
  const std::size_t rows = z.dim(0), classes = z.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (z.at(r, c) > z.at(r, best)) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

double evaluate(const Model& model, const LabeledBatch& batch) {
  batch.validate();
  if (batch.features.dim(2) != model.head_w.dim(0) || static_cast<std::size_t>(batch.n_classes) != model.head_b.numel()) {
    throw ShapeError("evaluate: model does not match batch");
  }
  const auto pred = predict(model, batch.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == batch.labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace {

struct BlockDiagnostics {
  double gap = 0.0;
  std::size_t rank = 0;
};

BlockDiagnostics diagnose(Model& model, const Tensor& features) {
  if (!model.block) return {};
  Tape tape;
  const CbbOutput fwd = cbb_forward(tape, tape.constant(features), *model.block, model.height, model.width);
  const ProjectionCache cache = precompute_projection(*model.block);
  const Tensor inf = cbb_infer(features, *model.block, cache, model.height, model.width);
  const Tensor& ex = fwd.expected_x.value();
  const std::size_t rows = ex.dim(0) * ex.dim(1);
  return {max_abs_diff(fwd.out.value(), inf), k::numerical_rank(ex.reshaped({rows, ex.dim(2)}), 1e-8)};
}

}  // namespace

double train_infer_gap(Model& model, const Tensor& features) { return diagnose(model, features).gap; }

std::size_t expected_x_rank(const Model& model, const Tensor& features) {
  if (!model.block) return 0;
  Tape tape;
  Model copy = model;
  const CbbOutput fwd = cbb_forward(tape, tape.constant(features), *copy.block, copy.height, copy.width);
  const Tensor& ex = fwd.expected_x.value();
  return k::numerical_rank(ex.reshaped({ex.dim(0) * ex.dim(1), ex.dim(2)}), 1e-8);
}

Aggregate aggregate(std::vector<double> values) {
  Aggregate a;
  if (values.empty()) return a;
  const double n = static_cast<double>(values.size());
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / (n - 1.0));
  }
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  a.median = values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
  return a;
}

bool RunReport::all_checks_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::vector<double> RunReport::accuracies(ModelKind model, DomainRegime domain) const {
  std::vector<double> out;
  for (const auto& r : records) {
    if (r.model == model) out.push_back(domain == DomainRegime::source ? r.source_accuracy : r.target_accuracy);
  }
  return out;
}

namespace {

struct SeedOutcome {
  SeedRecord baseline;
  SeedRecord cbb;
  double gap = 0.0;
  std::size_t rank = 0;
  TrainedSeed models;
};

SeedOutcome run_seed(const ExperimentConfig& config, std::uint64_t seed, const CachedBaseline* cached) {
  DomainSpec src_spec = config.source;
  src_spec.seed = mix_seed(config.source.seed, seed);
  src_spec.regime = DomainRegime::source;
  DomainSpec tgt_spec = config.target;
  tgt_spec.seed = mix_seed(config.target.seed, seed);
  tgt_spec.regime = DomainRegime::target;
  const LabeledBatch src = generate_domain(src_spec);
  const LabeledBatch tgt = generate_domain(tgt_spec);

  SeedOutcome out;
  out.models.seed = seed;
  const std::uint64_t shuffle_seed = mix_seed(seed, kShuffleStream);
  for (ModelKind kind : {ModelKind::baseline, ModelKind::cbb}) {
    if (kind == ModelKind::baseline && cached) {
      out.baseline = cached->record;
      out.models.baseline = cached->model;
      continue;
    }
    Model init = init_model(kind, src_spec.channels, src_spec.n_classes, src_spec.height, src_spec.width, config.model,
                            seed);
    TrainResult trained = train(std::move(init), src, config.train, shuffle_seed);
    SeedRecord rec;
    rec.seed = seed;
    rec.model = kind;
    rec.source_accuracy = evaluate(trained.model, src);
    rec.target_accuracy = evaluate(trained.model, tgt);
    rec.train_losses = std::move(trained.epoch_losses);
    if (kind == ModelKind::baseline) {
      out.baseline = std::move(rec);
      out.models.baseline = std::move(trained.model);
    } else {
      for (const LabeledBatch* batch : {&src, &tgt}) {
        const BlockDiagnostics d = diagnose(trained.model, batch->features);
        out.gap = std::max(out.gap, d.gap);
        out.rank = std::max(out.rank, d.rank);
      }
      out.cbb = std::move(rec);
      out.models.cbb = std::move(trained.model);
    }
  }
  return out;
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config, std::vector<TrainedSeed>* trained, BaselineCache* baselines) {
  config.source.validate();
  config.target.validate();
  if (config.seeds.size() < 3) throw ParameterError("run_experiment: need at least 3 seeds");
  if (config.source.pattern_seed != config.target.pattern_seed || config.source.channels != config.target.channels ||
      config.source.n_classes != config.target.n_classes || config.source.locations() != config.target.locations()) {
    throw ParameterError("run_experiment: source and target must share patterns, C, N and classes");
  }
  RunReport report;
  report.basis_ratio = config.model.basis_ratio;
  report.basis_count = basis_count(config.source.channels, config.model.basis_ratio);
  report.seeds = config.seeds;
  report.epochs = config.train.epochs;

  auto cached = [&](std::uint64_t seed) -> const CachedBaseline* {
    if (!baselines) return nullptr;
    const auto it = baselines->find(seed);
    return it == baselines->end() ? nullptr : &it->second;
  };
  std::vector<SeedOutcome> outcomes;
  if (config.parallel_seeds) {
    std::vector<std::future<SeedOutcome>> futures;
    for (auto seed : config.seeds) {
      futures.push_back(std::async(std::launch::async, run_seed, std::cref(config), seed, cached(seed)));
    }
    for (auto& f : futures) outcomes.push_back(f.get());
  } else {
    for (auto seed : config.seeds) outcomes.push_back(run_seed(config, seed, cached(seed)));
  }
  if (baselines) {
    for (const auto& o : outcomes) baselines->try_emplace(o.baseline.seed, CachedBaseline{o.baseline, o.models.baseline});
  }

  double gap = 0.0;
  std::size_t rank = 0;
  for (auto& o : outcomes) {
    report.records.push_back(o.baseline);
    report.records.push_back(o.cbb);
    gap = std::max(gap, o.gap);
    rank = std::max(rank, o.rank);
    if (trained) trained->push_back(std::move(o.models));
  }
  report.checks.push_back({"train_infer_max_abs_diff", gap, 1e-6, gap <= 1e-6});
  report.checks.push_back({"expected_x_max_rank", static_cast<double>(rank), static_cast<double>(report.basis_count),
                           rank <= report.basis_count});
  return report;
}

// ---- Serialization ---------------------------------------------------------

namespace {

using ojson = nlohmann::ordered_json;

ojson spec_json(const DomainSpec& s) {
  ojson j;
  j["n_samples"] = s.n_samples;
  j["channels"] = s.channels;
  j["height"] = s.height;
  j["width"] = s.width;
  j["n_classes"] = s.n_classes;
  j["content_strength"] = s.content_strength;
  j["confounder_strength"] = s.confounder_strength;
  j["confounder_label_corr"] = s.confounder_label_corr;
  j["noise_std"] = s.noise_std;
  j["object_fraction"] = s.object_fraction;
  j["seed"] = s.seed;
  j["pattern_seed"] = s.pattern_seed;
  return j;
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void spec_from(const nlohmann::json& j, DomainSpec& s) {
  read_opt(j, "n_samples", s.n_samples);
  read_opt(j, "channels", s.channels);
  read_opt(j, "height", s.height);
  read_opt(j, "width", s.width);
  read_opt(j, "n_classes", s.n_classes);
  read_opt(j, "content_strength", s.content_strength);
  read_opt(j, "confounder_strength", s.confounder_strength);
  read_opt(j, "confounder_label_corr", s.confounder_label_corr);
  read_opt(j, "noise_std", s.noise_std);
  read_opt(j, "object_fraction", s.object_fraction);
  read_opt(j, "seed", s.seed);
  read_opt(j, "pattern_seed", s.pattern_seed);
}

}  // namespace

ExperimentConfig default_experiment() {
  ExperimentConfig cfg;
  cfg.source.seed = 101;
  cfg.source.regime = DomainRegime::source;
  cfg.target = cfg.source;
  cfg.target.seed = 202;
  cfg.target.regime = DomainRegime::target;
  return cfg;
}

ExperimentConfig experiment_from_json(std::string_view text) {
  ExperimentConfig cfg = default_experiment();
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.contains("source")) spec_from(j.at("source"), cfg.source);
    if (j.contains("target")) spec_from(j.at("target"), cfg.target);
    cfg.source.regime = DomainRegime::source;
    cfg.target.regime = DomainRegime::target;
    if (j.contains("model")) {
      const auto& m = j.at("model");
      read_opt(m, "num_queries", cfg.model.num_queries);
      read_opt(m, "basis_ratio", cfg.model.basis_ratio);
      read_opt(m, "ridge", cfg.model.ridge);
      read_opt(m, "share_branches", cfg.model.share_branches);
      read_opt(m, "head_init_std", cfg.model.head_init_std);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      read_opt(t, "lr", cfg.train.optim.lr);
      read_opt(t, "momentum", cfg.train.optim.momentum);
      read_opt(t, "weight_decay", cfg.train.optim.weight_decay);
      read_opt(t, "epochs", cfg.train.epochs);
      read_opt(t, "batch_size", cfg.train.batch_size);
    }
    read_opt(j, "seeds", cfg.seeds);
    read_opt(j, "ratio_grid", cfg.ratio_grid);
    read_opt(j, "parallel_seeds", cfg.parallel_seeds);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad experiment config: " + std::string(e.what()));
  }
  cfg.source.validate();
  cfg.target.validate();
  return cfg;
}

std::string experiment_to_json(const ExperimentConfig& cfg) {
  ojson j;
  j["source"] = spec_json(cfg.source);
  j["target"] = spec_json(cfg.target);
  j["model"] = {{"num_queries", cfg.model.num_queries},
                {"basis_ratio", cfg.model.basis_ratio},
                {"ridge", cfg.model.ridge},
                {"share_branches", cfg.model.share_branches},
                {"head_init_std", cfg.model.head_init_std}};
  j["train"] = {{"lr", cfg.train.optim.lr},
                {"momentum", cfg.train.optim.momentum},
                {"weight_decay", cfg.train.optim.weight_decay},
                {"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size}};
  j["seeds"] = cfg.seeds;
  j["ratio_grid"] = cfg.ratio_grid;
  j["parallel_seeds"] = cfg.parallel_seeds;
  return j.dump(2);
}

std::string report_to_json(const RunReport& report) {
  ojson j;
  j["basis_ratio"] = report.basis_ratio;
  j["basis_count"] = report.basis_count;
  j["seeds"] = report.seeds;
  j["epochs"] = report.epochs;
  ojson records = ojson::array();
  for (const auto& r : report.records) {
    ojson rec;
    rec["seed"] = r.seed;
    rec["model"] = model_name(r.model);
    rec["source_accuracy"] = r.source_accuracy;
    rec["target_accuracy"] = r.target_accuracy;
    rec["train_losses"] = r.train_losses;
    records.push_back(rec);
  }
  j["records"] = records;
  ojson aggregates;
  for (ModelKind m : {ModelKind::baseline, ModelKind::cbb}) {
    ojson per;
    for (DomainRegime d : {DomainRegime::source, DomainRegime::target}) {
      const Aggregate a = aggregate(report.accuracies(m, d));
      per[d == DomainRegime::source ? "source" : "target"] = {{"mean", a.mean}, {"std", a.stddev}, {"median", a.median}};
    }
    aggregates[std::string(model_name(m))] = per;
  }
  j["aggregates"] = aggregates;
  ojson checks = ojson::array();
  for (const auto& c : report.checks) {
    checks.push_back({{"name", c.name}, {"value", c.value}, {"tolerance", c.tolerance}, {"passed", c.passed}});
  }
  j["checks"] = checks;
  j["all_checks_passed"] = report.all_checks_passed();
  return j.dump(2);
}

std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string report_to_csv(const RunReport& report) {
  std::ostringstream out;
  out << "seed,model,domain,accuracy\n";
  for (const auto& r : report.records) {
    out << r.seed << ',' << model_name(r.model) << ",source," << format_number(r.source_accuracy) << '\n';
    out << r.seed << ',' << model_name(r.model) << ",target," << format_number(r.target_accuracy) << '\n';
  }
  return out.str();
}

}  // namespace cbb::bench
