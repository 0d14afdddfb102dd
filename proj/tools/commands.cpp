// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <ostream>
#include <random>
#include <sstream>

#include "cbb/bench.hpp"
#include "cbb/errors.hpp"
#include "cbb/scm.hpp"
#include "cbb/tensor_io.hpp"

namespace cbb::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

json load_config(const Options& o) {
  if (!o.config) return json::object();
  std::ifstream in(*o.config);
  if (!in) throw UsageError("cannot read config file " + o.config->string());
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw FormatError("config " + o.config->string() + " must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw FormatError("config " + o.config->string() + ": " + e.what());
  }
}

json section(const json& cfg, const char* name) { return cfg.contains(name) ? cfg.at(name) : json::object(); }

template <typename T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

fs::path prepare_out_dir(const Options& o) {
  const fs::path dir = resolve_out_dir(o);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw UsageError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
  const fs::path probe = dir / ".cbb_write_probe";
  {
    std::ofstream f(probe);
    if (!f || !(f << 'x') || !f.flush()) throw UsageError("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text) || !f.flush()) throw UsageError("cannot write " + path.string());
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(3) << v;
  return s.str();
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

bench::ExperimentConfig experiment_config(const Options& o, const json& cfg) {
  bench::ExperimentConfig e = bench::experiment_from_json(section(cfg, "experiment").dump());
  if (o.seeds) e.seeds = *o.seeds;
  if (o.ratio_grid) e.ratio_grid = *o.ratio_grid;
  if (o.parallel_seeds) e.parallel_seeds = true;
  if (e.seeds.empty()) throw UsageError("seed list is empty");
  return e;
}

void print_aggregates(std::ostream& out, const bench::RunReport& report) {
  using bench::DomainRegime;
  using bench::ModelKind;
  out << std::left << std::setw(10) << "model" << std::setw(13) << "source_mean" << std::setw(12) << "source_std"
      << std::setw(13) << "target_mean" << std::setw(12) << "target_std" << "target_median\n";
  for (ModelKind m : {ModelKind::baseline, ModelKind::cbb}) {
    const auto s = bench::aggregate(report.accuracies(m, DomainRegime::source));
    const auto t = bench::aggregate(report.accuracies(m, DomainRegime::target));
    out << std::setw(10) << bench::model_name(m) << std::setw(13) << fixed(s.mean) << std::setw(12) << fixed(s.stddev)
        << std::setw(13) << fixed(t.mean) << std::setw(12) << fixed(t.stddev) << fixed(t.median) << '\n';
  }
  out << std::right;
}

void save_head(const fs::path& dir, const bench::Model& m) {
  fs::create_directories(dir);
  save_tensor(dir / "head_w.cbtn", m.head_w);
  save_tensor(dir / "head_b.cbtn", m.head_b);
}

}  // namespace

fs::path resolve_out_dir(const Options& o) {
  if (o.out_dir) return *o.out_dir;
  if (const char* root = std::getenv("CBB_OUT_DIR"); root && *root) return fs::path(root) / o.command;
  return fs::path("cbb_out") / o.command;
}

// ---- gradcheck -------------------------------------------------------------

int cmd_gradcheck(const Options& o, std::ostream& out, const OutputLoss& loss) {
  const json cfg = section(load_config(o), "gradcheck");
  CbbGradcheckSetup setup;
  read_opt(cfg, "channels", setup.channels);
  read_opt(cfg, "basis_ratio", setup.basis_ratio);
  read_opt(cfg, "num_queries", setup.num_queries);
  read_opt(cfg, "batch", setup.batch);
  read_opt(cfg, "height", setup.height);
  read_opt(cfg, "width", setup.width);
  read_opt(cfg, "seed", setup.seed);
  read_opt(cfg, "query_std", setup.query_std);
  read_opt(cfg, "share_branches", setup.share_branches);
  read_opt(cfg, "step", setup.options.step);
  read_opt(cfg, "tolerance", setup.options.tolerance);
  read_opt(cfg, "denom_floor", setup.options.denom_floor);
  if (!(setup.options.step > 0.0) || !(setup.options.tolerance > 0.0)) {
    throw ParameterError("gradcheck step and tolerance must be positive");
  }
  if (setup.batch < 1 || setup.height < 1 || setup.width < 1) throw ParameterError("gradcheck shape must be positive");
  const fs::path dir = prepare_out_dir(o);

  const GradcheckReport report = check_cbb_gradients(setup, loss);
  out << std::left << std::setw(12) << "parameter" << std::setw(9) << "entries" << std::setw(13) << "max_abs_err"
      << std::setw(13) << "max_rel_err" << "status\n";
  ojson entries = ojson::array();
  for (const auto& e : report.entries) {
    out << std::setw(12) << e.name << std::setw(9) << e.checked << std::setw(13) << sci(e.max_abs_err) << std::setw(13)
        << sci(e.max_rel_err) << (e.passed ? "pass" : "FAIL") << '\n';
    entries.push_back({{"name", e.name},
                       {"checked", e.checked},
                       {"max_abs_err", e.max_abs_err},
                       {"max_rel_err", e.max_rel_err},
                       {"passed", e.passed}});
  }
  out << std::right << "tolerance " << sci(report.tolerance) << ", max rel err " << sci(report.max_rel_err()) << ": "
      << (report.passed() ? "pass" : "FAIL") << '\n';
  ojson j;
  j["channels"] = setup.channels;
  j["basis_ratio"] = setup.basis_ratio;
  j["num_queries"] = setup.num_queries;
  j["batch"] = setup.batch;
  j["locations"] = setup.height * setup.width;
  j["seed"] = setup.seed;
  j["step"] = setup.options.step;
  j["tolerance"] = report.tolerance;
  j["entries"] = entries;
  j["passed"] = report.passed();
  write_text(dir / "gradcheck.json", j.dump(2) + "\n");
  return report.passed() ? kSuccess : kCheckFailed;
}

// ---- oracle ----------------------------------------------------------------

int cmd_oracle(const Options& o, std::ostream& out) {
  using namespace causal;
  const json cfg = section(load_config(o), "oracle");
  long long n_scms = 500;
  std::uint64_t seed = 0;
  int max_card = 4;
  read_opt(cfg, "n_scms", n_scms);
  read_opt(cfg, "seed", seed);
  read_opt(cfg, "max_cardinality", max_card);
  if (n_scms < 1) throw UsageError("oracle: n_scms must be >= 1, got " + std::to_string(n_scms));
  if (max_card < 2 || max_card > kMaxCardinality) {
    throw ParameterError("oracle: max_cardinality must lie in [2, " + std::to_string(kMaxCardinality) + "]");
  }

  std::vector<std::pair<std::string, Scm>> fixtures;
  if (cfg.contains("fixtures")) {
    const fs::path base = o.config ? o.config->parent_path() : fs::path();
    for (const auto& f : cfg.at("fixtures")) {
      if (f.is_string()) {
        const fs::path p = base / f.get<std::string>();
        std::ifstream in(p);
        if (!in) throw UsageError("cannot read fixture " + p.string());
        std::stringstream buf;
        buf << in.rdbuf();
        fixtures.emplace_back(p.stem().string(), scm_from_json(buf.str()));
      } else {
        fixtures.emplace_back(f.value("name", "fixture" + std::to_string(fixtures.size())), scm_from_json(f.at("scm").dump()));
      }
    }
  } else {
    fixtures.emplace_back("strongly_confounded", strongly_confounded_scm());
  }
  const fs::path dir = prepare_out_dir(o);

  double max_backdoor = 0.0, max_frontdoor = 0.0, max_gap = 0.0;
  long long gap_index = -1;
  int gap_x = 0, interventions = 0;
  bool all_valid = true;
  Scm gap_scm;
  for (long long i = 0; i < n_scms; ++i) {
    std::mt19937_64 rng(splitmix(seed ^ splitmix(static_cast<std::uint64_t>(i))));
    std::uniform_int_distribution<int> card(2, max_card);
    std::uniform_int_distribution<int> zcard(1, max_card);
    const int cz = zcard(rng), cx = card(rng), cm = card(rng), cy = card(rng);
    const Scm s = random_scm(cz, cx, cm, cy, rng());
    for (int x = 0; x < cx; ++x) {
      const Dist truth = interventional_truth(s, x);
      const Dist bd = backdoor(s, x);
      const Dist fd = frontdoor(s, x);
      all_valid = all_valid && is_distribution(truth) && is_distribution(bd) && is_distribution(fd);
      max_backdoor = std::max(max_backdoor, max_abs_diff(bd, truth));
      max_frontdoor = std::max(max_frontdoor, max_abs_diff(fd, truth));
      const double gap = total_variation(observational(s, x), truth);
      if (gap > max_gap) {
        max_gap = gap;
        gap_index = i;
        gap_x = x;
        gap_scm = s;
      }
      ++interventions;
    }
  }
  const double max_dev = std::max(max_backdoor, max_frontdoor);
  const bool agree = all_valid && max_dev < 1e-12;
  out << "random SCMs          " << n_scms << " (" << interventions << " interventions)\n"
      << "max |backdoor-truth| " << sci(max_backdoor) << '\n'
      << "max |frontdoor-truth|" << ' ' << sci(max_frontdoor) << '\n'
      << "max TV(obs, do)      " << fixed(max_gap) << " (scm " << gap_index << ", x=" << gap_x << ")\n";

  ojson fix_json = ojson::array();
  bool fixtures_ok = true;
  for (const auto& [name, s] : fixtures) {
    s.validate();
    double tv = 0.0, dev = 0.0;
    ojson per_x = ojson::array();
    for (int x = 0; x < s.card_x; ++x) {
      try {
        const Dist fd = frontdoor(s, x);
        const double t = total_variation(observational(s, x), fd);
        tv = std::max(tv, t);
        dev = std::max(dev, max_abs_diff(fd, interventional_truth(s, x)));
        per_x.push_back({{"x", x}, {"tv_observational_frontdoor", t}});
      } catch (const ConditioningError& e) {
        fixtures_ok = false;
        per_x.push_back({{"x", x}, {"error", e.what()}});
      }
    }
    fixtures_ok = fixtures_ok && dev < 1e-12;
    out << "fixture " << name << ": max TV(obs, frontdoor) " << fixed(tv) << ", max |frontdoor-truth| " << sci(dev)
        << '\n';
    fix_json.push_back({{"name", name}, {"max_tv_observational_frontdoor", tv}, {"max_frontdoor_deviation", dev},
                        {"per_x", per_x}});
    write_text(dir / ("fixture_" + name + ".json"), scm_to_json(s) + "\n");
  }
  const bool ok = agree && fixtures_ok;
  out << (ok ? "pass" : "FAIL") << '\n';

  ojson j;
  j["n_scms"] = n_scms;
  j["seed"] = seed;
  j["max_cardinality"] = max_card;
  j["interventions"] = interventions;
  j["max_backdoor_deviation"] = max_backdoor;
  j["max_frontdoor_deviation"] = max_frontdoor;
  j["max_observational_interventional_tv"] = max_gap;
  j["max_gap_scm_index"] = gap_index;
  j["max_gap_x"] = gap_x;
  j["all_distributions_valid"] = all_valid;
  j["fixtures"] = fix_json;
  j["passed"] = ok;
  write_text(dir / "oracle.json", j.dump(2) + "\n");
  if (gap_index >= 0) write_text(dir / "max_gap_scm.json", scm_to_json(gap_scm) + "\n");
  return ok ? kSuccess : kCheckFailed;
}

// ---- sweep -----------------------------------------------------------------

int cmd_sweep(const Options& o, std::ostream& out) {
  const bench::ExperimentConfig cfg = experiment_config(o, load_config(o));
  if (cfg.ratio_grid.empty()) throw UsageError("ratio grid is empty");
  for (double r : cfg.ratio_grid) basis_count(cfg.source.channels, r);  // reject bad ratios before any training
  const fs::path dir = prepare_out_dir(o);

  bench::BaselineCache baselines;
  std::ostringstream csv;
  csv << "ratio,seed,model,domain,accuracy\n";
  ojson runs = ojson::array();
  bool ok = true;
  out << std::setw(6) << "ratio" << std::setw(4) << "K" << std::setw(16) << "baseline_target" << std::setw(12)
      << "cbb_target" << std::setw(14) << "infer_gap" << std::setw(6) << "rank"
      << "  checks\n";
  for (double ratio : cfg.ratio_grid) {
    bench::ExperimentConfig c = cfg;
    c.model.basis_ratio = ratio;
    const bench::RunReport report = bench::run_experiment(c, nullptr, &baselines);
    const std::string r = bench::format_number(ratio);
    for (const auto& rec : report.records) {
      const std::string prefix = r + ',' + std::to_string(rec.seed) + ',' + std::string(bench::model_name(rec.model));
      csv << prefix << ",source," << bench::format_number(rec.source_accuracy) << '\n';
      csv << prefix << ",target," << bench::format_number(rec.target_accuracy) << '\n';
    }
    const auto base = bench::aggregate(report.accuracies(bench::ModelKind::baseline, bench::DomainRegime::target));
    const auto cbb = bench::aggregate(report.accuracies(bench::ModelKind::cbb, bench::DomainRegime::target));
    ojson checks = ojson::array();
    for (const auto& ch : report.checks) {
      checks.push_back({{"name", ch.name}, {"value", ch.value}, {"tolerance", ch.tolerance}, {"passed", ch.passed}});
    }
    runs.push_back({{"ratio", ratio},
                    {"basis_count", report.basis_count},
                    {"baseline_target_mean", base.mean},
                    {"cbb_target_mean", cbb.mean},
                    {"checks", checks},
                    {"passed", report.all_checks_passed()}});
    ok = ok && report.all_checks_passed();
    out << std::setw(6) << r << std::setw(4) << report.basis_count << std::setw(16) << fixed(base.mean)
        << std::setw(12) << fixed(cbb.mean) << std::setw(14) << sci(report.checks.at(0).value) << std::setw(6)
        << report.checks.at(1).value << "  " << (report.all_checks_passed() ? "pass" : "FAIL") << '\n';
  }
  ojson summary;
  summary["seeds"] = cfg.seeds;
  summary["ratio_grid"] = cfg.ratio_grid;
  summary["epochs"] = cfg.train.epochs;
  summary["runs"] = runs;
  summary["passed"] = ok;
  write_text(dir / "sweep.csv", csv.str());
  write_text(dir / "sweep_summary.json", summary.dump(2) + "\n");
  return ok ? kSuccess : kCheckFailed;
}

// ---- run -------------------------------------------------------------------

int cmd_run(const Options& o, std::ostream& out) {
  const bench::ExperimentConfig cfg = experiment_config(o, load_config(o));
  const fs::path dir = prepare_out_dir(o);

  std::vector<bench::TrainedSeed> trained;
  const bench::RunReport report = bench::run_experiment(cfg, &trained);
  write_text(dir / "config.json", bench::experiment_to_json(cfg) + "\n");
  write_text(dir / "report.json", bench::report_to_json(report) + "\n");
  write_text(dir / "report.csv", bench::report_to_csv(report));
  for (const auto& t : trained) {
    const fs::path seed_dir = dir / "checkpoints" / ("seed_" + std::to_string(t.seed));
    save_head(seed_dir / "baseline", t.baseline);
    save_checkpoint(seed_dir / "cbb", *t.cbb.block);
    save_head(seed_dir / "cbb", t.cbb);
  }

  if (o.verbose) {
    for (const auto& r : report.records) {
      out << "seed " << r.seed << ' ' << bench::model_name(r.model) << ": source " << fixed(r.source_accuracy)
          << ", target " << fixed(r.target_accuracy) << ", loss " << fixed(r.train_losses.front()) << " -> "
          << fixed(r.train_losses.back()) << '\n';
    }
  }
  out << "basis ratio " << bench::format_number(report.basis_ratio) << " (K=" << report.basis_count << "), "
      << report.seeds.size() << " seeds, " << report.epochs << " epochs\n";
  print_aggregates(out, report);
  for (const auto& c : report.checks) {
    out << "check " << c.name << ' ' << sci(c.value) << " <= " << sci(c.tolerance) << ' '
        << (c.passed ? "pass" : "FAIL") << '\n';
  }
  out << "wrote " << (dir / "report.json").string() << '\n';
  return report.all_checks_passed() ? kSuccess : kCheckFailed;
}

// ---- dispatch --------------------------------------------------------------

int dispatch(const Options& o, std::ostream& out, std::ostream& err) {
  try {
    if (o.command == "gradcheck") return cmd_gradcheck(o, out);
    if (o.command == "oracle") return cmd_oracle(o, out);
    if (o.command == "sweep") return cmd_sweep(o, out);
    if (o.command == "run") return cmd_run(o, out);
    throw UsageError("unknown command '" + o.command + "'");
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const ParameterError& e) {
    err << "config error: " << e.what() << '\n';
  } catch (const FormatError& e) {
    err << "config error: " << e.what() << '\n';
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << '\n';
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kUsageError;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Causal Basis Block: gradient checks, causal oracle, benchmark runs and basis-ratio sweeps", "cbb"};
  Options o;
  std::string config, out_dir;
  std::vector<std::uint64_t> seeds;
  std::vector<double> grid;
  auto* config_opt = app.add_option("--config", config, "JSON config file");
  auto* out_opt = app.add_option("--out", out_dir, "Output directory (default $CBB_OUT_DIR/<command>)");
  auto* seeds_opt = app.add_option("--seeds", seeds, "Comma-separated seed list")->delimiter(',');
  auto* grid_opt = app.add_option("--ratio-grid", grid, "Comma-separated basis ratios")->delimiter(',');
  app.add_flag("--parallel-seeds", o.parallel_seeds, "Train seeds concurrently");
  app.add_flag("--verbose", o.verbose, "Per-seed detail");
  app.require_subcommand(1, 1);
  app.add_subcommand("gradcheck", "Finite-difference check of every block parameter")->fallthrough();
  app.add_subcommand("oracle", "Cross-check back-door, front-door and mutilated-graph oracles")->fallthrough();
  app.add_subcommand("sweep", "Benchmark across the basis-ratio grid")->fallthrough();
  app.add_subcommand("run", "One benchmark experiment with reports and checkpoints")->fallthrough();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }
  o.command = app.get_subcommands().front()->get_name();
  if (*config_opt) o.config = config;
  if (*out_opt) o.out_dir = out_dir;
  if (*seeds_opt) o.seeds = seeds;
  if (*grid_opt) o.ratio_grid = grid;
  return dispatch(o, out, err);
}

}  // namespace cbb::cli
