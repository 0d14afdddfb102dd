// SPDX-License-Identifier: Apache-2.0
#include "cbb/scm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cbb/errors.hpp"

namespace cbb::causal {

namespace {

void check_rows(const std::vector<double>& table, int rows, int cols, const char* name) {
  if (table.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
    throw ParameterError(std::string(name) + ": expected " + std::to_string(rows * cols) + " entries, got " +
                         std::to_string(table.size()));
  }
  for (int r = 0; r < rows; ++r) {
    double total = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double v = table[static_cast<std::size_t>(r * cols + c)];
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ParameterError(std::string(name) + ": entry (" + std::to_string(r) + "," + std::to_string(c) +
                             ") is not a probability");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      std::ostringstream msg;
      msg.precision(17);
      msg << name << ": row " << r << " sums to " << total;
      throw ParameterError(msg.str());
    }
  }
}

void check_outcome(int v, int card, const char* name) {
  if (v < 0 || v >= card) {
    throw ParameterError(std::string(name) + " outcome " + std::to_string(v) + " outside [0," + std::to_string(card) +
                         ")");
  }
}

std::size_t jidx(const Scm& s, int z, int x, int m, int y) {
  return static_cast<std::size_t>(((z * s.card_x + x) * s.card_m + m) * s.card_y + y);
}

// Marginals of the joint needed by the adjustment formulas.
struct Marginals {
  std::vector<double> xz;   // [X×Z]
  std::vector<double> xzy;  // [X×Z×Y]
  std::vector<double> xm;   // [X×M]
  std::vector<double> xmy;  // [X×M×Y]
  std::vector<double> x;    // [X]
  std::vector<double> z;    // [Z]
};

Marginals marginals(const Scm& s) {
  const auto j = joint(s);
  Marginals mg;
  mg.xz.assign(static_cast<std::size_t>(s.card_x * s.card_z), 0.0);
  mg.xzy.assign(static_cast<std::size_t>(s.card_x * s.card_z * s.card_y), 0.0);
  mg.xm.assign(static_cast<std::size_t>(s.card_x * s.card_m), 0.0);
  mg.xmy.assign(static_cast<std::size_t>(s.card_x * s.card_m * s.card_y), 0.0);
  mg.x.assign(static_cast<std::size_t>(s.card_x), 0.0);
  mg.z.assign(static_cast<std::size_t>(s.card_z), 0.0);
  for (int z = 0; z < s.card_z; ++z)
    for (int x = 0; x < s.card_x; ++x)
      for (int m = 0; m < s.card_m; ++m)
        for (int y = 0; y < s.card_y; ++y) {
          const double p = j[jidx(s, z, x, m, y)];
          mg.xz[static_cast<std::size_t>(x * s.card_z + z)] += p;
          mg.xzy[static_cast<std::size_t>((x * s.card_z + z) * s.card_y + y)] += p;
          mg.xm[static_cast<std::size_t>(x * s.card_m + m)] += p;
          mg.xmy[static_cast<std::size_t>((x * s.card_m + m) * s.card_y + y)] += p;
          mg.x[static_cast<std::size_t>(x)] += p;
          mg.z[static_cast<std::size_t>(z)] += p;
        }
  return mg;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Uniform in (0, 1], bit-exact across platforms.
double unit(std::mt19937_64& rng) { return (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53; }

int draw(std::mt19937_64& rng, const double* probs, int card) {
  const double u = unit(rng);
  double acc = 0.0;
  for (int i = 0; i < card; ++i) {
    acc += probs[i];
    if (u <= acc) return i;
  }
  // Rounding left the cumulative sum just under 1; take the last supported outcome.
  for (int i = card - 1; i >= 0; --i) {
    if (probs[i] > 0.0) return i;
  }
  return card - 1;
}

std::vector<double> dirichlet_rows(int rows, int cols, std::mt19937_64& rng) {
  std::vector<double> out(static_cast<std::size_t>(rows * cols));
  for (int r = 0; r < rows; ++r) {
    double total = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double e = -std::log(unit(rng));
      out[static_cast<std::size_t>(r * cols + c)] = e;
      total += e;
    }
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r * cols + c)] /= total;
    // Push the rounding residue into the largest entry so the row sums to 1.
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += out[static_cast<std::size_t>(r * cols + c)];
    auto first = out.begin() + r * cols;
    *std::max_element(first, first + cols) += 1.0 - s;
  }
  return out;
}

}  // namespace

void Scm::validate() const {
  for (int card : {card_z, card_x, card_m, card_y}) {
    if (card < 1 || card > kMaxCardinality) {
      throw ParameterError("cardinalities must lie in [1," + std::to_string(kMaxCardinality) + "]");
    }
  }
  check_rows(p_z, 1, card_z, "p_z");
  check_rows(p_x_given_z, card_z, card_x, "p_x_given_z");
  check_rows(p_m_given_x, card_x, card_m, "p_m_given_x");
  check_rows(p_y_given_mz, card_m * card_z, card_y, "p_y_given_m_z");
}

std::vector<double> joint(const Scm& s) {
  s.validate();
  std::vector<double> j(static_cast<std::size_t>(s.card_z * s.card_x * s.card_m * s.card_y));
  for (int z = 0; z < s.card_z; ++z)
    for (int x = 0; x < s.card_x; ++x)
      for (int m = 0; m < s.card_m; ++m)
        for (int y = 0; y < s.card_y; ++y)
          j[jidx(s, z, x, m, y)] = s.p_z[static_cast<std::size_t>(z)] * s.px_z(z, x) * s.pm_x(x, m) * s.py_mz(m, z, y);
  return j;
}

Dist observational(const Scm& s, int x) {
  s.validate();
  check_outcome(x, s.card_x, "X");
  const Marginals mg = marginals(s);
  const double px = mg.x[static_cast<std::size_t>(x)];
  if (px <= 0.0) throw ConditioningError("observational: P(X=" + std::to_string(x) + ") = 0");
  Dist out(static_cast<std::size_t>(s.card_y), 0.0);
  for (int z = 0; z < s.card_z; ++z) {
    const double pxz = mg.xz[static_cast<std::size_t>(x * s.card_z + z)];
    if (pxz <= 0.0) continue;  // P(z|x) = 0
    const double pz_given_x = pxz / px;
    for (int y = 0; y < s.card_y; ++y) {
      const double py_given_xz = mg.xzy[static_cast<std::size_t>((x * s.card_z + z) * s.card_y + y)] / pxz;
      out[static_cast<std::size_t>(y)] += py_given_xz * pz_given_x;
    }
  }
  return out;
}

Dist backdoor(const Scm& s, int x) {
  s.validate();
  check_outcome(x, s.card_x, "X");
  const Marginals mg = marginals(s);
  Dist out(static_cast<std::size_t>(s.card_y), 0.0);
  for (int z = 0; z < s.card_z; ++z) {
    const double pz = mg.z[static_cast<std::size_t>(z)];
    if (pz <= 0.0) continue;
    const double pxz = mg.xz[static_cast<std::size_t>(x * s.card_z + z)];
    for (int y = 0; y < s.card_y; ++y) {
      double py_given_xz = 0.0;
      if (pxz > 0.0) {
        py_given_xz = mg.xzy[static_cast<std::size_t>((x * s.card_z + z) * s.card_y + y)] / pxz;
      } else {
        for (int m = 0; m < s.card_m; ++m) py_given_xz += s.pm_x(x, m) * s.py_mz(m, z, y);
      }
      out[static_cast<std::size_t>(y)] += py_given_xz * pz;
    }
  }
  return out;
}

Dist frontdoor(const Scm& s, int x) {
  s.validate();
  check_outcome(x, s.card_x, "X");
  const Marginals mg = marginals(s);
  const double px = mg.x[static_cast<std::size_t>(x)];
  if (px <= 0.0) {
    throw ConditioningError("frontdoor: P(X=" + std::to_string(x) + ") = 0, so P(M|X) is not identified");
  }
  Dist out(static_cast<std::size_t>(s.card_y), 0.0);
  for (int m = 0; m < s.card_m; ++m) {
    const double pm_given_x = mg.xm[static_cast<std::size_t>(x * s.card_m + m)] / px;
    if (pm_given_x <= 0.0) continue;
    for (int xp = 0; xp < s.card_x; ++xp) {
      const double pxp = mg.x[static_cast<std::size_t>(xp)];
      if (pxp <= 0.0) continue;
      const double pxm = mg.xm[static_cast<std::size_t>(xp * s.card_m + m)];
      if (pxm <= 0.0) {
        throw ConditioningError("frontdoor: P(M=" + std::to_string(m) + " | X=" + std::to_string(xp) +
                                ") = 0 while P(X=" + std::to_string(xp) + ") > 0; P(Y|X',M) cannot be renormalized");
      }
      for (int y = 0; y < s.card_y; ++y) {
        const double py_given_xm = mg.xmy[static_cast<std::size_t>((xp * s.card_m + m) * s.card_y + y)] / pxm;
        out[static_cast<std::size_t>(y)] += pm_given_x * py_given_xm * pxp;
      }
    }
  }
  return out;
}

Dist interventional_truth(const Scm& s, int x) {
  s.validate();
  check_outcome(x, s.card_x, "X");
  Dist out(static_cast<std::size_t>(s.card_y), 0.0);
  for (int z = 0; z < s.card_z; ++z)
    for (int m = 0; m < s.card_m; ++m)
      for (int y = 0; y < s.card_y; ++y)
        out[static_cast<std::size_t>(y)] += s.p_z[static_cast<std::size_t>(z)] * s.pm_x(x, m) * s.py_mz(m, z, y);
  return out;
}

double total_variation(const Dist& a, const Dist& b) {
  if (a.size() != b.size()) throw ParameterError("total_variation: outcome sets differ");
  double t = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) t += std::abs(a[i] - b[i]);
  return 0.5 * t;
}

double max_abs_diff(const Dist& a, const Dist& b) {
  if (a.size() != b.size()) throw ParameterError("max_abs_diff: outcome sets differ");
  double t = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) t = std::max(t, std::abs(a[i] - b[i]));
  return t;
}

bool is_distribution(const Dist& d, double tol) {
  if (d.empty()) return false;
  double total = 0.0;
  for (double p : d) {
    if (!(p >= 0.0)) return false;
    total += p;
  }
  return std::abs(total - 1.0) <= tol;
}

Scm random_scm(int card_z, int card_x, int card_m, int card_y, std::uint64_t seed) {
  std::uint64_t state = seed;
  std::mt19937_64 rng(splitmix64(state));
  Scm s;
  s.card_z = card_z;
  s.card_x = card_x;
  s.card_m = card_m;
  s.card_y = card_y;
  for (int card : {card_z, card_x, card_m, card_y}) {
    if (card < 1 || card > kMaxCardinality) throw ParameterError("cardinalities must lie in [1,8]");
  }
  s.p_z = dirichlet_rows(1, card_z, rng);
  s.p_x_given_z = dirichlet_rows(card_z, card_x, rng);
  s.p_m_given_x = dirichlet_rows(card_x, card_m, rng);
  s.p_y_given_mz = dirichlet_rows(card_m * card_z, card_y, rng);
  s.validate();
  return s;
}

Scm strongly_confounded_scm() {
  Scm s;
  s.card_z = s.card_x = s.card_m = s.card_y = 2;
  s.p_z = {0.5, 0.5};
  s.p_x_given_z = {0.9, 0.1, 0.1, 0.9};
  s.p_m_given_x = {0.8, 0.2, 0.2, 0.8};
  // P(Y=1 | m, z) = 0.1 + 0.2·m + 0.6·z
  s.p_y_given_mz = {0.9, 0.1, 0.3, 0.7, 0.7, 0.3, 0.1, 0.9};
  s.validate();
  return s;
}

std::vector<Sample> sample_dataset(const Scm& s, std::size_t n, Regime regime, std::uint64_t seed) {
  s.validate();
  if (n < 1) throw ParameterError("sample_dataset: n must be at least 1");
  std::uint64_t state = seed;
  std::mt19937_64 rng(splitmix64(state));
  const std::vector<double> uniform_x(static_cast<std::size_t>(s.card_x), 1.0 / s.card_x);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample smp;
    smp.z = draw(rng, s.p_z.data(), s.card_z);
    const double* x_probs =
        regime == Regime::observational ? &s.p_x_given_z[static_cast<std::size_t>(smp.z * s.card_x)] : uniform_x.data();
    smp.x = draw(rng, x_probs, s.card_x);
    smp.m = draw(rng, &s.p_m_given_x[static_cast<std::size_t>(smp.x * s.card_m)], s.card_m);
    smp.y = draw(rng, &s.p_y_given_mz[static_cast<std::size_t>((smp.m * s.card_z + smp.z) * s.card_y)], s.card_y);
    out.push_back(smp);
  }
  return out;
}

std::string scm_to_json(const Scm& s) {
  s.validate();
  using nlohmann::json;
  auto rows = [](const std::vector<double>& t, int r, int c) {
    json out = json::array();
    for (int i = 0; i < r; ++i) {
      out.push_back(std::vector<double>(t.begin() + i * c, t.begin() + (i + 1) * c));
    }
    return out;
  };
  json doc;
  doc["card_z"] = s.card_z;
  doc["card_x"] = s.card_x;
  doc["card_m"] = s.card_m;
  doc["card_y"] = s.card_y;
  doc["p_z"] = s.p_z;
  doc["p_x_given_z"] = rows(s.p_x_given_z, s.card_z, s.card_x);
  doc["p_m_given_x"] = rows(s.p_m_given_x, s.card_x, s.card_m);
  json y = json::array();
  for (int m = 0; m < s.card_m; ++m) {
    std::vector<double> block(s.p_y_given_mz.begin() + m * s.card_z * s.card_y,
                              s.p_y_given_mz.begin() + (m + 1) * s.card_z * s.card_y);
    y.push_back(rows(block, s.card_z, s.card_y));
  }
  doc["p_y_given_m_z"] = y;
  return doc.dump(2);
}

Scm scm_from_json(std::string_view text) {
  using nlohmann::json;
  Scm s;
  try {
    const json doc = json::parse(text);
    s.card_z = doc.at("card_z").get<int>();
    s.card_x = doc.at("card_x").get<int>();
    s.card_m = doc.at("card_m").get<int>();
    s.card_y = doc.at("card_y").get<int>();
    s.p_z = doc.at("p_z").get<std::vector<double>>();
    for (const auto& row : doc.at("p_x_given_z")) {
      for (double v : row.get<std::vector<double>>()) s.p_x_given_z.push_back(v);
    }
    for (const auto& row : doc.at("p_m_given_x")) {
      for (double v : row.get<std::vector<double>>()) s.p_m_given_x.push_back(v);
    }
    for (const auto& block : doc.at("p_y_given_m_z")) {
      for (const auto& row : block) {
        for (double v : row.get<std::vector<double>>()) s.p_y_given_mz.push_back(v);
      }
    }
  } catch (const json::exception& e) {
    throw FormatError("bad SCM JSON: " + std::string(e.what()));
  }
  s.validate();
  return s;
}

}  // namespace cbb::causal
