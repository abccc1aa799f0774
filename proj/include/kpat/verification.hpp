#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpat/experiments.hpp"
#include "kpat/io.hpp"
#include "kpat/models.hpp"
#include "kpat/numerics.hpp"
#include "kpat/probes.hpp"
#include "kpat/problems.hpp"
#include "kpat/theory.hpp"
#include "kpat/training.hpp"

namespace kpat {

/// Outcome of one seeded verification study: a per-trial table plus a verdict.
struct StudyResult {
  StudyResult(std::string name_, bool pass_, std::string summary_, CsvTable table_, nlohmann::json meta_ = {})
      : name(std::move(name_)), pass(pass_), summary(std::move(summary_)), table(std::move(table_)),
        meta(std::move(meta_)) {}

  std::string name;
  bool pass = false;
  std::string summary;
  CsvTable table{{}};
  nlohmann::json meta;
  std::vector<std::pair<std::string, CsvTable>> extras;  // written as <name>_<stem>
};

enum class TableFormat { Csv, Jsonl };

inline TableFormat parse_table_format(const std::string& s) {
  if (s == "csv") return TableFormat::Csv;
  if (s == "jsonl") return TableFormat::Jsonl;
  throw ValidationError("unknown format '" + s + "' (csv|jsonl)");
}

/// One JSON object per row, values kept as the strings written to the CSV.
inline std::string table_jsonl(const CsvTable& t) {
  std::string out;
  for (const auto& row : t.rows()) {
    nlohmann::ordered_json j;
    for (std::size_t i = 0; i < row.size(); ++i) j[t.header()[i]] = row[i];
    out += j.dump() + "\n";
  }
  return out;
}

inline std::filesystem::path write_table(const CsvTable& t, const std::filesystem::path& dir, const std::string& stem,
                                         TableFormat f) {
  const auto path = dir / (stem + (f == TableFormat::Csv ? ".csv" : ".jsonl"));
  write_file(path, f == TableFormat::Csv ? t.str() : table_jsonl(t));
  return path;
}

inline void write_study(const StudyResult& r, const std::filesystem::path& dir, TableFormat f) {
  write_table(r.table, dir, r.name, f);
  for (const auto& [stem, t] : r.extras) write_table(t, dir, r.name + "_" + stem, f);
  nlohmann::ordered_json m;
  m["study"] = r.name;
  m["version"] = kVersion;
  m["pass"] = r.pass;
  m["summary"] = r.summary;
  m["config"] = r.meta;
  write_file(dir / (r.name + ".meta.json"), m.dump(2) + "\n");
}

namespace detail {
inline std::string b(bool v) { return v ? "true" : "false"; }
inline std::string u(std::size_t v) { return std::to_string(v); }
inline std::string fp(double v) { return full_precision(v); }
}  // namespace detail

// ---------------------------------------------------------------------------
// Planted readout at the theorem init: zero loss, full accuracy, norm bound.

struct ConstructStudy {
  unsigned n = 12;
  std::vector<unsigned> k_list{1, 2, 3};
  std::size_t trials = 50;
  double delta = 0.05;
  std::size_t min_success = 45;
  double loss_tolerance = 1e-12;  // 1/k is not a binary fraction, so h = 1 up to rounding
  std::uint64_t seed = 0;
};

inline StudyResult study_construct(const ConstructStudy& c) {
  StudyResult r{"construct", true, "", CsvTable({"k", "trial", "q", "jstar", "success", "loss", "accuracy", "norm",
                                                  "norm_bound", "ok"}),
                {{"n", c.n}, {"k_list", c.k_list}, {"trials", c.trials}, {"delta", c.delta},
                 {"min_success", c.min_success}, {"loss_tolerance", c.loss_tolerance}, {"seed", c.seed}}};
  const auto act = Activation::clipped_relu(1.0);
  const Rng root(c.seed);
  for (unsigned k : c.k_list) {
    const std::size_t q = q_threshold(k, c.delta);
    const auto win = WindowScheme::boolean(c.n, k);
    struct Row {
      unsigned jstar = 0;
      bool success = false, ok = true;
      double loss = 0, acc = 0, norm = 0;
    };
    std::vector<Row> rows(c.trials);
    parallel_for(c.trials, [&](std::size_t t) {
      Rng rng = root.split(k).split(t);
      const auto f = random_kpattern(rng, c.n, k);
      auto p = init_cnn_theorem(rng, q, k, win.positions());
      Row& row = rows[t];
      row.jstar = f.jstar;
      try {
        const auto planted = construct_ustar(p.kernel, p.bias, f, win.positions());
        p.readout = planted.readout;
        const auto lg = evaluate_exact(p, win, act, CubeSource(f), false);
        row.success = true;
        row.loss = lg.loss;
        row.acc = lg.accuracy;
        row.norm = planted.norm;
        row.ok = lg.loss <= c.loss_tolerance && lg.accuracy == 1.0 && planted.norm <= ustar_norm_bound(k, (double)q);
      } catch (const InsufficientCoverage&) {
        row.success = false;
      }
    });
    std::size_t successes = 0;
    for (std::size_t t = 0; t < c.trials; ++t) {
      const auto& row = rows[t];
      successes += row.success;
      r.pass = r.pass && row.ok;
      r.table.add_row({detail::u(k), detail::u(t), detail::u(q), detail::u(row.jstar), detail::b(row.success),
                       row.success ? detail::fp(row.loss) : "", row.success ? detail::fp(row.acc) : "",
                       row.success ? detail::fp(row.norm) : "", detail::fp(ustar_norm_bound(k, (double)q)),
                       detail::b(row.ok)});
    }
    r.pass = r.pass && successes >= c.min_success;
    r.summary += (r.summary.empty() ? "" : "; ") + std::string("k=") + std::to_string(k) + " q=" + std::to_string(q) +
                 " successes=" + std::to_string(successes) + "/" + std::to_string(c.trials);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Fully-connected hardness at permutation-invariant initializations.

struct HardnessCase {
  unsigned n, k;
  std::size_t q;
};

struct HardnessStudy {
  std::vector<HardnessCase> cases{{10, 5, 8}, {16, 8, 64}};
  std::size_t draws = 100;
  double sigmas = 3.0;
  std::uint64_t seed = 0;
};

/// Both shipped schemes: gaussian with variance 1/n and rademacher +-1/sqrt(n);
/// Tanh activation (c = 1); target chi_{1..k}.
inline StudyResult study_hardness(const HardnessStudy& c) {
  StudyResult r{"hardness",
                true,
                "",
                CsvTable({"n", "k", "q", "init", "first_layer_bound", "first_layer_mean", "first_layer_se",
                          "readout_bound", "readout_mean", "readout_se", "draws", "ok"}),
                {{"draws", c.draws}, {"sigmas", c.sigmas}, {"seed", c.seed}, {"activation", "tanh"}}};
  for (const auto& hc : c.cases) {
    r.meta["cases"].push_back({{"n", hc.n}, {"k", hc.k}, {"q", hc.q}});
    for (const auto& init : {FcnInit::gaussian(1.0 / hc.n), FcnInit::rademacher(1.0 / std::sqrt((double)hc.n))}) {
      const auto row = hardness_decay_sweep(hc.n, hc.q, Activation::tanh(), {hc.k}, c.draws, c.seed, init).front();
      const bool ok = row.within(c.sigmas);
      r.pass = r.pass && ok;
      r.table.add_row({detail::u(hc.n), detail::u(hc.k), detail::u(hc.q), init.name(), detail::fp(row.bounds.first_layer),
                       detail::fp(row.measured.first.mean), detail::fp(row.measured.first.std_error),
                       detail::fp(row.bounds.readout), detail::fp(row.measured.readout.mean),
                       detail::fp(row.measured.readout.std_error), detail::u(row.measured.first.draws), detail::b(ok)});
      r.summary += (r.summary.empty() ? "" : "; ") + std::string("(") + std::to_string(hc.n) + "," + std::to_string(hc.k) + "," + std::to_string(hc.q) + ") " +
                   init.name() + " W " + display(row.measured.first.mean) + "<=" + display(row.bounds.first_layer) +
                   " u " + display(row.measured.readout.mean) + "<=" + display(row.bounds.readout);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// CNN readout gradient at the theorem init for a parity pattern.

struct CnnSignalStudy {
  unsigned n = 12;
  std::vector<unsigned> k_list{1, 2, 3, 4};
  std::size_t q = 64;
  std::size_t trials = 10;
  double tolerance = 1e-10;
  std::uint64_t seed = 0;
};

inline StudyResult study_cnn_signal(const CnnSignalStudy& c) {
  StudyResult r{"cnn_signal", true, "",
                CsvTable({"k", "trial", "jstar", "measured", "expected", "abs_error", "disjoint_max", "ok"}),
                {{"n", c.n}, {"k_list", c.k_list}, {"q", c.q}, {"trials", c.trials}, {"tolerance", c.tolerance},
                 {"seed", c.seed}}};
  const auto act = Activation::clipped_relu(1.0);
  const Rng root(c.seed);
  double worst = 0.0;
  for (unsigned k : c.k_list) {
    const auto win = WindowScheme::boolean(c.n, k);
    for (std::size_t t = 0; t < c.trials; ++t) {
      Rng rng = root.split(k).split(t);
      const unsigned jstar = 1 + static_cast<unsigned>(rng.below(c.n - k + 1));
      const auto f = parity_pattern(c.n, jstar, k);
      const auto p = init_cnn_theorem(rng, c.q, k, win.positions());
      const auto g = evaluate_exact(p, win, act, CubeSource(f)).grad;
      const double measured = g.readout.row(jstar - 1).squaredNorm();
      const double expected = static_cast<double>(c.q) / std::pow(k * std::ldexp(1.0, (int)k), 2);
      double disjoint = 0.0;
      for (std::size_t j = 1; j <= win.positions(); ++j)
        if (j + k <= jstar || j >= jstar + k)
          disjoint = std::max(disjoint, g.readout.row((Eigen::Index)j - 1).cwiseAbs().maxCoeff());
      const double err = std::fabs(measured - expected);
      const bool ok = err <= c.tolerance && disjoint <= c.tolerance;
      worst = std::max({worst, err, disjoint});
      r.pass = r.pass && ok;
      r.table.add_row({detail::u(k), detail::u(t), detail::u(jstar), detail::fp(measured), detail::fp(expected),
                       detail::fp(err), detail::fp(disjoint), detail::b(ok)});
    }
  }
  r.summary = "max deviation " + display(worst);
  return r;
}

// ---------------------------------------------------------------------------
// Permutation identity on random FCNs.

struct PermIdentityStudy {
  unsigned n = 10;
  std::size_t trials = 100;
  std::size_t q = 8;
  double tolerance = 1e-10;
  std::uint64_t seed = 0;
};

inline StudyResult study_perm_identity(const PermIdentityStudy& c) {
  StudyResult r{"perm_identity", true, "", CsvTable({"trial", "subset", "j", "difference", "ok"}),
                {{"n", c.n}, {"trials", c.trials}, {"q", c.q}, {"tolerance", c.tolerance}, {"seed", c.seed},
                 {"activation", "tanh"}, {"init", "gaussian(1/n), bias N(0, 0.25), readout +-1/q"}}};
  const Rng root(c.seed);
  std::vector<BoundReport> reports(c.trials);
  std::vector<std::uint32_t> subsets(c.trials);
  std::vector<unsigned> js(c.trials);
  parallel_for(c.trials, [&](std::size_t t) {
    Rng rng = root.split(t);
    auto p = init_fcn_perm_invariant(rng, c.q, c.n, FcnInit::gaussian(1.0 / c.n), 1.0);
    for (Eigen::Index i = 0; i < p.bias.size(); ++i) p.bias[i] = 0.5 * rng.normal();
    subsets[t] = 1 + static_cast<std::uint32_t>(rng.below((std::uint64_t{1} << c.n) - 1));
    js[t] = 1 + static_cast<unsigned>(rng.below(c.n));
    const auto pi = random_permutation_fixing(rng, c.n, js[t]);
    reports[t] = verify_permutation_identity(p, Activation::tanh(), subsets[t], js[t], pi, c.tolerance);
  });
  double worst = 0.0;
  for (std::size_t t = 0; t < c.trials; ++t) {
    const bool ok = reports[t].pass();
    r.pass = r.pass && ok;
    worst = std::max(worst, *reports[t].measured);
    r.table.add_row({detail::u(t), detail::u(subsets[t]), detail::u(js[t]), detail::fp(*reports[t].measured),
                     detail::b(ok)});
  }
  r.summary = "max |difference| " + display(worst);
  return r;
}

// ---------------------------------------------------------------------------
// Walsh-Hadamard transform: Parseval and round trip.

struct ParsevalStudy {
  unsigned n = 12;
  std::size_t trials = 100;
  double tolerance = 1e-9;
  std::uint64_t seed = 0;
};

inline StudyResult study_parseval(const ParsevalStudy& c) {
  StudyResult r{"parseval", true, "", CsvTable({"trial", "parseval_error", "roundtrip_error", "ok"}),
                {{"n", c.n}, {"trials", c.trials}, {"tolerance", c.tolerance}, {"seed", c.seed}}};
  if (c.n > kMaxExactDim) throw CapacityError("parseval: n <= 24");
  const Rng root(c.seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < c.trials; ++t) {
    Rng rng = root.split(t);
    std::vector<double> table(std::size_t{1} << c.n);
    for (auto& v : table) v = 2.0 * rng.uniform() - 1.0;
    const auto spec = wht(table);
    const double pe = std::fabs(spec.sum_of_squares() - squared_norm_uniform(table));
    std::vector<double> back = spec.coeff;
    wht_inplace(back);
    double re = 0.0;
    for (std::size_t m = 0; m < table.size(); ++m) re = std::max(re, std::fabs(back[m] - table[m]));
    const bool ok = pe <= c.tolerance && re <= c.tolerance;
    worst = std::max({worst, pe, re});
    r.pass = r.pass && ok;
    r.table.add_row({detail::u(t), detail::fp(pe), detail::fp(re), detail::b(ok)});
  }
  r.summary = "max error " + display(worst);
  return r;
}

// ---------------------------------------------------------------------------
// Drift of the readout and first layer along theorem-mode CNN training.

struct DriftStudy {
  unsigned n = 12, k = 3;
  std::size_t q = 128, steps = 500, runs = 10;
  double eta = 0.5;
  double c = 1.0;  // clipped ReLU cap
  std::uint64_t seed = 0;
};

inline StudyResult study_drift(const DriftStudy& d) {
  StudyResult r{"drift",
                true,
                "",
                CsvTable({"run", "step", "kind", "measured", "bound", "ok"}),
                {{"n", d.n}, {"k", d.k}, {"q", d.q}, {"steps", d.steps}, {"runs", d.runs}, {"eta", d.eta},
                 {"c", d.c}, {"seed", d.seed}, {"activation", "clipped_relu"}, {"bias", "frozen"}}};
  const auto act = Activation::clipped_relu(d.c);
  const auto win = WindowScheme::boolean(d.n, d.k);
  const Rng root(d.seed);
  struct Run {
    Trajectory traj;
    double loss_diff = 0.0, loss_bound = 0.0;
    bool planted = false;
  };
  std::vector<Run> runs(d.runs);
  parallel_for(d.runs, [&](std::size_t i) {
    Rng rng = root.split(i);
    const auto f = random_kpattern(rng, d.n, d.k);
    const auto p0 = init_cnn_theorem(rng, d.q, d.k, win.positions());
    TrainConfig tc;
    tc.steps = d.steps;
    tc.eta = d.eta;
    tc.theorem_mode = true;
    tc.record_stride = 1;
    tc.seed = i;
    auto res = train(p0, win, act, Objective{CubeSource(f)}, tc, rng);
    runs[i].traj = std::move(res.trajectory);
    try {
      const auto planted = construct_ustar(p0.kernel, p0.bias, f, win.positions());
      CnnParams a = p0, b = res.params;
      a.readout = planted.readout;
      b.readout = planted.readout;
      const CubeSource cube(f);
      runs[i].loss_diff = std::fabs(evaluate_exact(b, win, act, cube, false).loss -
                                    evaluate_exact(a, win, act, cube, false).loss);
      runs[i].loss_bound =
          loss_diff_bound((double)d.steps, d.eta, (double)d.q, d.n, d.k, d.c, readout_norms(a));
      runs[i].planted = true;
    } catch (const InsufficientCoverage&) {
      runs[i].planted = false;
    }
  });
  std::size_t violations = 0;
  for (std::size_t i = 0; i < d.runs; ++i) {
    for (const auto& rec : runs[i].traj.records) {
      const auto bnd = drift_bounds((double)rec.step, d.eta, (double)d.q, d.n, d.k, d.c);
      double umax = 0.0;
      for (double v : rec.readout_norms) umax = std::max(umax, v);
      const bool ok_u = umax <= bnd.readout, ok_w = rec.first_layer_drift <= bnd.first_layer;
      violations += !ok_u + !ok_w;
      r.table.add_row({detail::u(i), detail::u(rec.step), "readout", detail::fp(umax), detail::fp(bnd.readout),
                       detail::b(ok_u)});
      r.table.add_row({detail::u(i), detail::u(rec.step), "first_layer", detail::fp(rec.first_layer_drift),
                       detail::fp(bnd.first_layer), detail::b(ok_w)});
    }
    const bool ok_l = runs[i].planted && runs[i].loss_diff <= runs[i].loss_bound;
    violations += !ok_l;
    r.table.add_row({detail::u(i), detail::u(d.steps), "loss_diff", runs[i].planted ? detail::fp(runs[i].loss_diff) : "",
                     detail::fp(runs[i].loss_bound), detail::b(ok_l)});
  }
  r.pass = violations == 0;
  r.summary = std::to_string(violations) + " violations over " + std::to_string(d.runs) + " runs";
  return r;
}

// ---------------------------------------------------------------------------
// OGD regret with the first layer frozen (the convex phase).

struct OgdStudy {
  unsigned n = 12, k = 3;
  std::size_t q = 128, steps = 500, runs = 10;
  double eta = 0.5;
  std::uint64_t seed = 0;
};

inline StudyResult study_ogd(const OgdStudy& o) {
  StudyResult r{"ogd",
                true,
                "",
                CsvTable({"run", "worst_prefix", "lhs", "rhs", "comparator_norm", "ok"}),
                {{"n", o.n}, {"k", o.k}, {"q", o.q}, {"steps", o.steps}, {"runs", o.runs}, {"eta", o.eta},
                 {"seed", o.seed}, {"frozen", "first layer and bias"}, {"comparator", "planted readout"}}};
  const auto act = Activation::clipped_relu(1.0);
  const auto win = WindowScheme::boolean(o.n, o.k);
  const Rng root(o.seed);
  std::vector<BoundReport> reports(o.runs);
  std::vector<double> norms(o.runs);
  std::vector<bool> planted(o.runs, true);
  parallel_for(o.runs, [&](std::size_t i) {
    Rng rng = root.split(i);
    const auto f = random_kpattern(rng, o.n, o.k);
    const auto p0 = init_cnn_theorem(rng, o.q, o.k, win.positions());
    Matrix ustar;
    try {
      ustar = construct_ustar(p0.kernel, p0.bias, f, win.positions()).readout;
    } catch (const InsufficientCoverage&) {
      planted[i] = false;
      return;
    }
    const CubeSource cube(f);
    TrainConfig tc;
    tc.steps = o.steps;
    tc.eta = o.eta;
    tc.theorem_mode = true;
    tc.frozen.first = true;
    tc.record_stride = 1;
    tc.seed = i;
    const std::function<double(const CnnParams&)> comparator = [&](const CnnParams& p) {
      CnnParams s = p;
      s.readout = ustar;
      return evaluate_exact(s, win, act, cube, false).loss;
    };
    const auto res = train(p0, win, act, Objective{cube}, tc, rng, comparator);
    norms[i] = ustar.norm();
    reports[i] = verify_ogd_regret(ogd_trace_from(res.trajectory, p0.readout.norm(), norms[i]));
  });
  for (std::size_t i = 0; i < o.runs; ++i) {
    const bool ok = planted[i] && reports[i].pass();
    r.pass = r.pass && ok;
    if (!planted[i]) {
      r.table.add_row({detail::u(i), "", "", "", "", "false"});
      continue;
    }
    r.table.add_row({detail::u(i), detail::fp(reports[i].inputs[2].second), detail::fp(*reports[i].measured),
                     detail::fp(reports[i].theoretical), detail::fp(norms[i]), detail::b(ok)});
  }
  r.summary = r.pass ? "regret inequality holds at every prefix" : "regret inequality violated";
  return r;
}

// ---------------------------------------------------------------------------
// Analytic gradients against central finite differences.

struct GradCheckStudy {
  std::size_t configs = 50;  // per architecture
  double tolerance = 1e-6;
  double fd_step = 1e-5;
  double kink_margin = 1e-3;  // redraw data whose margins sit this close to the hinge kink
  std::uint64_t seed = 0;
};

namespace detail {

template <ModelParams P>
double relative_grad_error(const P& p, const WindowScheme& s, const Activation& act, const Batch& batch,
                           double step) {
  const Vector analytic = flatten(loss_grad(p, s, act, batch).grad);
  const auto fn = [&](const Vector& theta) {
    P q = p;
    unflatten(theta, q);
    return loss_grad(q, s, act, batch, false).loss;
  };
  const Vector numeric = finite_diff_grad(fn, flatten(p), step);
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-300});
  return (analytic - numeric).norm() / scale;
}

inline void fill_normal(Rng& rng, double* data, Eigen::Index count, double sd) {
  for (Eigen::Index i = 0; i < count; ++i) data[i] = sd * rng.normal();
}

}  // namespace detail

inline StudyResult study_gradcheck(const GradCheckStudy& c) {
  StudyResult r{"gradcheck", true, "",
                CsvTable({"arch", "config", "input_length", "width", "stride", "q", "redraws", "relative_error", "ok"}),
                {{"configs", c.configs}, {"tolerance", c.tolerance}, {"fd_step", c.fd_step},
                 {"kink_margin", c.kink_margin}, {"seed", c.seed}, {"activation", "tanh"}}};
  const auto act = Activation::tanh();
  const Rng root(c.seed);
  double worst = 0.0;
  for (Arch arch : {Arch::Cnn, Arch::Lcn, Arch::Fcn}) {
    struct Row {
      WindowScheme s;
      std::size_t q = 0, redraws = 0;
      double err = 0.0;
    };
    std::vector<Row> rows(c.configs);
    parallel_for(c.configs, [&](std::size_t i) {
      Rng rng = root.split(static_cast<std::uint64_t>(arch)).split(i);
      const std::size_t N = 3 + rng.below(6);
      const std::size_t w = arch == Arch::Fcn ? N : 1 + rng.below(std::min<std::size_t>(4, N));
      const std::size_t stride = arch == Arch::Fcn ? 1 : 1 + rng.below(2);
      const WindowScheme s{N, w, stride};
      const std::size_t q = 1 + rng.below(5);
      Rng init = rng.split(1);
      Params params = init_standard(arch, init, q, s);
      std::visit(
          [&](auto& p) {
            for (auto& blk : p.blocks()) detail::fill_normal(init, blk.values.data(), (Eigen::Index)blk.values.size(), 0.8);
          },
          params);
      const std::size_t m = 24;
      Batch batch{Matrix(m, N), Vector(m), Vector::Constant(m, 1.0 / m)};
      std::size_t redraws = 0;
      for (;; ++redraws) {
        Rng data = rng.split(100 + redraws);
        detail::fill_normal(data, batch.inputs.data(), batch.inputs.size(), 1.0);
        for (std::size_t e = 0; e < m; ++e) batch.labels[(Eigen::Index)e] = data.sign();
        const Vector h = std::visit([&](const auto& p) { return predict(p, s, act, batch.inputs); }, params);
        if (((1.0 - batch.labels.cwiseProduct(h).array()).abs() > c.kink_margin).all()) break;
      }
      rows[i] = {s, q, redraws,
                 std::visit([&](const auto& p) { return detail::relative_grad_error(p, s, act, batch, c.fd_step); },
                            params)};
    });
    for (std::size_t i = 0; i < c.configs; ++i) {
      const auto& row = rows[i];
      const bool ok = row.err <= c.tolerance;
      worst = std::max(worst, row.err);
      r.pass = r.pass && ok;
      r.table.add_row({arch_name(arch), detail::u(i), detail::u(row.s.input_length), detail::u(row.s.width),
                       detail::u(row.s.stride), detail::u(row.q), detail::u(row.redraws), detail::fp(row.err),
                       detail::b(ok)});
    }
  }
  r.summary = "max relative error " + display(worst);
  return r;
}

// ---------------------------------------------------------------------------
// Trainability separation: verdict over a boolean separation run.

struct SeparationVerdict {
  double cnn_lcn_accuracy = 0.99;
  std::size_t min_cnn_lcn_seeds = 9;
  std::size_t min_fcn_lower_seeds = 8;
};

inline StudyResult study_separation(const SeparationConfig& cfg, const SeparationVerdict& v = {}) {
  const auto res = run_boolean_separation(cfg);
  StudyResult r{"separation", false, "", res.summary(), res.meta};
  r.meta["verdict"] = {{"cnn_lcn_accuracy", v.cnn_lcn_accuracy},
                       {"min_cnn_lcn_seeds", v.min_cnn_lcn_seeds},
                       {"min_fcn_lower_seeds", v.min_fcn_lower_seeds}};
  std::size_t cnn_ok = 0, lcn_ok = 0, fcn_lower = 0, planted_ok = 0;
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    const double a_c = res.cell(s, "cnn").final_accuracy();
    const double a_l = res.cell(s, "lcn").final_accuracy();
    const double a_f = res.cell(s, "fcn").final_accuracy();
    cnn_ok += a_c >= v.cnn_lcn_accuracy;
    lcn_ok += a_l >= v.cnn_lcn_accuracy;
    fcn_lower += a_f < std::min(a_c, a_l);
    if (cfg.planted_arm) planted_ok += res.cell(s, "cnn-planted").trajectory.records.front().accuracy == 1.0;
  }
  r.pass = cnn_ok >= v.min_cnn_lcn_seeds && lcn_ok >= v.min_cnn_lcn_seeds && fcn_lower >= v.min_fcn_lower_seeds;
  r.summary = "cnn>=" + display(v.cnn_lcn_accuracy) + " on " + std::to_string(cnn_ok) + "/" + std::to_string(cfg.seeds) +
              ", lcn on " + std::to_string(lcn_ok) + "/" + std::to_string(cfg.seeds) + ", fcn strictly lower on " +
              std::to_string(fcn_lower) + "/" + std::to_string(cfg.seeds);
  if (cfg.planted_arm) r.summary += ", planted arm exact on " + std::to_string(planted_ok) + "/" + std::to_string(cfg.seeds);
  r.extras.emplace_back("curves", res.curves());
  return r;
}

}  // namespace kpat
