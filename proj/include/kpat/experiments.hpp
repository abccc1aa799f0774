#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "kpat/io.hpp"
#include "kpat/mnist.hpp"
#include "kpat/models.hpp"
#include "kpat/probes.hpp"
#include "kpat/problems.hpp"
#include "kpat/theory.hpp"
#include "kpat/training.hpp"

namespace kpat {

inline constexpr const char* kVersion = "0.1.0";

/// Order-sensitive 64-bit digest of a batch (inputs, labels).
inline std::uint64_t stream_hash(const Batch& b, std::uint64_t h = 0x9e3779b97f4a7c15ULL) {
  auto feed = [&h](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = mix64(h ^ bits) + 0x632be59bd9b4e019ULL;
  };
  for (Eigen::Index i = 0; i < b.inputs.size(); ++i) feed(b.inputs.data()[i]);
  for (Eigen::Index i = 0; i < b.labels.size(); ++i) feed(b.labels[i]);
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Boolean separation: CNN / LCN / FCN on random k-patterns, exact population GD.

struct SeparationConfig {
  unsigned n = 12;
  unsigned k = 3;
  std::size_t q = 128;
  std::size_t steps = 2000;
  std::size_t seeds = 10;
  std::size_t record_stride = 100;
  double eta = 0.5;
  Activation activation = Activation::clipped_relu(1.0);
  bool theorem_mode = true;  // CNN/LCN: theorem init with frozen bias
  FcnInit fcn_init = FcnInit::gaussian(-1.0);  // variance <= 0 means 1/n
  bool planted_arm = true;
  std::uint64_t seed = 0;

  FcnInit resolved_fcn_init() const {
    if (fcn_init.kind == FcnInit::Kind::Gaussian && fcn_init.parameter <= 0.0) return FcnInit::gaussian(1.0 / n);
    return fcn_init;
  }

  nlohmann::json to_json() const {
    const auto fi = resolved_fcn_init();
    return {{"n", n}, {"k", k}, {"q", q}, {"steps", steps}, {"seeds", seeds}, {"record_stride", record_stride},
            {"eta", eta}, {"activation", activation.name()}, {"c", activation.cap},
            {"theorem_mode", theorem_mode}, {"fcn_init", fi.name()}, {"fcn_init_parameter", fi.parameter},
            {"planted_arm", planted_arm}, {"seed", seed}};
  }
};

struct SeparationCell {
  std::size_t seed = 0;
  std::string arm;  // cnn, lcn, fcn, cnn-planted
  unsigned jstar = 1;
  Trajectory trajectory;

  double final_accuracy() const { return trajectory.records.back().accuracy; }
  double final_loss() const { return trajectory.records.back().loss; }
};

struct SeparationResult {
  nlohmann::json meta;
  std::vector<SeparationCell> cells;  // ordered by seed, then arm

  const SeparationCell& cell(std::size_t seed, const std::string& arm) const {
    for (const auto& c : cells)
      if (c.seed == seed && c.arm == arm) return c;
    throw ValidationError("no cell for seed " + std::to_string(seed) + " arm " + arm);
  }

  CsvTable curves() const {
    CsvTable t({"seed", "arch", "step", "loss", "accuracy"});
    for (const auto& c : cells)
      for (const auto& r : c.trajectory.records)
        t.add_row({std::to_string(c.seed), c.arm, std::to_string(r.step), full_precision(r.loss),
                   full_precision(r.accuracy)});
    return t;
  }

  CsvTable summary() const {
    CsvTable t({"seed", "arch", "jstar", "final_step", "final_loss", "final_accuracy"});
    for (const auto& c : cells)
      t.add_row({std::to_string(c.seed), c.arm, std::to_string(c.jstar),
                 std::to_string(c.trajectory.records.back().step), full_precision(c.final_loss()),
                 full_precision(c.final_accuracy())});
    return t;
  }
};

/// Seed s draws its target from Rng(cfg.seed).split(s).split(0) and arm a its
/// initialization from .split(1 + a); every arm trains on the same target
/// with the same step budget and learning rate.
inline SeparationResult run_boolean_separation(const SeparationConfig& cfg) {
  if (cfg.seeds < 1) throw ValidationError("separation: need at least one seed");
  if (cfg.theorem_mode) cfg.activation.require_theory_safe("separation (theorem mode)");
  std::vector<std::string> arms{"cnn", "lcn", "fcn"};
  if (cfg.planted_arm) arms.push_back("cnn-planted");

  const Rng root(cfg.seed);
  std::vector<KPattern> targets;
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    Rng r = root.split(s).split(0);
    targets.push_back(random_kpattern(r, cfg.n, cfg.k));
  }

  SeparationResult out;
  out.meta = {{"study", "boolean-separation"}, {"version", kVersion}, {"config", cfg.to_json()}};
  out.cells.resize(cfg.seeds * arms.size());
  parallel_for(out.cells.size(), [&](std::size_t idx) {
    const std::size_t s = idx / arms.size(), a = idx % arms.size();
    const auto& f = targets[s];
    Rng init = root.split(s).split(1 + a);
    Rng stream = root.split(s).split(100 + a);
    const CubeSource cube(f);
    TrainConfig tc;
    tc.steps = cfg.steps;
    tc.eta = cfg.eta;
    tc.record_stride = cfg.record_stride;
    tc.seed = s;
    const auto win = WindowScheme::boolean(cfg.n, cfg.k);
    const auto& arm = arms[a];
    Trajectory traj;
    if (arm == "cnn" || arm == "cnn-planted") {
      tc.theorem_mode = cfg.theorem_mode;
      auto p = init_cnn_theorem(init, cfg.q, cfg.k, win.positions());
      if (arm == "cnn-planted") {
        try {
          p.readout = construct_ustar(p.kernel, p.bias, f, win.positions()).readout;
        } catch (const InsufficientCoverage&) {
          // Planted arm left at zero readout; recorded as such in the curve.
        }
        tc.steps = 1;
        tc.eta = 0.0;
      }
      traj = train(p, win, cfg.activation, Objective{cube}, tc, stream).trajectory;
    } else if (arm == "lcn") {
      tc.theorem_mode = cfg.theorem_mode;
      traj = train(init_lcn_theorem(init, cfg.q, cfg.k, win.positions()), win, cfg.activation, Objective{cube}, tc,
                   stream)
                 .trajectory;
    } else {
      const WindowScheme full{cfg.n, cfg.n, 1};
      auto p = init_fcn_perm_invariant(init, cfg.q, cfg.n, cfg.resolved_fcn_init(), cfg.activation.bound());
      traj = train(p, full, cfg.activation, Objective{cube}, tc, stream).trajectory;
    }
    out.cells[idx] = {s, arm, f.jstar, std::move(traj)};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Hardness decay: FCN gradient norms at init against the closed-form bounds.

struct HardnessConfig {
  unsigned n = 10;
  std::size_t q = 8;
  std::vector<unsigned> k_list{1, 2, 3, 4, 5};
  std::size_t draws = 100;
  Activation activation = Activation::tanh();
  FcnInit init = FcnInit::gaussian(-1.0);  // variance <= 0 means 1/n
  std::uint64_t seed = 0;

  FcnInit resolved_init() const {
    if (init.kind == FcnInit::Kind::Gaussian && init.parameter <= 0.0) return FcnInit::gaussian(1.0 / n);
    return init;
  }
  nlohmann::json to_json() const {
    const auto fi = resolved_init();
    return {{"n", n}, {"q", q}, {"k_list", k_list}, {"draws", draws}, {"activation", activation.name()},
            {"c", activation.cap}, {"init", fi.name()}, {"init_parameter", fi.parameter}, {"seed", seed}};
  }
};

struct HardnessResult {
  nlohmann::json meta;
  std::vector<DecayRow> rows;
};

inline HardnessResult run_hardness_decay(const HardnessConfig& cfg) {
  return {{{"study", "hardness-decay"}, {"version", kVersion}, {"config", cfg.to_json()}},
          hardness_decay_sweep(cfg.n, cfg.q, cfg.activation, cfg.k_list, cfg.draws, cfg.seed, cfg.resolved_init())};
}

// ---------------------------------------------------------------------------
// MNIST sequences: one hidden layer, AdaDelta on minibatches of fresh
// sequences each epoch, test accuracy on a fixed test set of sequences.

struct MnistConfig {
  std::vector<std::size_t> n_list{13};
  SequenceRule rule = SequenceRule::CentralParity;
  std::size_t epochs = 10;
  std::size_t per_epoch = 10000;
  std::size_t test_count = 2000;
  std::size_t q = 1024;
  std::size_t minibatch = 64;
  double rho = 0.95;
  double adadelta_eps = 1e-6;
  std::size_t window_cols = 24;
  std::size_t stride_cols = 8;
  std::vector<Arch> archs{Arch::Fcn, Arch::Cnn, Arch::Lcn};
  std::size_t seeds = 3;
  std::uint64_t seed = 0;
  Activation activation = Activation::relu();
  std::filesystem::path data_dir = mnist_cache_dir();

  nlohmann::json to_json() const {
    std::vector<std::string> an;
    for (auto a : archs) an.push_back(arch_name(a));
    return {{"n_list", n_list}, {"rule", rule_name(rule)}, {"epochs", epochs}, {"per_epoch", per_epoch},
            {"test_count", test_count}, {"q", q}, {"minibatch", minibatch}, {"optimizer", "adadelta"},
            {"rho", rho}, {"adadelta_eps", adadelta_eps}, {"window_cols", window_cols},
            {"stride_cols", stride_cols}, {"archs", an}, {"seeds", seeds}, {"seed", seed},
            {"activation", activation.name()}, {"loss", "hinge"},
            {"init", "uniform(+-1/sqrt(fan_in)) weights, zero biases"}};
  }
};

struct MnistPoint {
  std::size_t seed = 0;
  std::size_t n = 0;
  Arch arch = Arch::Fcn;
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean minibatch loss during the epoch (NaN at epoch 0)
  double test_accuracy = 0.0;
};

struct MnistResult {
  nlohmann::json meta;
  std::vector<MnistPoint> points;

  CsvTable table() const {
    CsvTable t({"seed", "n", "arch", "epoch", "train_loss", "test_accuracy"});
    for (const auto& p : points)
      t.add_row({std::to_string(p.seed), std::to_string(p.n), arch_name(p.arch), std::to_string(p.epoch),
                 std::isnan(p.train_loss) ? "" : full_precision(p.train_loss), full_precision(p.test_accuracy)});
    return t;
  }

  double final_accuracy(std::size_t seed, std::size_t n, Arch arch) const {
    std::optional<double> v;
    for (const auto& p : points)
      if (p.seed == seed && p.n == n && p.arch == arch) v = p.test_accuracy;
    if (!v) throw ValidationError("no MNIST result for that cell");
    return *v;
  }
};

namespace detail {

template <ModelParams P>
double train_epoch(P& params, AdaDelta<P>& opt, const WindowScheme& s, const Activation& act, const Batch& data,
                   std::size_t minibatch) {
  const auto rows = data.inputs.rows();
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (Eigen::Index begin = 0; begin < rows; begin += (Eigen::Index)minibatch) {
    const auto m = std::min<Eigen::Index>((Eigen::Index)minibatch, rows - begin);
    Batch b{data.inputs.middleRows(begin, m), data.labels.segment(begin, m),
            Vector::Constant(m, 1.0 / static_cast<double>(m))};
    auto lg = loss_grad(params, s, act, b);
    if (!std::isfinite(lg.loss) || lg.loss > kDivergenceThreshold) throw DivergenceError("MNIST training diverged");
    opt.apply(params, lg.grad);
    loss_sum += lg.loss;
    ++batches;
  }
  return loss_sum / static_cast<double>(batches);
}

}  // namespace detail

/// Seed s: test set from Rng(seed).split(s).split(n).split(0), epoch e data
/// from .split(e) for e >= 1, architecture a initialized from .split(1000 + a).
inline MnistResult run_mnist_sequences(const MnistConfig& cfg, const MnistData& data) {
  if (cfg.epochs < 1 || cfg.per_epoch < 1 || cfg.test_count < 1 || cfg.minibatch < 1 || cfg.seeds < 1)
    throw ValidationError("MNIST config: epochs, per_epoch, test_count, minibatch and seeds must be >= 1");
  if (cfg.window_cols < 1 || cfg.stride_cols < 1)
    throw ValidationError("MNIST config: window and stride must be >= 1 column");
  validate_adadelta(cfg.rho, cfg.adadelta_eps);

  MnistResult out;
  out.meta = {{"study", "mnist-sequences"}, {"version", kVersion}, {"config", cfg.to_json()},
              {"train_digits", data.train.size()}, {"test_digits", data.test.size()},
              {"stream_hashes", nlohmann::json::array()}};
  const Rng root(cfg.seed);
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    for (std::size_t n : cfg.n_list) {
      const Rng cell = root.split(s).split(n);
      Rng test_rng = cell.split(0);
      const SampleSource test(sequences_to_batch(build_sequences(data.test, n, cfg.rule, cfg.test_count, test_rng)));
      const auto win = sequence_scheme(n, cfg.window_cols, cfg.stride_cols);
      const WindowScheme full{win.input_length, win.input_length, 1};

      std::vector<Params> models;
      for (std::size_t a = 0; a < cfg.archs.size(); ++a) {
        Rng init = cell.split(1000 + a);
        models.push_back(init_standard(cfg.archs[a], init, cfg.q, cfg.archs[a] == Arch::Fcn ? full : win));
      }
      auto scheme_of = [&](Arch a) { return a == Arch::Fcn ? full : win; };
      std::vector<std::optional<AdaDelta<CnnParams>>> ad_c(cfg.archs.size());
      std::vector<std::optional<AdaDelta<LcnParams>>> ad_l(cfg.archs.size());
      std::vector<std::optional<AdaDelta<FcnParams>>> ad_f(cfg.archs.size());
      for (std::size_t a = 0; a < cfg.archs.size(); ++a)
        std::visit(
            [&](auto& p) {
              using P = std::decay_t<decltype(p)>;
              if constexpr (std::is_same_v<P, CnnParams>) ad_c[a].emplace(p, cfg.rho, cfg.adadelta_eps);
              if constexpr (std::is_same_v<P, LcnParams>) ad_l[a].emplace(p, cfg.rho, cfg.adadelta_eps);
              if constexpr (std::is_same_v<P, FcnParams>) ad_f[a].emplace(p, cfg.rho, cfg.adadelta_eps);
            },
            models[a]);

      auto test_accuracy = [&](std::size_t a) {
        return std::visit(
            [&](const auto& p) { return evaluate(p, scheme_of(cfg.archs[a]), cfg.activation, test, false).accuracy; },
            models[a]);
      };
      for (std::size_t a = 0; a < cfg.archs.size(); ++a)
        out.points.push_back({s, n, cfg.archs[a], 0, std::nan(""), test_accuracy(a)});

      for (std::size_t e = 1; e <= cfg.epochs; ++e) {
        Rng data_rng = cell.split(e);
        const Batch epoch_data = sequences_to_batch(build_sequences(data.train, n, cfg.rule, cfg.per_epoch, data_rng));
        std::vector<std::uint64_t> seen(cfg.archs.size());
        std::vector<double> losses(cfg.archs.size());
        parallel_for(cfg.archs.size(), [&](std::size_t a) {
          seen[a] = stream_hash(epoch_data);
          const auto sch = scheme_of(cfg.archs[a]);
          losses[a] = std::visit(
              [&](auto& p) {
                using P = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<P, CnnParams>)
                  return detail::train_epoch(p, *ad_c[a], sch, cfg.activation, epoch_data, cfg.minibatch);
                else if constexpr (std::is_same_v<P, LcnParams>)
                  return detail::train_epoch(p, *ad_l[a], sch, cfg.activation, epoch_data, cfg.minibatch);
                else
                  return detail::train_epoch(p, *ad_f[a], sch, cfg.activation, epoch_data, cfg.minibatch);
              },
              models[a]);
        });
        for (std::size_t a = 1; a < seen.size(); ++a)
          if (seen[a] != seen[0]) throw Error("architectures saw different example streams");
        out.meta["stream_hashes"].push_back({{"seed", s}, {"n", n}, {"epoch", e}, {"hash", hex64(seen[0])}});
        for (std::size_t a = 0; a < cfg.archs.size(); ++a)
          out.points.push_back({s, n, cfg.archs[a], e, losses[a], test_accuracy(a)});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG line chart from a CSV table.

struct SvgStyle {
  std::string title;
  std::string x_column;
  std::string y_column;
  std::vector<std::string> series_columns;  // rows grouped by these values
  int width = 640;
  int height = 400;
};

namespace detail {
inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}
inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}
inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else if (c == '"') o += "&quot;";
    else o += c;
  }
  return o;
}
inline double parse_number(const std::string& s, const std::string& column) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("column '" + column + "': not a number: '" + s + "'");
  }
}
}  // namespace detail

inline std::string emit_svg_lines(const std::string& csv, const SvgStyle& style) {
  const auto rows = parse_csv(csv);
  if (rows.empty()) throw ValidationError("emit_svg_lines: CSV has no header");
  const auto& header = rows.front();
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ValidationError("emit_svg_lines: no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t xc = column(style.x_column), yc = column(style.y_column);
  std::vector<std::size_t> sc;
  for (const auto& s : style.series_columns) sc.push_back(column(s));

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) throw ValidationError("emit_svg_lines: ragged row " + std::to_string(r));
    if (row[yc].empty()) continue;
    std::string key;
    for (auto c : sc) key += (key.empty() ? "" : " ") + row[c];
    if (!series.count(key)) order.push_back(key);
    series[key].emplace_back(detail::parse_number(row[xc], style.x_column),
                             detail::parse_number(row[yc], style.y_column));
  }

  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& [k, pts] : series)
    for (const auto& [x, y] : pts) {
      if (!any) x0 = x1 = x, y0 = y1 = y, any = true;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;

  const double L = 60, R = 150, T = 40, B = 50;
  const double W = style.width, H = style.height;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(style.width) + "\" height=\"" +
       std::to_string(style.height) + "\" viewBox=\"0 0 " + std::to_string(style.width) + " " +
       std::to_string(style.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + detail::fmt2(W / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
       detail::xml_escape(style.title) + "</text>\n";
  s += "<line x1=\"" + detail::fmt2(L) + "\" y1=\"" + detail::fmt2(H - B) + "\" x2=\"" + detail::fmt2(W - R) +
       "\" y2=\"" + detail::fmt2(H - B) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + detail::fmt2(L) + "\" y1=\"" + detail::fmt2(T) + "\" x2=\"" + detail::fmt2(L) + "\" y2=\"" +
       detail::fmt2(H - B) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    s += "<text x=\"" + detail::fmt2(px(xv)) + "\" y=\"" + detail::fmt2(H - B + 16) + "\" text-anchor=\"middle\">" +
         detail::tick_label(xv) + "</text>\n";
    s += "<text x=\"" + detail::fmt2(L - 6) + "\" y=\"" + detail::fmt2(py(yv) + 4) + "\" text-anchor=\"end\">" +
         detail::tick_label(yv) + "</text>\n";
  }
  s += "<text x=\"" + detail::fmt2((L + W - R) / 2) + "\" y=\"" + detail::fmt2(H - 12) +
       "\" text-anchor=\"middle\">" + detail::xml_escape(style.x_column) + "</text>\n";
  s += "<text x=\"16\" y=\"" + detail::fmt2((T + H - B) / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       detail::fmt2((T + H - B) / 2) + ")\">" + detail::xml_escape(style.y_column) + "</text>\n";

  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& pts = series[order[i]];
    const std::string color = palette[i % 10];
    if (pts.size() == 1) {
      s += "<circle cx=\"" + detail::fmt2(px(pts[0].first)) + "\" cy=\"" + detail::fmt2(py(pts[0].second)) +
           "\" r=\"3\" fill=\"" + color + "\"/>\n";
    } else {
      s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t p = 0; p < pts.size(); ++p)
        s += (p ? " " : "") + detail::fmt2(px(pts[p].first)) + "," + detail::fmt2(py(pts[p].second));
      s += "\"/>\n";
    }
    const double ly = T + 14.0 * static_cast<double>(i);
    s += "<rect x=\"" + detail::fmt2(W - R + 10) + "\" y=\"" + detail::fmt2(ly - 8) +
         "\" width=\"10\" height=\"10\" fill=\"" + color + "\"/>\n";
    s += "<text x=\"" + detail::fmt2(W - R + 24) + "\" y=\"" + detail::fmt2(ly + 1) + "\">" +
         detail::xml_escape(order[i].empty() ? style.y_column : order[i]) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

// ---------------------------------------------------------------------------
// TOML configs. Every key is optional; unknown keys are rejected.

namespace detail {

inline void reject_unknown(const toml::table& t, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, value] : t) {
    bool ok = false;
    for (const char* k : known) ok = ok || key.str() == k;
    if (!ok) throw ValidationError(where + ": unknown key '" + std::string(key.str()) + "'");
  }
}

template <class T>
void read_key(const toml::table& t, const char* key, T& out) {
  const auto* node = t.get(key);
  if (!node) return;
  if constexpr (std::is_same_v<T, std::string>) {
    if (auto v = node->value<std::string>()) out = *v;
    else throw ValidationError(std::string("config key '") + key + "' must be a string");
  } else if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node->value<bool>()) out = *v;
    else throw ValidationError(std::string("config key '") + key + "' must be a boolean");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (auto v = node->value<double>()) out = *v;
    else throw ValidationError(std::string("config key '") + key + "' must be a number");
  } else {
    auto v = node->value<std::int64_t>();
    if (!v || *v < 0) throw ValidationError(std::string("config key '") + key + "' must be a non-negative integer");
    out = static_cast<T>(*v);
  }
}

template <class T>
void read_list(const toml::table& t, const char* key, std::vector<T>& out) {
  const auto* node = t.get(key);
  if (!node) return;
  const auto* arr = node->as_array();
  if (!arr) throw ValidationError(std::string("config key '") + key + "' must be an array");
  out.clear();
  for (const auto& e : *arr) {
    auto v = e.value<std::int64_t>();
    if (!v || *v < 0) throw ValidationError(std::string("config key '") + key + "' must hold non-negative integers");
    out.push_back(static_cast<T>(*v));
  }
}

inline toml::table parse_toml(const std::string& text, const std::string& origin) {
  try {
    return toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    throw ValidationError("TOML " + origin + ": " + std::string(e.description()));
  }
}

inline FcnInit parse_fcn_init(const std::string& kind, double parameter) {
  if (kind == "gaussian") return FcnInit::gaussian(parameter);
  if (kind == "rademacher") {
    if (!(parameter > 0.0)) throw ValidationError("rademacher init needs a positive scale");
    return FcnInit::rademacher(parameter);
  }
  throw ValidationError("unknown FCN init '" + kind + "' (gaussian|rademacher)");
}

}  // namespace detail

/// Top-level keys: study = "separation", then the SeparationConfig fields.
inline SeparationConfig separation_config_from_toml(const std::string& text, const std::string& origin = "config") {
  const auto t = detail::parse_toml(text, origin);
  detail::reject_unknown(t, {"study", "n", "k", "q", "steps", "seeds", "record_stride", "eta", "activation", "c",
                             "theorem_mode", "fcn_init", "fcn_init_parameter", "planted_arm", "seed"},
                         origin);
  SeparationConfig c;
  std::string act = c.activation.name(), init = "gaussian";
  double cap = c.activation.cap, init_param = -1.0;
  detail::read_key(t, "n", c.n);
  detail::read_key(t, "k", c.k);
  detail::read_key(t, "q", c.q);
  detail::read_key(t, "steps", c.steps);
  detail::read_key(t, "seeds", c.seeds);
  detail::read_key(t, "record_stride", c.record_stride);
  detail::read_key(t, "eta", c.eta);
  detail::read_key(t, "activation", act);
  detail::read_key(t, "c", cap);
  detail::read_key(t, "theorem_mode", c.theorem_mode);
  detail::read_key(t, "fcn_init", init);
  detail::read_key(t, "fcn_init_parameter", init_param);
  detail::read_key(t, "planted_arm", c.planted_arm);
  detail::read_key(t, "seed", c.seed);
  c.activation = Activation::parse(act, cap);
  c.fcn_init = detail::parse_fcn_init(init, init_param);
  return c;
}

inline HardnessConfig hardness_config_from_toml(const std::string& text, const std::string& origin = "config") {
  const auto t = detail::parse_toml(text, origin);
  detail::reject_unknown(t, {"study", "n", "q", "k_list", "draws", "activation", "c", "init", "init_parameter", "seed"},
                         origin);
  HardnessConfig c;
  std::string act = c.activation.name(), init = "gaussian";
  double cap = 1.0, init_param = -1.0;
  detail::read_key(t, "n", c.n);
  detail::read_key(t, "q", c.q);
  detail::read_list(t, "k_list", c.k_list);
  detail::read_key(t, "draws", c.draws);
  detail::read_key(t, "activation", act);
  detail::read_key(t, "c", cap);
  detail::read_key(t, "init", init);
  detail::read_key(t, "init_parameter", init_param);
  detail::read_key(t, "seed", c.seed);
  c.activation = Activation::parse(act, cap);
  c.init = detail::parse_fcn_init(init, init_param);
  return c;
}

inline MnistConfig mnist_config_from_toml(const std::string& text, const std::string& origin = "config") {
  const auto t = detail::parse_toml(text, origin);
  detail::reject_unknown(t, {"study", "n_list", "rule", "epochs", "per_epoch", "test_count", "q", "minibatch", "rho",
                             "adadelta_eps", "window_cols", "stride_cols", "archs", "seeds", "seed", "activation",
                             "data_dir"},
                         origin);
  MnistConfig c;
  std::string rule = rule_name(c.rule), act = c.activation.name(), dir = c.data_dir.string();
  detail::read_list(t, "n_list", c.n_list);
  detail::read_key(t, "rule", rule);
  detail::read_key(t, "epochs", c.epochs);
  detail::read_key(t, "per_epoch", c.per_epoch);
  detail::read_key(t, "test_count", c.test_count);
  detail::read_key(t, "q", c.q);
  detail::read_key(t, "minibatch", c.minibatch);
  detail::read_key(t, "rho", c.rho);
  detail::read_key(t, "adadelta_eps", c.adadelta_eps);
  detail::read_key(t, "window_cols", c.window_cols);
  detail::read_key(t, "stride_cols", c.stride_cols);
  detail::read_key(t, "seeds", c.seeds);
  detail::read_key(t, "seed", c.seed);
  detail::read_key(t, "activation", act);
  detail::read_key(t, "data_dir", dir);
  if (const auto* node = t.get("archs")) {
    const auto* arr = node->as_array();
    if (!arr) throw ValidationError("config key 'archs' must be an array of strings");
    c.archs.clear();
    for (const auto& e : *arr) {
      auto v = e.value<std::string>();
      if (!v) throw ValidationError("config key 'archs' must be an array of strings");
      c.archs.push_back(parse_arch(*v));
    }
  }
  c.rule = parse_rule(rule);
  c.activation = Activation::parse(act);
  c.data_dir = dir;
  for (auto n : c.n_list) require_sequence_length(n);
  return c;
}

/// Name of the study a TOML file describes ("separation", "hardness", "mnist").
inline std::string study_of_toml(const std::string& text, const std::string& origin = "config") {
  const auto t = detail::parse_toml(text, origin);
  std::string s;
  detail::read_key(t, "study", s);
  if (s.empty()) throw ValidationError(origin + ": missing key 'study'");
  return s;
}

}  // namespace kpat
