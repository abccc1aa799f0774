#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kpat/kpat.hpp"
#include "kpat/verification.hpp"

namespace fs = std::filesystem;
using namespace kpat;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string out_dir = "results";
  std::size_t threads = 1;
  bool offline = false;
  std::string format = "csv";

  TableFormat table_format() const { return parse_table_format(format); }
};

void print(const std::string& label, double v) { std::cout << label << " " << display(v) << "\n"; }

CsvTable quantity_table(const std::vector<std::pair<std::string, double>>& rows) {
  CsvTable t({"quantity", "value"});
  for (const auto& [k, v] : rows) t.add_row({k, full_precision(v)});
  return t;
}

void emit_quantities(const Globals& g, const std::string& stem, const std::vector<std::pair<std::string, double>>& rows) {
  for (const auto& [k, v] : rows) print(k, v);
  write_table(quantity_table(rows), g.out_dir, stem, g.table_format());
}

int finish_study(const Globals& g, const StudyResult& r) {
  write_study(r, g.out_dir, g.table_format());
  std::cout << r.name << ": " << r.summary << "\n" << r.name << (r.pass ? " PASSED" : " FAILED") << "\n";
  return r.pass ? 0 : 2;
}

std::vector<unsigned> parse_uint_list(const std::string& s) {
  std::vector<unsigned> out;
  std::size_t at = 0;
  while (at <= s.size()) {
    const auto comma = s.find(',', at);
    const auto piece = s.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
    if (piece.empty()) throw ValidationError("empty entry in list '" + s + "'");
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(piece, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != piece.size()) throw ValidationError("not an unsigned integer: '" + piece + "'");
    out.push_back(static_cast<unsigned>(v));
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

/// Mean of `value` per (group columns..., x) over all other columns.
CsvTable mean_by(const CsvTable& t, const std::vector<std::string>& keys, const std::string& value) {
  auto col = [&](const std::string& name) {
    const auto& h = t.header();
    const auto it = std::find(h.begin(), h.end(), name);
    if (it == h.end()) throw ValidationError("no column " + name);
    return static_cast<std::size_t>(it - h.begin());
  };
  std::vector<std::size_t> kc;
  for (const auto& k : keys) kc.push_back(col(k));
  const std::size_t vc = col(value);
  std::vector<std::vector<std::string>> order;
  std::map<std::vector<std::string>, std::pair<double, std::size_t>> acc;
  for (const auto& row : t.rows()) {
    if (row[vc].empty()) continue;
    std::vector<std::string> key;
    for (auto c : kc) key.push_back(row[c]);
    auto [it, fresh] = acc.try_emplace(key, 0.0, 0);
    if (fresh) order.push_back(key);
    it->second.first += std::stod(row[vc]);
    ++it->second.second;
  }
  auto header = keys;
  header.push_back(value);
  header.push_back("count");
  CsvTable out(header);
  for (const auto& key : order) {
    auto row = key;
    const auto& [sum, count] = acc[key];
    row.push_back(full_precision(sum / static_cast<double>(count)));
    row.push_back(std::to_string(count));
    out.add_row(row);
  }
  return out;
}

void write_plot(const Globals& g, const CsvTable& t, const std::string& stem, SvgStyle style) {
  write_file(fs::path(g.out_dir) / (stem + ".svg"), emit_svg_lines(t.str(), style));
}

// ---------------------------------------------------------------------------
// Training

struct TrainArgs {
  std::string arch = "cnn";
  unsigned n = 12, k = 3;
  std::size_t q = 128, steps = 500, record_stride = 10;
  double eta = 0.5;
  bool eta_theorem = false;
  std::string activation = "clipped_relu";
  double c = 1.0;
  bool theorem_mode = false;
  std::string target = "kpattern";
  unsigned jstar = 0;  // 0: drawn at random
  std::string init = "";  // theorem (cnn/lcn) | gaussian | rademacher | standard
  double init_parameter = -1.0;
  bool freeze_first = false;
  std::string comparator = "none";  // none | planted
  std::string config;
};

void apply_train_toml(TrainArgs& a, const std::string& path, const CLI::App& sub) {
  const auto t = detail::parse_toml(read_file(path), path);
  detail::reject_unknown(t, {"study", "arch", "n", "k", "q", "steps", "record_stride", "eta", "eta_theorem",
                             "activation", "c", "theorem_mode", "target", "jstar", "init", "init_parameter",
                             "freeze_first", "comparator"},
                         path);
  // Explicit command-line flags win over the file.
  auto take = [&](const char* key, auto& field) {
    if (sub.count(std::string("--") + key) == 0) detail::read_key(t, key, field);
  };
  take("arch", a.arch);
  take("n", a.n);
  take("k", a.k);
  take("q", a.q);
  take("steps", a.steps);
  take("record_stride", a.record_stride);
  take("eta", a.eta);
  take("eta_theorem", a.eta_theorem);
  take("activation", a.activation);
  take("c", a.c);
  take("theorem_mode", a.theorem_mode);
  take("target", a.target);
  take("jstar", a.jstar);
  take("init", a.init);
  take("init_parameter", a.init_parameter);
  take("freeze_first", a.freeze_first);
  take("comparator", a.comparator);
}

int run_train(const Globals& g, TrainArgs a, const CLI::App& sub) {
  if (!a.config.empty()) apply_train_toml(a, a.config, sub);
  const Arch arch = parse_arch(a.arch);
  const auto act = Activation::parse(a.activation, a.c);
  Rng rng(g.seed);
  Rng target_rng = rng.split(0), init_rng = rng.split(1), train_rng = rng.split(2);

  KPattern f;
  if (a.target == "kpattern") {
    f = random_kpattern(target_rng, a.n, a.k);
    if (a.jstar) f.jstar = a.jstar;
  } else if (a.target == "parity") {
    f = parity_pattern(a.n, a.jstar ? a.jstar : 1 + (unsigned)target_rng.below(a.n - a.k + 1), a.k);
  } else {
    throw ValidationError("unknown target '" + a.target + "' (kpattern|parity)");
  }
  f.validate();
  const CubeSource cube(f);

  TrainConfig tc;
  tc.steps = a.steps;
  tc.eta = a.eta;
  tc.use_eta_theorem = a.eta_theorem;
  tc.theorem_mode = a.theorem_mode;
  tc.record_stride = a.record_stride;
  tc.frozen.first = a.freeze_first;
  tc.seed = g.seed;
  if (a.comparator != "none" && a.comparator != "planted")
    throw ValidationError("unknown comparator '" + a.comparator + "' (none|planted)");

  const std::string stem = "train_" + arch_name(arch);
  auto finish = [&](const auto& result, const WindowScheme& s, nlohmann::json extra) {
    auto traj = result.trajectory;
    traj.meta["target"] = {{"kind", a.target}, {"n", f.n}, {"k", f.k}, {"jstar", f.jstar}, {"g", f.g}};
    traj.meta["seed"] = g.seed;
    for (auto& [k, v] : extra.items()) traj.meta[k] = v;
    write_file(fs::path(g.out_dir) / (stem + ".jsonl"), traj.to_jsonl());
    write_table(traj.summary(), g.out_dir, stem + "_summary", g.table_format());
    write_file(fs::path(g.out_dir) / (stem + ".params.json"), to_json(result.params, s, act).dump() + "\n");
    const auto& last = traj.records.back();
    print("final_loss", last.loss);
    print("final_accuracy", last.accuracy);
    return 0;
  };

  const auto win = WindowScheme::boolean(a.n, a.k);
  const std::string init = a.init.empty() ? (arch == Arch::Fcn ? "gaussian" : "theorem") : a.init;
  if (arch == Arch::Cnn || arch == Arch::Lcn) {
    if (init != "theorem" && init != "standard") throw ValidationError("cnn/lcn init must be theorem or standard");
    auto run = [&](auto p0) {
      using P = decltype(p0);
      nlohmann::json extra{{"init", init}, {"theta1_norm", std::sqrt(squared_norm(p0, Group::Readout))}};
      std::function<double(const P&)> comparator;
      Matrix ustar;
      if (a.comparator == "planted") {
        if constexpr (std::is_same_v<P, CnnParams>) {
          if (init != "theorem") throw ValidationError("planted comparator needs the theorem init");
          ustar = construct_ustar(p0.kernel, p0.bias, f, win.positions()).readout;
          extra["comparator_norm"] = ustar.norm();
          comparator = [&](const P& p) {
            P s = p;
            s.readout = ustar;
            return evaluate_exact(s, win, act, cube, false).loss;
          };
        } else {
          throw ValidationError("planted comparator is available for cnn only");
        }
      }
      return finish(train(p0, win, act, Objective{cube}, tc, train_rng, comparator), win, extra);
    };
    if (arch == Arch::Cnn) {
      if (init == "theorem") return run(init_cnn_theorem(init_rng, a.q, a.k, win.positions()));
      return run(std::get<CnnParams>(init_standard(arch, init_rng, a.q, win)));
    }
    if (init == "theorem") return run(init_lcn_theorem(init_rng, a.q, a.k, win.positions()));
    return run(std::get<LcnParams>(init_standard(arch, init_rng, a.q, win)));
  }
  if (a.comparator != "none") throw ValidationError("planted comparator is available for cnn only");
  const WindowScheme full{a.n, a.n, 1};
  FcnParams p0;
  if (init == "standard") {
    p0 = std::get<FcnParams>(init_standard(arch, init_rng, a.q, full));
  } else {
    const double param = a.init_parameter > 0 ? a.init_parameter
                                              : (init == "gaussian" ? 1.0 / a.n : 1.0 / std::sqrt((double)a.n));
    p0 = init_fcn_perm_invariant(init_rng, a.q, a.n, detail::parse_fcn_init(init, param),
                                 std::isfinite(act.bound()) ? act.bound() : 1.0);
  }
  return finish(train(p0, full, act, Objective{cube}, tc, train_rng), full, {{"init", init}});
}

// ---------------------------------------------------------------------------
// Verification over stored trajectories

int verify_drift_file(const Globals& g, const std::string& path) {
  const auto traj = Trajectory::from_jsonl(read_file(path));
  const auto& m = traj.meta;
  const double n = m.at("input_length").get<double>(), k = m.at("width").get<double>();
  const double q = m.at("neurons").get<double>(), eta = m.at("eta").get<double>(), c = m.at("c").get<double>();
  if (!std::isfinite(c)) throw ValidationError("drift bounds need a bounded activation");
  StudyResult r{"drift_file", true, "", CsvTable({"step", "kind", "measured", "bound", "ok"}), m};
  std::size_t bad = 0;
  for (const auto& rec : traj.records) {
    const auto b = drift_bounds((double)rec.step, eta, q, n, k, c);
    double umax = 0.0;
    for (double v : rec.readout_norms) umax = std::max(umax, v);
    const bool ou = umax <= b.readout, ow = rec.first_layer_drift <= b.first_layer;
    bad += !ou + !ow;
    r.table.add_row({std::to_string(rec.step), "readout", full_precision(umax), full_precision(b.readout), ou ? "true" : "false"});
    r.table.add_row({std::to_string(rec.step), "first_layer", full_precision(rec.first_layer_drift),
                     full_precision(b.first_layer), ow ? "true" : "false"});
  }
  r.pass = bad == 0;
  r.summary = std::to_string(bad) + " violations over " + std::to_string(traj.records.size()) + " records";
  return finish_study(g, r);
}

int verify_ogd_file(const Globals& g, const std::string& path) {
  const auto traj = Trajectory::from_jsonl(read_file(path));
  if (!traj.meta.contains("comparator_norm") || !traj.meta.contains("theta1_norm"))
    throw ValidationError("trajectory lacks comparator_norm/theta1_norm (train with --comparator planted)");
  const auto rep = verify_ogd_regret(ogd_trace_from(traj, traj.meta["theta1_norm"].get<double>(),
                                                    traj.meta["comparator_norm"].get<double>()));
  StudyResult r{"ogd_file", rep.pass(), rep.text(), bound_reports_csv({rep}), traj.meta};
  return finish_study(g, r);
}

// ---------------------------------------------------------------------------
// MNIST

const std::map<std::string, std::string>& official_md5() {
  static const std::map<std::string, std::string> m{
      {"train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"},
      {"train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"},
      {"t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"},
      {"t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"}};
  return m;
}

FetchConfig fetch_config_from_toml(const std::string& path) {
  const auto t = detail::parse_toml(read_file(path), path);
  detail::reject_unknown(t, {"mirrors", "checksums", "cache_dir"}, path);
  FetchConfig cfg;
  std::string dir;
  detail::read_key(t, "cache_dir", dir);
  if (!dir.empty()) cfg.cache_dir = dir;
  if (const auto* arr = t["mirrors"].as_array())
    for (const auto& e : *arr) {
      auto v = e.value<std::string>();
      if (!v) throw ValidationError(path + ": mirrors must be strings");
      cfg.mirrors.push_back(*v);
    }
  const auto* sums = t["checksums"].as_table();
  if (!sums) throw ValidationError(path + ": missing [checksums] table");
  for (const auto& name : mnist_file_names()) {
    auto v = (*sums)[name].value<std::string>();
    if (!v) throw ValidationError(path + ": no checksum for " + name);
    cfg.files.push_back({name, *v});
  }
  return cfg;
}

// ---------------------------------------------------------------------------

int run_experiment_separation(const Globals& g, SeparationConfig cfg) {
  const auto r = study_separation(cfg);
  write_study(r, g.out_dir, g.table_format());
  const auto mean = mean_by(r.extras.front().second, {"arch", "step"}, "accuracy");
  write_table(mean, g.out_dir, "separation_mean", g.table_format());
  write_plot(g, mean, "separation", {"Population accuracy, mean over seeds", "step", "accuracy", {"arch"}});
  std::cout << "separation: " << r.summary << "\n";
  return 0;
}

int run_experiment_hardness(const Globals& g, const HardnessConfig& cfg) {
  const auto res = run_hardness_decay(cfg);
  const auto table = decay_table(res.rows);
  write_table(table, g.out_dir, "hardness_decay", g.table_format());
  write_file(fs::path(g.out_dir) / "hardness_decay.meta.json", res.meta.dump(2) + "\n");
  CsvTable plot({"k", "series", "value"});
  for (const auto& row : res.rows) {
    plot.add_row({std::to_string(row.k), "first_layer_bound", full_precision(std::log10(row.bounds.first_layer))});
    plot.add_row({std::to_string(row.k), "first_layer_mean", full_precision(std::log10(row.measured.first.mean))});
    plot.add_row({std::to_string(row.k), "readout_bound", full_precision(std::log10(row.bounds.readout))});
    plot.add_row({std::to_string(row.k), "readout_mean", full_precision(std::log10(row.measured.readout.mean))});
  }
  write_plot(g, plot, "hardness_decay", {"log10 squared gradient norm at init", "k", "value", {"series"}});
  bool ok = true;
  for (const auto& row : res.rows) {
    std::cout << "k=" << row.k << " W " << display(row.measured.first.mean) << " <= " << display(row.bounds.first_layer)
              << "  u " << display(row.measured.readout.mean) << " <= " << display(row.bounds.readout)
              << (row.within() ? "" : "  VIOLATED") << "\n";
    ok = ok && row.within();
  }
  return ok ? 0 : 2;
}

int run_experiment_mnist(const Globals& g, MnistConfig cfg) {
  const auto data = load_mnist(cfg.data_dir);
  const auto res = run_mnist_sequences(cfg, data);
  const std::string stem = "mnist_" + rule_name(cfg.rule);
  write_table(res.table(), g.out_dir, stem, g.table_format());
  write_file(fs::path(g.out_dir) / (stem + ".meta.json"), res.meta.dump(2) + "\n");
  const auto mean = mean_by(res.table(), {"arch", "n", "epoch"}, "test_accuracy");
  write_table(mean, g.out_dir, stem + "_mean", g.table_format());
  write_plot(g, mean, stem, {"Test accuracy, " + rule_name(cfg.rule) + " parity", "epoch", "test_accuracy", {"arch", "n"}});
  for (std::size_t s = 0; s < cfg.seeds; ++s)
    for (auto n : cfg.n_list) {
      std::cout << "seed " << s << " n=" << n;
      for (auto a : cfg.archs) std::cout << " " << arch_name(a) << "=" << display(res.final_accuracy(s, n, a));
      std::cout << "\n";
    }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kpat: learning k-patterns with convolutional, locally-connected and fully-connected networks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Root seed")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Directory for result files")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::Range(1, 1024))->capture_default_str();
  app.add_flag("--offline", g.offline, "Never touch the network");
  app.add_option("--format", g.format, "Table format")->check(CLI::IsMember({"csv", "jsonl"}))->capture_default_str();

  std::function<int()> action;

  // bounds --------------------------------------------------------------------
  auto* bounds = app.add_subcommand("bounds", "Closed-form bound calculators");
  bounds->require_subcommand(1);
  struct {
    double n = 0, k = 0, q = 0, T = 0, c = 1, t = 0, eta = 0, eps = 0, C = 1, delta = 0.05;
  } B;
  auto* b1 = bounds->add_subcommand("thm1", "Loss bound for the convolutional network after T steps");
  b1->add_option("--n", B.n)->required();
  b1->add_option("--k", B.k)->required();
  b1->add_option("--q", B.q)->required();
  b1->add_option("--T", B.T)->required();
  b1->add_option("--c", B.c)->capture_default_str();
  b1->callback([&] {
    action = [&] {
      const auto b = thm1_bound(B.n, B.k, B.q, B.T, B.c);
      emit_quantities(g, "bounds_thm1", {{"width_term", b.width_term}, {"readout_term", b.readout_term},
                                         {"horizon_term", b.horizon_term}, {"total", b.total()}});
      return 0;
    };
  });
  auto* b2 = bounds->add_subcommand("thm2", "Gradient-norm bounds at a permutation-invariant init");
  b2->add_option("--n", B.n)->required();
  b2->add_option("--k", B.k)->required();
  b2->add_option("--q", B.q)->required();
  b2->add_option("--c", B.c)->capture_default_str();
  b2->callback([&] {
    action = [&] {
      if (B.n < 1 || B.k < 1 || B.n != std::floor(B.n) || B.k != std::floor(B.k))
        throw ValidationError("thm2: n and k must be positive integers");
      const auto b = thm2_bounds((unsigned)B.n, (unsigned)B.k, B.q, B.c);
      emit_quantities(g, "bounds_thm2", {{"first_layer", b.first_layer}, {"readout", b.readout}});
      return 0;
    };
  });
  auto* b3 = bounds->add_subcommand("drift", "Readout and first-layer drift after t steps");
  b3->add_option("--t", B.t)->required();
  b3->add_option("--eta", B.eta)->required();
  b3->add_option("--q", B.q)->required();
  b3->add_option("--n", B.n)->required();
  b3->add_option("--k", B.k)->required();
  b3->add_option("--c", B.c)->capture_default_str();
  b3->callback([&] {
    action = [&] {
      const auto b = drift_bounds(B.t, B.eta, B.q, B.n, B.k, B.c);
      emit_quantities(g, "bounds_drift", {{"readout", b.readout}, {"first_layer", b.first_layer}});
      return 0;
    };
  });
  auto* b4 = bounds->add_subcommand("corollary", "Width, steps and sample size for accuracy eps");
  b4->add_option("--n", B.n)->required();
  b4->add_option("--eps", B.eps)->required();
  b4->add_option("--C", B.C)->capture_default_str();
  b4->add_option("--k", B.k, "Pattern size (default ceil(log2 n))");
  b4->add_option("--delta", B.delta)->capture_default_str();
  b4->callback([&] {
    action = [&] {
      const auto p = corollary_params(B.n, B.eps, B.C, B.k, B.delta);
      emit_quantities(g, "bounds_corollary", {{"neurons", p.neurons}, {"steps", p.steps}, {"sample_size", p.sample_size}});
      return 0;
    };
  });
  auto* b5 = bounds->add_subcommand("qthreshold", "Width needed to cover every window pattern");
  b5->add_option("--k", B.k)->required();
  b5->add_option("--delta", B.delta)->capture_default_str();
  b5->callback([&] {
    action = [&] {
      const auto q = q_threshold((unsigned)B.k, B.delta);
      emit_quantities(g, "bounds_qthreshold", {{"q", (double)q}, {"ustar_norm_bound", ustar_norm_bound((unsigned)B.k, (double)q)}});
      return 0;
    };
  });

  // construct -----------------------------------------------------------------
  auto* construct = app.add_subcommand("construct", "Plant the readout at the theorem init and verify it");
  ConstructStudy CS;
  unsigned construct_k = 3;
  std::optional<std::size_t> construct_min;
  construct->add_option("--n", CS.n)->capture_default_str();
  construct->add_option("--k", construct_k)->capture_default_str();
  construct->add_option("--delta", CS.delta)->capture_default_str();
  construct->add_option("--trials", CS.trials)->capture_default_str();
  construct->add_option("--min-success", construct_min, "Default: 90% of trials");
  construct->callback([&] {
    action = [&] {
      CS.k_list = {construct_k};
      CS.seed = g.seed;
      CS.min_success = construct_min ? *construct_min : (CS.trials * 9 + 9) / 10;
      return finish_study(g, study_construct(CS));
    };
  });

  // train ---------------------------------------------------------------------
  auto* trn = app.add_subcommand("train", "Train one network on a k-pattern with exact population gradients");
  TrainArgs TA;
  trn->add_option("--config", TA.config, "TOML file with the same keys (flags override)");
  trn->add_option("--arch", TA.arch)->check(CLI::IsMember({"cnn", "lcn", "fcn"}))->capture_default_str();
  trn->add_option("--n", TA.n)->capture_default_str();
  trn->add_option("--k", TA.k)->capture_default_str();
  trn->add_option("--q", TA.q)->capture_default_str();
  trn->add_option("--steps", TA.steps)->capture_default_str();
  trn->add_option("--record_stride,--record-stride", TA.record_stride)->capture_default_str();
  trn->add_option("--eta", TA.eta)->capture_default_str();
  trn->add_flag("--eta_theorem,--eta-theorem", TA.eta_theorem, "eta = sqrt(n)/(sqrt(q) T)");
  trn->add_option("--activation", TA.activation)->capture_default_str();
  trn->add_option("--c", TA.c)->capture_default_str();
  trn->add_flag("--theorem_mode,--theorem-mode", TA.theorem_mode, "Freeze the bias, reject ReLU");
  trn->add_option("--target", TA.target)->capture_default_str();
  trn->add_option("--jstar", TA.jstar, "Window start (default random)");
  trn->add_option("--init", TA.init, "theorem|standard (cnn/lcn), gaussian|rademacher|standard (fcn)");
  trn->add_option("--init_parameter,--init-parameter", TA.init_parameter);
  trn->add_flag("--freeze_first,--freeze-first", TA.freeze_first);
  trn->add_option("--comparator", TA.comparator, "none|planted")->capture_default_str();
  trn->callback([&] { action = [&] { return run_train(g, TA, *trn); }; });

  // probe ---------------------------------------------------------------------
  auto* probe = app.add_subcommand("probe", "Gradient measurements at initialization");
  probe->require_subcommand(1);
  struct {
    std::string arch = "fcn", init = "gaussian", target = "parity", k_list = "1,2,3,4,5", subset;
    unsigned n = 10, k = 5, j = 1;
    std::size_t q = 8, draws = 100;
    double init_parameter = -1.0, u = 1.0, b = 0.0;
    std::optional<std::size_t> mc;
  } P;
  auto fcn_init = [&] {
    const double param = P.init_parameter > 0
                             ? P.init_parameter
                             : (P.init == "gaussian" ? 1.0 / P.n : 1.0 / std::sqrt((double)P.n));
    return detail::parse_fcn_init(P.init, param);
  };
  auto* pg = probe->add_subcommand("grad-norm", "Mean squared gradient norms over init draws");
  pg->add_option("--arch", P.arch)->check(CLI::IsMember({"cnn", "lcn", "fcn"}))->capture_default_str();
  pg->add_option("--n", P.n)->capture_default_str();
  pg->add_option("--k", P.k)->capture_default_str();
  pg->add_option("--q", P.q)->capture_default_str();
  pg->add_option("--draws", P.draws)->capture_default_str();
  pg->add_option("--init", P.init, "FCN: gaussian|rademacher")->capture_default_str();
  pg->add_option("--init-parameter", P.init_parameter, "Variance or magnitude (default 1/n, 1/sqrt(n))");
  pg->add_option("--target", P.target, "parity (chi_{1..k}) or kpattern (parity pattern at j*=1)")->capture_default_str();
  pg->add_option("--mc-samples", P.mc, "Monte Carlo over inputs instead of enumeration");
  pg->callback([&] {
    action = [&] {
      ProbeConfig pc;
      pc.arch = parse_arch(P.arch);
      pc.neurons = P.q;
      pc.window = P.k;
      pc.draws = P.draws;
      pc.seed = g.seed;
      pc.mc_samples = P.mc;
      if (pc.arch == Arch::Fcn) {
        pc.fcn_init = fcn_init();
        pc.activation = Activation::tanh();
      } else {
        pc.activation = Activation::clipped_relu(1.0);
      }
      Target target = Parity{P.n, window_subset(1, P.k)};
      if (P.target == "kpattern") target = parity_pattern(P.n, 1, P.k);
      else if (P.target != "parity") throw ValidationError("unknown target '" + P.target + "'");
      const auto est = grad_norm_at_init(pc, target);
      std::vector<std::pair<std::string, double>> rows{{"first_layer_mean", est.first.mean},
                                                        {"first_layer_se", est.first.std_error},
                                                        {"readout_mean", est.readout.mean},
                                                        {"readout_se", est.readout.std_error}};
      bool ok = true;
      if (pc.arch == Arch::Fcn) {
        const auto b = thm2_bounds(P.n, P.k, (double)P.q, 1.0);
        rows.push_back({"first_layer_bound", b.first_layer});
        rows.push_back({"readout_bound", b.readout});
        ok = est.first.mean <= b.first_layer + 3 * est.first.std_error &&
             est.readout.mean <= b.readout + 3 * est.readout.std_error;
      }
      emit_quantities(g, "probe_grad_norm", rows);
      return ok ? 0 : 2;
    };
  });
  auto* ps = probe->add_subcommand("spectrum", "Fourier spectrum of x_j u sigma'(<w,x> + b) for a random tanh neuron");
  ps->add_option("--n", P.n)->capture_default_str();
  ps->add_option("--j", P.j)->capture_default_str();
  ps->add_option("--u", P.u)->capture_default_str();
  ps->add_option("--b", P.b)->capture_default_str();
  ps->add_option("--subset", P.subset, "Comma-separated 1-based coordinates to report");
  ps->callback([&] {
    action = [&] {
      Rng rng(g.seed);
      Vector w(P.n);
      for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.normal() / std::sqrt((double)P.n);
      const auto gs = gradient_fourier_spectrum(w, P.u, P.b, P.j, Activation::tanh());
      CsvTable t({"subset", "coefficient"});
      for (std::size_t m = 0; m < gs.spectrum.coeff.size(); ++m)
        t.add_row({std::to_string(m), full_precision(gs.spectrum.coeff[m])});
      write_table(t, g.out_dir, "probe_spectrum", g.table_format());
      print("squared_norm", gs.squared_norm);
      print("sum_of_squares", gs.spectrum.sum_of_squares());
      if (!P.subset.empty()) {
        std::uint32_t mask = 0;
        for (auto i : parse_uint_list(P.subset)) {
          if (i < 1 || i > P.n) throw ValidationError("subset coordinate outside [n]");
          mask |= 1u << (i - 1);
        }
        print("coefficient", gs.spectrum.at(mask));
      }
      return 0;
    };
  });
  auto* pd = probe->add_subcommand("decay", "FCN gradient norms against the bounds for several k");
  pd->add_option("--n", P.n)->capture_default_str();
  pd->add_option("--q", P.q)->capture_default_str();
  pd->add_option("--k-list", P.k_list)->capture_default_str();
  pd->add_option("--draws", P.draws)->capture_default_str();
  pd->add_option("--init", P.init)->capture_default_str();
  pd->add_option("--init-parameter", P.init_parameter);
  pd->callback([&] {
    action = [&] {
      HardnessConfig hc;
      hc.n = P.n;
      hc.q = P.q;
      hc.k_list = parse_uint_list(P.k_list);
      hc.draws = P.draws;
      hc.seed = g.seed;
      hc.init = fcn_init();
      return run_experiment_hardness(g, hc);
    };
  });

  // verify --------------------------------------------------------------------
  auto* verify = app.add_subcommand("verify", "Seeded checks of the lemmas and bounds (exit 2 on failure)");
  verify->require_subcommand(1);
  struct {
    std::string trajectory;
    unsigned n = 0, k = 3;
    std::size_t trials = 100, q = 0, runs = 10, steps = 500, configs = 50;
    double eta = 0.5;
  } V;
  auto* vo = verify->add_subcommand("ogd", "Online-gradient-descent regret with the first layer frozen");
  vo->add_option("--trajectory", V.trajectory, "JSONL from `train --freeze-first --comparator planted`");
  vo->add_option("--runs", V.runs)->capture_default_str();
  vo->add_option("--steps", V.steps)->capture_default_str();
  vo->add_option("--eta", V.eta)->capture_default_str();
  vo->callback([&] {
    action = [&] {
      if (!V.trajectory.empty()) return verify_ogd_file(g, V.trajectory);
      OgdStudy o;
      o.runs = V.runs;
      o.steps = V.steps;
      o.eta = V.eta;
      o.seed = g.seed;
      return finish_study(g, study_ogd(o));
    };
  });
  auto* vp = verify->add_subcommand("perm-identity", "Gradient identity under coordinate permutations");
  vp->add_option("--n", V.n, "default 10");
  vp->add_option("--trials", V.trials)->capture_default_str();
  vp->callback([&] {
    action = [&] {
      PermIdentityStudy s;
      if (V.n) s.n = V.n;
      s.trials = V.trials;
      s.seed = g.seed;
      return finish_study(g, study_perm_identity(s));
    };
  });
  auto* vw = verify->add_subcommand("parseval", "Walsh-Hadamard Parseval identity and round trip");
  vw->add_option("--n", V.n, "default 12");
  vw->add_option("--trials", V.trials)->capture_default_str();
  vw->callback([&] {
    action = [&] {
      ParsevalStudy s;
      if (V.n) s.n = V.n;
      s.trials = V.trials;
      s.seed = g.seed;
      return finish_study(g, study_parseval(s));
    };
  });
  auto* vd = verify->add_subcommand("drift", "Drift bounds over a trajectory file or seeded theorem-mode runs");
  vd->add_option("--trajectory", V.trajectory);
  vd->add_option("--runs", V.runs)->capture_default_str();
  vd->add_option("--steps", V.steps)->capture_default_str();
  vd->add_option("--eta", V.eta)->capture_default_str();
  vd->callback([&] {
    action = [&] {
      if (!V.trajectory.empty()) return verify_drift_file(g, V.trajectory);
      DriftStudy d;
      d.runs = V.runs;
      d.steps = V.steps;
      d.eta = V.eta;
      d.seed = g.seed;
      return finish_study(g, study_drift(d));
    };
  });
  auto* vh = verify->add_subcommand("hardness", "FCN gradient norms at init within the bounds");
  vh->add_option("--draws", V.trials, "default 100");
  vh->callback([&] {
    action = [&] {
      HardnessStudy s;
      s.draws = V.trials;
      s.seed = g.seed;
      return finish_study(g, study_hardness(s));
    };
  });
  auto* vc = verify->add_subcommand("cnn-signal", "Closed-form CNN readout gradient at the theorem init");
  vc->add_option("--trials", V.trials, "per k")->capture_default_str();
  vc->callback([&] {
    action = [&] {
      CnnSignalStudy s;
      s.trials = V.trials;
      s.seed = g.seed;
      return finish_study(g, study_cnn_signal(s));
    };
  });
  auto* vg = verify->add_subcommand("gradcheck", "Analytic gradients against finite differences");
  vg->add_option("--configs", V.configs)->capture_default_str();
  vg->callback([&] {
    action = [&] {
      GradCheckStudy s;
      s.configs = V.configs;
      s.seed = g.seed;
      return finish_study(g, study_gradcheck(s));
    };
  });
  auto* vs = verify->add_subcommand("separation", "CNN/LCN learn the pattern, the FCN does worse");
  SeparationConfig SC;
  std::string sep_config;
  vs->add_option("--config", sep_config, "TOML separation config");
  vs->callback([&] {
    action = [&] {
      SeparationConfig c = sep_config.empty() ? SC : separation_config_from_toml(read_file(sep_config), sep_config);
      if (app.count("--seed")) c.seed = g.seed;
      return finish_study(g, study_separation(c));
    };
  });

  // mnist ---------------------------------------------------------------------
  auto* mn = app.add_subcommand("mnist", "MNIST download cache and sequence datasets");
  mn->require_subcommand(1);
  struct {
    std::vector<std::string> mirrors, checksums;
    std::string cache_dir, config, rule = "central", split = "train";
    std::size_t n = 5, count = 1000;
  } M;
  auto* mf = mn->add_subcommand("fetch", "Download (or verify) the four MNIST files");
  mf->add_option("--config", M.config, "TOML with mirrors, [checksums] and cache_dir");
  mf->add_option("--mirror", M.mirrors, "URL prefix (http, https or file://), repeatable");
  mf->add_option("--checksum", M.checksums, "NAME=HEX override, repeatable");
  mf->add_option("--cache-dir", M.cache_dir, "Default $KPAT_MNIST_DIR or data/mnist");
  mf->callback([&] {
    action = [&] {
      FetchConfig cfg;
      if (!M.config.empty()) cfg = fetch_config_from_toml(M.config);
      if (cfg.files.empty())
        for (const auto& [name, md5] : official_md5()) cfg.files.push_back({name, md5});
      if (!M.mirrors.empty()) cfg.mirrors = M.mirrors;
      if (cfg.mirrors.empty())
        cfg.mirrors = {"https://ossci-datasets.s3.amazonaws.com/mnist/",
                       "https://storage.googleapis.com/cvdf-datasets/mnist/"};
      for (const auto& kv : M.checksums) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ValidationError("--checksum expects NAME=HEX");
        bool found = false;
        for (auto& f : cfg.files)
          if (f.name == kv.substr(0, eq)) f.checksum = kv.substr(eq + 1), found = true;
        if (!found) throw ValidationError("unknown MNIST file " + kv.substr(0, eq));
      }
      if (!M.cache_dir.empty()) cfg.cache_dir = M.cache_dir;
      if (cfg.cache_dir.empty()) cfg.cache_dir = mnist_cache_dir();
      cfg.offline = g.offline;
      for (const auto& [name, path] : fetch_mnist(cfg)) std::cout << name << " " << path.string() << "\n";
      return 0;
    };
  });
  auto* mb = mn->add_subcommand("build", "Write a sequence dataset as IDX files");
  mb->add_option("--n", M.n)->capture_default_str();
  mb->add_option("--rule", M.rule)->check(CLI::IsMember({"central", "ends-middle"}))->capture_default_str();
  mb->add_option("--count", M.count)->capture_default_str();
  mb->add_option("--split", M.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  mb->add_option("--cache-dir", M.cache_dir);
  mb->callback([&] {
    action = [&] {
      const auto data = load_mnist(M.cache_dir.empty() ? mnist_cache_dir() : fs::path(M.cache_dir));
      Rng rng(g.seed);
      const auto seqs = build_sequences(M.split == "train" ? data.train : data.test, M.n, parse_rule(M.rule), M.count, rng);
      IdxTensor images{0x0E, {(std::uint32_t)seqs.size(), 24, (std::uint32_t)(8 * M.n)}, {}};
      IdxTensor labels{0x09, {(std::uint32_t)seqs.size()}, {}};
      IdxTensor classes{0x08, {(std::uint32_t)seqs.size(), (std::uint32_t)M.n}, {}};
      for (const auto& ex : seqs) {
        for (Eigen::Index r = 0; r < ex.image.rows(); ++r)
          for (Eigen::Index c = 0; c < ex.image.cols(); ++c) {
            std::uint64_t bits;
            const double v = ex.image(r, c);
            std::memcpy(&bits, &v, 8);
            for (int s = 56; s >= 0; s -= 8) images.payload.push_back((bits >> s) & 0xFF);
          }
        labels.payload.push_back(static_cast<std::uint8_t>(static_cast<std::int8_t>(ex.label)));
        for (int d : ex.classes) classes.payload.push_back(static_cast<std::uint8_t>(d));
      }
      const std::string stem = "seq_" + M.rule + "_n" + std::to_string(M.n) + "_" + M.split;
      write_file(fs::path(g.out_dir) / (stem + "-images.idx"), serialize_idx(images));
      write_file(fs::path(g.out_dir) / (stem + "-labels.idx"), serialize_idx(labels));
      write_file(fs::path(g.out_dir) / (stem + "-classes.idx"), serialize_idx(classes));
      std::size_t pos = 0;
      for (const auto& ex : seqs) pos += ex.label == 1;
      print("examples", (double)seqs.size());
      print("positive_fraction", (double)pos / (double)seqs.size());
      return 0;
    };
  });

  // experiment ----------------------------------------------------------------
  auto* ex = app.add_subcommand("experiment", "Named studies: separation, hardness, mnist, or run --config");
  ex->require_subcommand(1);
  std::string ex_config;
  struct {
    std::string rule = "central", n_list;
    std::size_t epochs = 0, seeds = 0;
  } E;
  auto* es = ex->add_subcommand("separation", "CNN/LCN/FCN on random k-patterns, identical budgets");
  es->add_option("--config", ex_config);
  es->add_option("--n", SC.n)->capture_default_str();
  es->add_option("--k", SC.k)->capture_default_str();
  es->add_option("--q", SC.q)->capture_default_str();
  es->add_option("--steps", SC.steps)->capture_default_str();
  es->add_option("--seeds", SC.seeds)->capture_default_str();
  es->add_option("--eta", SC.eta)->capture_default_str();
  es->add_option("--record-stride", SC.record_stride)->capture_default_str();
  es->callback([&] {
    action = [&] {
      SeparationConfig c = ex_config.empty() ? SC : separation_config_from_toml(read_file(ex_config), ex_config);
      if (app.count("--seed")) c.seed = g.seed;
      return run_experiment_separation(g, c);
    };
  });
  auto* eh = ex->add_subcommand("hardness", "Gradient-norm decay in k at permutation-invariant inits");
  eh->add_option("--config", ex_config);
  eh->callback([&] {
    action = [&] {
      HardnessConfig c = ex_config.empty() ? HardnessConfig{} : hardness_config_from_toml(read_file(ex_config), ex_config);
      if (app.count("--seed")) c.seed = g.seed;
      return run_experiment_hardness(g, c);
    };
  });
  auto* em = ex->add_subcommand("mnist", "MNIST sequence parity with CNN/LCN/FCN");
  em->add_option("--config", ex_config);
  em->add_option("--rule", E.rule)->check(CLI::IsMember({"central", "ends-middle"}))->capture_default_str();
  em->add_option("--n-list", E.n_list, "Comma-separated odd lengths");
  em->add_option("--epochs", E.epochs);
  em->add_option("--seeds", E.seeds);
  em->callback([&] {
    action = [&] {
      MnistConfig c = ex_config.empty() ? MnistConfig{} : mnist_config_from_toml(read_file(ex_config), ex_config);
      if (ex_config.empty() || em->count("--rule")) c.rule = parse_rule(E.rule);
      if (ex_config.empty() && !em->count("--n-list") && c.rule == SequenceRule::EndsMiddleParity) c.n_list = {5};
      if (!E.n_list.empty()) {
        c.n_list.clear();
        for (auto v : parse_uint_list(E.n_list)) c.n_list.push_back(v);
      }
      if (E.epochs) c.epochs = E.epochs;
      if (E.seeds) c.seeds = E.seeds;
      if (app.count("--seed")) c.seed = g.seed;
      return run_experiment_mnist(g, c);
    };
  });
  auto* er = ex->add_subcommand("run", "Run the study a TOML file names in its `study` key");
  er->add_option("--config", ex_config)->required();
  er->callback([&] {
    action = [&] {
      const auto text = read_file(ex_config);
      const auto study = study_of_toml(text, ex_config);
      if (study == "separation") {
        auto c = separation_config_from_toml(text, ex_config);
        if (app.count("--seed")) c.seed = g.seed;
        return run_experiment_separation(g, c);
      }
      if (study == "hardness") {
        auto c = hardness_config_from_toml(text, ex_config);
        if (app.count("--seed")) c.seed = g.seed;
        return run_experiment_hardness(g, c);
      }
      if (study == "mnist") {
        auto c = mnist_config_from_toml(text, ex_config);
        if (app.count("--seed")) c.seed = g.seed;
        return run_experiment_mnist(g, c);
      }
      throw ValidationError(ex_config + ": unknown study '" + study + "'");
    };
  });

  // plot ----------------------------------------------------------------------
  auto* pl = app.add_subcommand("plot", "Line chart (SVG) from a CSV file");
  struct {
    std::string csv, x, y, series, title, out;
  } PL;
  pl->add_option("--csv", PL.csv)->required();
  pl->add_option("--x", PL.x)->required();
  pl->add_option("--y", PL.y)->required();
  pl->add_option("--series", PL.series, "Comma-separated grouping columns");
  pl->add_option("--title", PL.title);
  pl->add_option("--out", PL.out, "Default <out-dir>/<csv stem>.svg");
  pl->callback([&] {
    action = [&] {
      SvgStyle st{PL.title, PL.x, PL.y, {}};
      std::size_t at = 0;
      while (!PL.series.empty() && at <= PL.series.size()) {
        const auto comma = PL.series.find(',', at);
        st.series_columns.push_back(PL.series.substr(at, comma == std::string::npos ? std::string::npos : comma - at));
        if (comma == std::string::npos) break;
        at = comma + 1;
      }
      const fs::path out = PL.out.empty() ? fs::path(g.out_dir) / (fs::path(PL.csv).stem().string() + ".svg") : fs::path(PL.out);
      write_file(out, emit_svg_lines(read_file(PL.csv), st));
      std::cout << out.string() << "\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    set_threads(g.threads);
    return action ? action() : 1;
  } catch (const kpat::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
