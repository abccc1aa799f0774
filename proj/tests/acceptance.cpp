// Acceptance run: one PASS/FAIL line per criterion. Every study goes through
// the CLI twice (--threads 1 and --threads 2) and the result files of the
// two runs are compared byte for byte for the determinism criterion.
//
// A criterion that does not hold prints FAIL. The exit status is nonzero only
// when the harness itself breaks (a crash, an unexpected exit code, a missing
// result file).

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpat/io.hpp"

namespace fs = std::filesystem;

namespace {

struct HarnessError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Table {
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;

  static Table load(const fs::path& p) {
    if (!fs::exists(p)) throw HarnessError("missing result file " + p.string());
    const auto raw = kpat::parse_csv(kpat::read_file(p));
    if (raw.empty()) throw HarnessError("empty table " + p.string());
    Table t{raw.front(), {}};
    for (std::size_t i = 1; i < raw.size(); ++i) {
      std::map<std::string, std::string> r;
      for (std::size_t j = 0; j < t.header.size() && j < raw[i].size(); ++j) r[t.header[j]] = raw[i][j];
      t.rows.push_back(std::move(r));
    }
    return t;
  }
};

double num(const std::map<std::string, std::string>& row, const std::string& key) {
  const auto it = row.find(key);
  if (it == row.end() || it->second.empty()) throw HarnessError("missing column " + key);
  return std::stod(it->second);
}

double binom(unsigned n, unsigned k) {
  double r = 1.0;
  for (unsigned i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

struct CliRun {
  int code = -1;
  double seconds = 0.0;
  std::string out;
};

fs::path g_root;

CliRun cli(const std::string& dir, unsigned threads, const std::string& args) {
  const auto out_dir = g_root / dir / ("t" + std::to_string(threads));
  fs::create_directories(out_dir);
  const auto log = out_dir.parent_path() / ("log_t" + std::to_string(threads) + ".txt");
  const std::string cmd = "'" KPAT_CLI_PATH "' --threads " + std::to_string(threads) + " --out-dir '" +
                          out_dir.string() + "' " + args + " > '" + log.string() + "' 2>&1";
  const auto t0 = std::chrono::steady_clock::now();
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = kpat::read_file(log);
  if (r.code != 0 && r.code != 2) throw HarnessError("kpat " + args + " exited " + std::to_string(r.code) + ":\n" + r.out);
  return r;
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> names;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) names.insert(fs::relative(e.path(), dir).string());
  return names;
}

// Empty string when the t1 and t2 trees hold the same files with the same bytes.
std::string compare_trees(const std::string& dir) {
  const auto a = g_root / dir / "t1", b = g_root / dir / "t2";
  const auto la = listing(a), lb = listing(b);
  if (la != lb) return dir + ": file sets differ";
  if (la.empty()) return dir + ": no result files";
  for (const auto& f : la)
    if (kpat::read_file(a / f) != kpat::read_file(b / f)) return dir + "/" + f + " differs";
  return "";
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::vector<std::string> g_dirs;  // every study directory, for the determinism check

// Runs a study at one and two threads; returns the one-thread run.
CliRun study(const std::string& dir, const std::string& args) {
  g_dirs.push_back(dir);
  const auto r = cli(dir, 1, args);
  cli(dir, 2, args);
  return r;
}

fs::path t1(const std::string& dir) { return g_root / dir / "t1"; }

void report(int id, const std::string& title, const Verdict& v) {
  std::cout << (v.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << title;
  if (!v.detail.empty()) std::cout << " (" << v.detail << ")";
  std::cout << std::endl;
}

// ---------------------------------------------------------------------------

Verdict construct() {
  Verdict v;
  double seconds = 0.0;
  for (unsigned k : {1u, 2u, 3u}) {
    const std::string dir = "construct_k" + std::to_string(k);
    const auto r = study(dir, "construct --n 12 --k " + std::to_string(k) + " --trials 50 --delta 0.05");
    seconds += r.seconds;
    const auto t = Table::load(t1(dir) / "construct.csv");
    v.require(t.rows.size() == 50, "k=" + std::to_string(k) + " row count");
    std::size_t ok = 0;
    for (const auto& row : t.rows) {
      if (row.at("success") != "true") continue;
      const double q = num(row, "q");
      const bool exact = num(row, "loss") <= 1e-12 && num(row, "accuracy") == 1.0 &&
                         num(row, "norm") <= std::ldexp(1.0, (int)k + 1) * k / std::sqrt(q);
      v.require(exact, "k=" + std::to_string(k) + " trial " + row.at("trial") + " not exact");
      ok += exact;
    }
    v.require(ok >= 45, "k=" + std::to_string(k) + " successes " + std::to_string(ok) + "/50");
    v.require(r.code == 0, "k=" + std::to_string(k) + " study reported failure");
  }
  v.require(seconds < 60.0, "runtime " + std::to_string(seconds) + " s");
  return v;
}

Verdict hardness() {
  Verdict v;
  const auto r = study("hardness", "verify hardness");
  const auto t = Table::load(t1("hardness") / "hardness.csv");
  // Closed forms: W bound q n min(C(n-1,k)^-1, C(n-1,k-1)^-1), u bound c^2 q / C(n,k), c = 1.
  struct Case {
    unsigned n, k, q;
  };
  std::size_t seen = 0;
  for (const Case c : {Case{10, 5, 8}, Case{16, 8, 64}})
    for (const std::string init : {"gaussian", "rademacher"}) {
      for (const auto& row : t.rows) {
        if (num(row, "n") != c.n || num(row, "k") != c.k || num(row, "q") != c.q || row.at("init") != init) continue;
        ++seen;
        const double wb = c.q * c.n / std::max(binom(c.n - 1, c.k), binom(c.n - 1, c.k - 1));
        const double ub = c.q / binom(c.n, c.k);
        const std::string tag = "(" + std::to_string(c.n) + "," + std::to_string(c.k) + "," + std::to_string(c.q) +
                                ") " + init;
        v.require(std::fabs(num(row, "first_layer_bound") - wb) <= 1e-12 * wb, tag + " W bound value");
        v.require(std::fabs(num(row, "readout_bound") - ub) <= 1e-12 * ub, tag + " u bound value");
        v.require(num(row, "draws") == 100, tag + " draws");
        v.require(num(row, "first_layer_mean") <= wb + 3 * num(row, "first_layer_se"), tag + " W exceeds bound");
        v.require(num(row, "readout_mean") <= ub + 3 * num(row, "readout_se"), tag + " u exceeds bound");
      }
    }
  // Quoted value of the first-layer bound at (16,8,64).
  v.require(std::fabs(64.0 * 16 / binom(15, 8) - 0.15913) < 5e-6, "quoted W value");
  v.require(seen == 4, "expected 4 cases, found " + std::to_string(seen));
  v.require(r.code == 0, "study reported failure");
  v.require(r.seconds < 600.0, "runtime " + std::to_string(r.seconds) + " s");
  return v;
}

Verdict cnn_signal() {
  Verdict v;
  const auto r = study("cnn_signal", "verify cnn-signal");
  const auto t = Table::load(t1("cnn_signal") / "cnn_signal.csv");
  v.require(!t.rows.empty(), "no rows");
  const double q = 64;  // study default width
  for (const auto& row : t.rows) {
    const double k = num(row, "k");
    const double expected = q / std::pow(k * std::ldexp(1.0, (int)k), 2);
    v.require(std::fabs(num(row, "measured") - expected) <= 1e-10, "k=" + row.at("k") + " trial " + row.at("trial"));
    v.require(std::fabs(num(row, "disjoint_max")) <= 1e-10, "disjoint window gradient, trial " + row.at("trial"));
  }
  v.require(r.code == 0, "study reported failure");
  return v;
}

Verdict perm_identity() {
  Verdict v;
  const auto r = study("perm_identity", "verify perm-identity");
  const auto t = Table::load(t1("perm_identity") / "perm_identity.csv");
  v.require(t.rows.size() == 100, "row count " + std::to_string(t.rows.size()));
  for (const auto& row : t.rows)
    v.require(std::fabs(num(row, "difference")) <= 1e-10, "trial " + row.at("trial"));
  v.require(kpat::read_file(t1("perm_identity") / "perm_identity.meta.json").find("\"n\": 10") != std::string::npos,
            "n is not 10");
  v.require(r.code == 0, "study reported failure");
  return v;
}

Verdict parseval() {
  Verdict v;
  const auto r = study("parseval", "verify parseval");
  const auto t = Table::load(t1("parseval") / "parseval.csv");
  v.require(t.rows.size() == 100, "row count");
  for (const auto& row : t.rows)
    v.require(num(row, "parseval_error") <= 1e-9 && num(row, "roundtrip_error") <= 1e-9, "trial " + row.at("trial"));
  v.require(r.code == 0, "study reported failure");
  return v;
}

Verdict drift() {
  Verdict v;
  const auto r = study("drift", "verify drift");
  const auto t = Table::load(t1("drift") / "drift.csv");
  const double eta = 0.5, q = 128, n = 12, k = 3, c = 1;
  std::set<std::string> runs, loss_checked;
  std::size_t steps = 0;
  for (const auto& row : t.rows) {
    runs.insert(row.at("run"));
    const double s = num(row, "step");
    const auto& kind = row.at("kind");
    if (kind == "readout") {
      ++steps;
      v.require(num(row, "measured") <= c * eta * s * std::sqrt(q), "readout drift, run " + row.at("run"));
    } else if (kind == "first_layer") {
      v.require(num(row, "measured") <= c * eta * eta * s * s * n * std::sqrt(q * k), "first-layer drift");
    } else if (kind == "loss_diff") {
      v.require(s == 500, "loss check not at T");
      v.require(!row.at("measured").empty() && num(row, "measured") <= num(row, "bound"),
                "loss difference, run " + row.at("run"));
      loss_checked.insert(row.at("run"));
    }
  }
  v.require(runs.size() == 10 && loss_checked.size() == 10, "expected 10 runs");
  v.require(steps == 10 * 501, "expected every step 0..500 recorded");
  v.require(r.code == 0, "study reported failure");
  return v;
}

Verdict ogd() {
  Verdict v;
  const auto r = study("ogd", "verify ogd");
  const auto t = Table::load(t1("ogd") / "ogd.csv");
  v.require(t.rows.size() == 10, "row count");
  for (const auto& row : t.rows)
    v.require(row.at("ok") == "true" && num(row, "lhs") <= num(row, "rhs"), "run " + row.at("run"));
  v.require(r.code == 0, "study reported failure");
  return v;
}

Verdict separation(const fs::path& source) {
  Verdict v;
  const auto r = study("separation", "verify separation --config '" + (source / "configs/separation.toml").string() + "'");
  const auto t = Table::load(t1("separation") / "separation.csv");
  std::map<std::string, std::map<std::string, double>> acc;  // seed -> arch -> final accuracy
  for (const auto& row : t.rows) {
    v.require(num(row, "final_step") <= 2000, "budget exceeded");
    acc[row.at("seed")][row.at("arch")] = num(row, "final_accuracy");
  }
  std::size_t cnn = 0, lcn = 0, fcn_lower = 0;
  for (auto& [seed, a] : acc) {
    cnn += a.at("cnn") >= 0.99;
    lcn += a.at("lcn") >= 0.99;
    fcn_lower += a.at("fcn") < std::min(a.at("cnn"), a.at("lcn"));
  }
  const auto of = [&](std::size_t x) { return std::to_string(x) + "/" + std::to_string(acc.size()); };
  v.require(acc.size() == 10, "expected 10 seeds");
  v.require(cnn >= 9, "cnn >= 0.99 on " + of(cnn));
  v.require(lcn >= 9, "lcn >= 0.99 on " + of(lcn));
  v.require(fcn_lower >= 8, "fcn strictly lower on " + of(fcn_lower));
  v.require(r.seconds < 900.0, "runtime " + std::to_string(r.seconds) + " s");
  if (v.pass) v.detail = "cnn " + of(cnn) + ", lcn " + of(lcn) + ", fcn lower " + of(fcn_lower);
  return v;
}

Verdict gradcheck() {
  Verdict v;
  const auto r = study("gradcheck", "verify gradcheck");
  const auto t = Table::load(t1("gradcheck") / "gradcheck.csv");
  std::map<std::string, std::size_t> per_arch;
  for (const auto& row : t.rows) {
    ++per_arch[row.at("arch")];
    v.require(num(row, "relative_error") <= 1e-6, row.at("arch") + " config " + row.at("config"));
  }
  for (const std::string a : {"cnn", "lcn", "fcn"}) v.require(per_arch[a] == 50, a + " config count");
  v.require(r.code == 0, "study reported failure");
  return v;
}

bool mnist_present() {
  const char* env = std::getenv("KPAT_MNIST_DIR");
  if (!env) return false;
  for (const char* f : {"train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz", "t10k-images-idx3-ubyte.gz",
                        "t10k-labels-idx1-ubyte.gz"})
    if (!fs::exists(fs::path(env) / f)) return false;
  return true;
}

// seed -> arch -> accuracy at the last epoch
std::map<std::string, std::map<std::string, double>> final_accuracy(const Table& t, double epochs) {
  std::map<std::string, std::map<std::string, double>> acc;
  for (const auto& row : t.rows)
    if (num(row, "epoch") == epochs) acc[row.at("seed")][row.at("arch")] = num(row, "test_accuracy");
  return acc;
}

Verdict mnist(const fs::path& source) {
  Verdict v;
  const auto central =
      study("mnist_central", "experiment run --config '" + (source / "configs/mnist_central.toml").string() + "'");
  const auto ends =
      study("mnist_ends", "experiment run --config '" + (source / "configs/mnist_ends_middle.toml").string() + "'");
  std::string numbers;
  const auto fmt = [](double x) { return std::to_string(x).substr(0, 5); };

  const auto c = final_accuracy(Table::load(t1("mnist_central") / "mnist_central.csv"), 10);
  std::size_t wins = 0;
  for (auto& [seed, a] : c) {
    wins += a.at("cnn") >= a.at("fcn") + 0.05 && a.at("lcn") >= a.at("fcn") + 0.05;
    numbers += " s" + seed + " fcn/cnn/lcn " + fmt(a.at("fcn")) + "/" + fmt(a.at("cnn")) + "/" + fmt(a.at("lcn"));
  }
  v.require(c.size() == 3, "central: expected 3 seeds");
  v.require(wins * 3 >= 2 * c.size(), "central: cnn and lcn ahead by 5 points on " + std::to_string(wins) + "/" +
                                          std::to_string(c.size()) + " seeds");

  const auto e = final_accuracy(Table::load(t1("mnist_ends") / "mnist_ends-middle.csv"), 10);
  std::size_t fcn_wins = 0;
  for (auto& [seed, a] : e) {
    fcn_wins += a.at("fcn") >= a.at("cnn") + 0.10 && a.at("fcn") >= a.at("lcn") + 0.10;
    numbers += " | ends s" + seed + " " + fmt(a.at("fcn")) + "/" + fmt(a.at("cnn")) + "/" + fmt(a.at("lcn"));
  }
  v.require(e.size() == 3, "ends-middle: expected 3 seeds");
  v.require(fcn_wins * 3 >= 2 * e.size(), "ends-middle: fcn ahead by 10 points on " + std::to_string(fcn_wins) + "/" +
                                              std::to_string(e.size()) + " seeds");
  v.require(central.seconds + ends.seconds < 1800.0,
            "runtime " + std::to_string(central.seconds + ends.seconds) + " s");
  v.detail += (v.detail.empty() ? "" : ";") + numbers;
  return v;
}

}  // namespace

int main() {
  const fs::path source = KPAT_SOURCE_DIR;
  g_root = fs::current_path() / "acceptance_results";
  fs::remove_all(g_root);
  fs::create_directories(g_root);
  int passed = 0, total = 0;
  const auto record = [&](int id, const std::string& title, const auto& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const HarnessError&) {
      throw;
    } catch (const std::exception& e) {
      throw HarnessError("criterion " + std::to_string(id) + ": " + e.what());
    }
    report(id, title, v);
    ++total;
    passed += v.pass;
  };
  try {
    record(1, "planted readout exact at n=12, k=1..3", construct);
    record(2, "FCN gradient norms within the bounds at (10,5,8) and (16,8,64)", hardness);
    record(3, "CNN readout gradient closed form at the theorem init", cnn_signal);
    record(4, "permutation identity on 100 instances at n=10", perm_identity);
    record(5, "Parseval and Walsh-Hadamard round trip at n=12", parseval);
    record(6, "readout, first-layer and loss drift bounds", drift);
    record(7, "OGD regret at every prefix, frozen first layer", ogd);
    record(8, "CNN/LCN learn 3-patterns at n=12, FCN strictly lower", [&] { return separation(source); });
    record(9, "analytic gradients match finite differences", gradcheck);
    if (mnist_present()) {
      record(10, "MNIST sequences: central rule favors CNN/LCN, ends-middle favors FCN", [&] { return mnist(source); });
    } else {
      std::cout << "SKIP  criterion 10: MNIST sequences (no dataset under KPAT_MNIST_DIR)" << std::endl;
    }
    Verdict det;
    for (const auto& d : g_dirs) {
      const auto diff = compare_trees(d);
      det.require(diff.empty(), diff);
    }
    if (det.pass) det.detail = std::to_string(g_dirs.size()) + " studies identical";
    report(11, "result files byte-identical at --threads 1 and 2", det);
    ++total;
    passed += det.pass;
  } catch (const HarnessError& e) {
    std::cout << "ERROR " << e.what() << std::endl;
    return 1;
  }
  std::cout << passed << "/" << total << " criteria passed" << std::endl;
  return 0;
}
