#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kpat/error.hpp"
#include "kpat/io.hpp"
#include "kpat/models.hpp"
#include "kpat/numerics.hpp"
#include "kpat/problems.hpp"
#include "kpat/training.hpp"

namespace kpat {

/// A theoretical bound next to what was measured. With a measurement,
/// pass <=> measured <= theoretical + tolerance.
struct BoundReport {
  std::string name;
  std::vector<std::pair<std::string, double>> inputs;
  double theoretical = 0.0;
  std::optional<double> measured;
  double tolerance = 0.0;

  double margin() const { return measured ? theoretical - *measured : theoretical; }
  bool pass() const { return !measured || *measured <= theoretical + tolerance; }

  std::string text() const {
    std::string s = name + ":";
    for (const auto& [k, v] : inputs) s += " " + k + "=" + display(v);
    s += " bound=" + display(theoretical);
    if (measured) s += " measured=" + display(*measured) + " margin=" + display(margin());
    s += pass() ? " PASS" : " FAIL";
    return s;
  }
};

inline CsvTable bound_reports_csv(const std::vector<BoundReport>& reports) {
  CsvTable t({"name", "inputs", "theoretical", "measured", "margin", "pass"});
  for (const auto& r : reports) {
    std::string in;
    for (const auto& [k, v] : r.inputs) in += (in.empty() ? "" : ";") + k + "=" + full_precision(v);
    t.add_row({r.name, in, full_precision(r.theoretical), r.measured ? full_precision(*r.measured) : "",
               full_precision(r.margin()), r.pass() ? "true" : "false"});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Planted readout for a theorem initialization
//
// With kernel rows in {+-1/k}^k and bias 1/k - 1, neuron i fires with value
// 1/k exactly on the window pattern z = sign(w_i) and is 0 elsewhere. Putting
// k g(z) / |J_z| on every neuron of J_z = { i : sign(w_i) = z } reproduces g.

class InsufficientCoverage : public Error {
 public:
  InsufficientCoverage(std::uint32_t pattern, unsigned k)
      : Error("no neuron matches window pattern " + std::to_string(pattern) + " (k=" + std::to_string(k) + ")"),
        pattern_(pattern) {}
  std::uint32_t pattern() const { return pattern_; }

 private:
  std::uint32_t pattern_;
};

struct PlantedReadout {
  Matrix readout;                   // positions x q; only row jstar-1 is non-zero
  double norm = 0.0;                // ||u*^(jstar)||
  std::vector<std::size_t> coverage;  // |J_z| per pattern z
};

/// Pattern index of sign(w) under the cube convention.
inline std::uint32_t sign_pattern(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::uint32_t z = 0;
  for (Eigen::Index t = 0; t < row.size(); ++t)
    if (row[t] < 0.0) z |= 1u << t;
  return z;
}

inline void require_theorem_init(const Matrix& kernel, const Vector& bias, unsigned k) {
  const double a = 1.0 / k;
  if (static_cast<unsigned>(kernel.cols()) != k || bias.size() != kernel.rows())
    throw DimensionError("kernel must be q x k with a length-q bias");
  for (Eigen::Index i = 0; i < kernel.size(); ++i)
    if (std::fabs(kernel.data()[i]) != a) throw ValidationError("kernel entries must be exactly +-1/k");
  for (Eigen::Index i = 0; i < bias.size(); ++i)
    if (bias[i] != a - 1.0) throw ValidationError("bias entries must be exactly 1/k - 1");
}

inline PlantedReadout construct_ustar(const Matrix& kernel, const Vector& bias, const KPattern& f,
                                      std::size_t positions) {
  f.validate();
  require_theorem_init(kernel, bias, f.k);
  if (positions != f.n - f.k + 1) throw DimensionError("construct_ustar: position count must be n-k+1");
  const std::size_t Z = std::size_t{1} << f.k;
  const auto q = kernel.rows();

  PlantedReadout out{Matrix::Zero((Eigen::Index)positions, q), 0.0, std::vector<std::size_t>(Z, 0)};
  std::vector<std::uint32_t> pattern_of(static_cast<std::size_t>(q));
  for (Eigen::Index i = 0; i < q; ++i) {
    pattern_of[(size_t)i] = sign_pattern(kernel.row(i));
    ++out.coverage[pattern_of[(size_t)i]];
  }
  for (std::uint32_t z = 0; z < Z; ++z)
    if (out.coverage[z] == 0) throw InsufficientCoverage(z, f.k);

  const auto row = static_cast<Eigen::Index>(f.jstar - 1);
  for (Eigen::Index i = 0; i < q; ++i) {
    const std::uint32_t z = pattern_of[(size_t)i];
    out.readout(row, i) = static_cast<double>(f.k) / static_cast<double>(out.coverage[z]) * f.g[z];
  }
  out.norm = out.readout.row(row).norm();
  return out;
}

/// 2^{k+1} k / sqrt(q).
inline double ustar_norm_bound(unsigned k, double q) { return std::ldexp(1.0, (int)k + 1) * k / std::sqrt(q); }

/// ceil(2^{k+3} ln(2^k / delta)) + 1, natural log.
inline std::size_t q_threshold(unsigned k, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ValidationError("q_threshold: delta must lie in (0, 1)");
  const double x = std::ldexp(1.0, (int)k + 3) * (k * std::numbers::ln2 - std::log(delta));
  return static_cast<std::size_t>(std::ceil(x)) + 1;
}

// ---------------------------------------------------------------------------
// Closed-form bounds

struct Thm1Bound {
  double width_term;     // 2 c n^2 k^2 2^k / q
  double readout_term;   // 2 (2^k k)^2 / sqrt(q n)
  double horizon_term;   // c^2 n^1.5 sqrt(q) / T
  double total() const { return width_term + readout_term + horizon_term; }
};

inline Thm1Bound thm1_bound(double n, double k, double q, double T, double c) {
  if (!(n > 0 && k > 0 && q > 0 && T > 0 && c > 0)) throw ValidationError("thm1_bound: arguments must be positive");
  const double two_k = std::pow(2.0, k);
  return {2.0 * c * n * n * k * k * two_k / q, 2.0 * (two_k * k) * (two_k * k) / std::sqrt(q * n),
          c * c * std::pow(n, 1.5) * std::sqrt(q) / T};
}

struct Thm2Bounds {
  double first_layer;  // q n min{ C(n-1,k)^-1, C(n-1,k-1)^-1 }
  double readout;      // c^2 q C(n,k)^-1
};

inline Thm2Bounds thm2_bounds(unsigned n, unsigned k, double q, double c) {
  if (k < 1 || k > n) throw ValidationError("thm2_bounds: need 1 <= k <= n");
  double inv = inverse_binomial(n - 1, k - 1);
  if (k <= n - 1) inv = std::min(inv, inverse_binomial(n - 1, k));
  return {q * n * inv, c * c * q * inverse_binomial(n, k)};
}

struct DriftBounds {
  double readout;      // c eta t sqrt(q)
  double first_layer;  // c eta^2 t^2 n sqrt(q k)
};

inline DriftBounds drift_bounds(double t, double eta, double q, double n, double k, double c) {
  return {c * eta * t * std::sqrt(q), c * eta * eta * t * t * n * std::sqrt(q * k)};
}

/// c eta^2 t^2 n k sqrt(q) * sum_j ||u*^(j)||.
inline double loss_diff_bound(double t, double eta, double q, double n, double k, double c,
                              const std::vector<double>& ustar_norms) {
  double s = 0.0;
  for (double v : ustar_norms) s += v;
  return c * eta * eta * t * t * n * k * std::sqrt(q) * s;
}

struct CorollaryParams {
  double neurons;
  double steps;
  double sample_size;
};

/// Orders of growth with an explicit constant C:
///   q = C e^-2 n^3 ln^2 n, T = C e^-2 n^3 ln n, m = C e^-2 n k q ln(n k q / delta).
inline CorollaryParams corollary_params(double n, double eps, double C, double k = 0.0, double delta = 0.05) {
  if (!(n > 1 && eps > 0 && C > 0)) throw ValidationError("corollary_params: need n > 1, eps > 0, C > 0");
  if (!(delta > 0 && delta < 1)) throw ValidationError("corollary_params: delta must lie in (0, 1)");
  if (k <= 0) k = std::ceil(std::log2(n));
  const double ln_n = std::log(n);
  const double base = C * n * n * n / (eps * eps);
  const double q = base * ln_n * ln_n;
  return {q, base * ln_n, C / (eps * eps) * n * k * q * std::log(n * k * q / delta)};
}

// ---------------------------------------------------------------------------
// Online gradient descent regret check
//
//   (1/T) sum f_t(theta_t) <= (1/T) sum f_t(theta*) + ||theta*||^2 / (2 eta T)
//                            + ||theta_1|| avg ||g_t|| + eta avg ||g_t||^2

struct OgdTrace {
  std::vector<double> iterate_loss;     // f_t(theta_t)
  std::vector<double> comparator_loss;  // f_t(theta*)
  std::vector<double> grad_norm;        // ||grad f_t(theta_t)||
  double theta1_norm = 0.0;
  double comparator_norm = 0.0;
  double eta = 0.0;
};

inline BoundReport verify_ogd_regret(const OgdTrace& tr, double tolerance = 1e-12) {
  const std::size_t T = tr.iterate_loss.size();
  if (T == 0 || tr.comparator_loss.size() != T || tr.grad_norm.size() != T)
    throw ValidationError("verify_ogd_regret: trace vectors must be non-empty and equally long");
  if (!(tr.eta > 0.0)) throw ValidationError("verify_ogd_regret: eta must be positive");
  double sum_f = 0.0, sum_star = 0.0, sum_g = 0.0, sum_g2 = 0.0;
  double worst_gap = -std::numeric_limits<double>::infinity();  // lhs - rhs, maximized
  double worst_rhs = 0.0, worst_lhs = 0.0;
  std::size_t worst_T = 1;
  for (std::size_t t = 0; t < T; ++t) {
    sum_f += tr.iterate_loss[t];
    sum_star += tr.comparator_loss[t];
    sum_g += tr.grad_norm[t];
    sum_g2 += tr.grad_norm[t] * tr.grad_norm[t];
    const double len = static_cast<double>(t + 1);
    const double lhs = sum_f / len;
    const double rhs = sum_star / len + tr.comparator_norm * tr.comparator_norm / (2.0 * tr.eta * len) +
                       tr.theta1_norm * sum_g / len + tr.eta * sum_g2 / len;
    if (lhs - rhs > worst_gap) {
      worst_gap = lhs - rhs;
      worst_lhs = lhs;
      worst_rhs = rhs;
      worst_T = t + 1;
    }
  }
  BoundReport r{"ogd_regret",
                {{"T", (double)T}, {"eta", tr.eta}, {"worst_prefix", (double)worst_T}},
                worst_rhs,
                worst_lhs,
                tolerance};
  return r;
}

/// OGD trace over the readout from a stride-1 trajectory with comparator
/// losses. f_t(u) = L(u, W^(t)) is convex in u whatever the first layer does;
/// the iterates are the readouts at steps 0..T-1.
inline OgdTrace ogd_trace_from(const Trajectory& traj, double theta1_norm, double comparator_norm) {
  OgdTrace tr;
  tr.theta1_norm = theta1_norm;
  tr.comparator_norm = comparator_norm;
  if (traj.records.size() < 2) throw ValidationError("ogd trace needs at least two records");
  tr.eta = traj.records.front().eta;
  for (std::size_t i = 0; i + 1 < traj.records.size(); ++i) {
    const auto& r = traj.records[i];
    if (r.step != i) throw ValidationError("ogd trace needs a stride-1 trajectory");
    if (!r.comparator_loss) throw ValidationError("ogd trace needs comparator losses");
    tr.iterate_loss.push_back(r.loss);
    tr.comparator_loss.push_back(*r.comparator_loss);
    tr.grad_norm.push_back(r.grad_readout_norm);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Permutation identity behind the fully-connected lower bound:
//   d/dw_j L_{chi_pi(I)}(h) = d/dw_j L_{chi_I}(pi(h))  for pi(j) = j,
//   d/du   L_{chi_pi(I)}(h) = d/du   L_{chi_I}(pi(h))  for every pi,
// where pi(h) uses the relabeled first-layer weights pi(w^(i)).

inline FcnParams permute_fcn(const FcnParams& p, const Permutation& pi) {
  if (pi.size() != static_cast<std::size_t>(p.weights.cols())) throw DimensionError("permute_fcn: size mismatch");
  FcnParams out = p;
  for (Eigen::Index i = 0; i < p.weights.rows(); ++i)
    out.weights.row(i) = apply_permutation(pi, Vector(p.weights.row(i).transpose())).transpose();
  return out;
}

inline BoundReport verify_permutation_identity(const FcnParams& p, const Activation& act, std::uint32_t subset,
                                               unsigned j, const Permutation& pi, double tolerance = 1e-10) {
  const auto n = static_cast<unsigned>(p.weights.cols());
  if (n > 20) throw CapacityError("verify_permutation_identity: n <= 20");
  if (pi.size() != n) throw DimensionError("verify_permutation_identity: permutation size");
  if (j < 1 || j > n) throw ValidationError("verify_permutation_identity: j outside [n]");
  if (!pi.fixes(j)) throw ValidationError("verify_permutation_identity: pi must fix j");
  const WindowScheme s{n, n, 1};

  const CubeSource moved(Parity{n, permute_set(pi, subset)});
  const CubeSource base(Parity{n, subset});
  const auto lhs = evaluate(p, s, act, moved).grad;
  const auto rhs = evaluate(permute_fcn(p, pi), s, act, base).grad;

  double diff = (lhs.weights.col(j - 1) - rhs.weights.col(j - 1)).cwiseAbs().maxCoeff();
  diff = std::max(diff, (lhs.readout - rhs.readout).cwiseAbs().maxCoeff());
  return {"permutation_identity",
          {{"n", (double)n}, {"subset", (double)subset}, {"j", (double)j}},
          tolerance,
          diff,
          0.0};
}

}  // namespace kpat
