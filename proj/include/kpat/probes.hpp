#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "kpat/io.hpp"
#include "kpat/models.hpp"
#include "kpat/numerics.hpp"
#include "kpat/problems.hpp"
#include "kpat/theory.hpp"

namespace kpat {

/// Mean squared gradient norm of one parameter group over R initializations.
struct GradNormEstimate {
  Group group = Group::First;
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t draws = 0;
  bool exact = true;  // population gradient computed by enumeration

  double upper(double sigmas = 3.0) const { return mean + sigmas * std_error; }
};

struct GradNormProbe {
  GradNormEstimate first;
  GradNormEstimate readout;
};

struct ProbeConfig {
  Arch arch = Arch::Fcn;
  FcnInit fcn_init = FcnInit::gaussian(1.0);
  Activation activation = Activation::tanh();
  std::size_t neurons = 8;
  unsigned window = 1;  // kernel width for CNN/LCN probes
  std::size_t draws = 100;
  std::uint64_t seed = 0;
  std::optional<std::size_t> mc_samples;  // Monte Carlo over D instead of enumeration
};

namespace detail {

inline GradNormEstimate summarize(Group g, const std::vector<double>& values, bool exact) {
  GradNormEstimate e{g, 0.0, 0.0, values.size(), exact};
  for (double v : values) e.mean += v;
  e.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - e.mean) * (v - e.mean);
    e.std_error = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  }
  return e;
}

template <ModelParams P>
std::pair<double, double> squared_grad_norms(const P& p, const WindowScheme& s, const Activation& act,
                                             const CubeSource& cube, const std::optional<std::size_t>& mc,
                                             Rng& rng) {
  LossGrad<P> lg;
  if (mc) {
    Batch b{Matrix(*mc, cube.dim()), Vector(*mc), Vector::Constant(*mc, 1.0 / static_cast<double>(*mc))};
    for (std::size_t r = 0; r < *mc; ++r) {
      const auto m = static_cast<std::uint32_t>(rng.below(cube.size()));
      for (unsigned i = 0; i < cube.dim(); ++i) b.inputs((Eigen::Index)r, i) = ((m >> i) & 1u) ? -1.0 : 1.0;
      b.labels[(Eigen::Index)r] = cube.labels()[m];
    }
    lg = loss_grad(p, s, act, b);
  } else {
    lg = evaluate_exact(p, s, act, cube);
  }
  return {squared_norm(lg.grad, Group::First), squared_norm(lg.grad, Group::Readout)};
}

}  // namespace detail

/// E over initializations of ||dL/dW||^2 and ||dL/du||^2 at initialization,
/// each draw using the exact population gradient (unless mc_samples is set).
/// Draw d uses the stream Rng(seed).split(d); aggregation is in draw order.
inline GradNormProbe grad_norm_at_init(const ProbeConfig& cfg, const Target& target) {
  cfg.activation.require_theory_safe("grad_norm_at_init");
  if (cfg.draws < 1) throw ValidationError("grad_norm_at_init: need at least one draw");
  const unsigned n = dimension(target);
  const CubeSource cube(target);
  const Rng root(cfg.seed);
  std::vector<double> first(cfg.draws), readout(cfg.draws);

  parallel_for(cfg.draws, [&](std::size_t d) {
    Rng rng = root.split(d);
    std::pair<double, double> norms;
    switch (cfg.arch) {
      case Arch::Fcn: {
        const WindowScheme s{n, n, 1};
        const auto p = init_fcn_perm_invariant(rng, cfg.neurons, n, cfg.fcn_init, cfg.activation.bound());
        norms = detail::squared_grad_norms(p, s, cfg.activation, cube, cfg.mc_samples, rng);
        break;
      }
      case Arch::Cnn: {
        const auto s = WindowScheme::boolean(n, cfg.window);
        const auto p = init_cnn_theorem(rng, cfg.neurons, cfg.window, s.positions());
        norms = detail::squared_grad_norms(p, s, cfg.activation, cube, cfg.mc_samples, rng);
        break;
      }
      case Arch::Lcn: {
        const auto s = WindowScheme::boolean(n, cfg.window);
        const auto p = init_lcn_theorem(rng, cfg.neurons, cfg.window, s.positions());
        norms = detail::squared_grad_norms(p, s, cfg.activation, cube, cfg.mc_samples, rng);
        break;
      }
    }
    first[d] = norms.first;
    readout[d] = norms.second;
  });
  const bool exact = !cfg.mc_samples.has_value();
  return {detail::summarize(Group::First, first, exact), detail::summarize(Group::Readout, readout, exact)};
}

/// Spectrum of g_j(x) = x_j u_i sigma'(<w, x> + b_i) over the uniform cube.
struct GradientSpectrum {
  FourierSpectrum spectrum;
  double squared_norm = 0.0;  // ||g_j||_D^2 computed directly from the table
};

inline GradientSpectrum gradient_fourier_spectrum(const Vector& w, double u_i, double b_i, unsigned j,
                                                  const Activation& act) {
  const auto n = static_cast<unsigned>(w.size());
  if (n > 20) throw CapacityError("gradient_fourier_spectrum: n <= 20");
  if (j < 1 || j > n) throw ValidationError("gradient_fourier_spectrum: j outside [n]");
  std::vector<double> table(std::size_t{1} << n);
  for (std::uint32_t m = 0; m < table.size(); ++m) {
    double pre = b_i;
    for (unsigned t = 0; t < n; ++t) pre += ((m >> t) & 1u) ? -w[t] : w[t];
    const double xj = ((m >> (j - 1)) & 1u) ? -1.0 : 1.0;
    table[m] = xj * u_i * act.deriv(pre);
  }
  return {wht(table), squared_norm_uniform(table)};
}

struct DecayRow {
  unsigned k = 0;
  Thm2Bounds bounds{};
  GradNormProbe measured;

  bool within(double sigmas = 3.0) const {
    return measured.first.mean <= bounds.first_layer + sigmas * measured.first.std_error &&
           measured.readout.mean <= bounds.readout + sigmas * measured.readout.std_error;
  }
};

/// Permutation-invariant FCN gradient norms at initialization against the
/// closed-form bounds, one row per k, target chi_{1..k}.
inline std::vector<DecayRow> hardness_decay_sweep(unsigned n, std::size_t q, const Activation& act,
                                                  const std::vector<unsigned>& k_list, std::size_t draws,
                                                  std::uint64_t seed, FcnInit init) {
  std::vector<DecayRow> rows;
  for (unsigned k : k_list) {
    ProbeConfig cfg;
    cfg.arch = Arch::Fcn;
    cfg.fcn_init = init;
    cfg.activation = act;
    cfg.neurons = q;
    cfg.draws = draws;
    cfg.seed = seed;
    rows.push_back({k, thm2_bounds(n, k, static_cast<double>(q), act.bound()),
                    grad_norm_at_init(cfg, Parity{n, window_subset(1, k)})});
  }
  return rows;
}

inline CsvTable decay_table(const std::vector<DecayRow>& rows) {
  CsvTable t({"k", "first_layer_bound", "first_layer_mean", "first_layer_se", "readout_bound", "readout_mean",
              "readout_se", "draws", "within_3se"});
  for (const auto& r : rows)
    t.add_row({std::to_string(r.k), full_precision(r.bounds.first_layer), full_precision(r.measured.first.mean),
               full_precision(r.measured.first.std_error), full_precision(r.bounds.readout),
               full_precision(r.measured.readout.mean), full_precision(r.measured.readout.std_error),
               std::to_string(r.measured.first.draws), r.within() ? "true" : "false"});
  return t;
}

}  // namespace kpat
