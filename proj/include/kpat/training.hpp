#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kpat/error.hpp"
#include "kpat/io.hpp"
#include "kpat/models.hpp"
#include "kpat/numerics.hpp"

namespace kpat {

inline constexpr double kDivergenceThreshold = 1e6;

/// Learning rate sqrt(n) / (sqrt(q) T).
inline double eta_theorem(double n, double q, double T) {
  if (!(n > 0 && q > 0 && T > 0)) throw ValidationError("eta_theorem: arguments must be positive");
  return std::sqrt(n) / (std::sqrt(q) * T);
}

// ---------------------------------------------------------------------------
// AdaDelta: E[g^2] <- rho E[g^2] + (1-rho) g^2
//           dx      = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
//           E[dx^2] <- rho E[dx^2] + (1-rho) dx^2

struct AdaDeltaState {
  std::vector<double> mean_sq_grad;
  std::vector<double> mean_sq_update;
};

inline void validate_adadelta(double rho, double eps) {
  if (!(rho > 0.0 && rho < 1.0)) throw ValidationError("AdaDelta: rho must lie in (0, 1)");
  if (!(eps > 0.0)) throw ValidationError("AdaDelta: epsilon must be positive");
}

/// In-place kernel over one contiguous block; writes the update into `delta`.
inline void adadelta_kernel(std::span<double> mean_sq_grad, std::span<double> mean_sq_update,
                            std::span<const double> grad, std::span<double> delta, double rho,
                            double eps) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    mean_sq_grad[i] = rho * mean_sq_grad[i] + (1.0 - rho) * g * g;
    const double dx = -std::sqrt(mean_sq_update[i] + eps) / std::sqrt(mean_sq_grad[i] + eps) * g;
    mean_sq_update[i] = rho * mean_sq_update[i] + (1.0 - rho) * dx * dx;
    delta[i] = dx;
  }
}

struct AdaDeltaStep {
  std::vector<double> update;
  AdaDeltaState state;
};

inline AdaDeltaStep adadelta_step(AdaDeltaState state, std::span<const double> grad, double rho,
                                  double eps) {
  validate_adadelta(rho, eps);
  if (state.mean_sq_grad.empty() && state.mean_sq_update.empty()) {
    state.mean_sq_grad.assign(grad.size(), 0.0);
    state.mean_sq_update.assign(grad.size(), 0.0);
  }
  if (state.mean_sq_grad.size() != grad.size() || state.mean_sq_update.size() != grad.size())
    throw DimensionError("adadelta_step: state size mismatch");
  std::vector<double> update(grad.size());
  adadelta_kernel(state.mean_sq_grad, state.mean_sq_update, grad, update, rho, eps);
  return {std::move(update), std::move(state)};
}

/// AdaDelta over every block of a parameter container.
template <ModelParams P>
class AdaDelta {
 public:
  AdaDelta(const P& like, double rho, double eps) : rho_(rho), eps_(eps) {
    validate_adadelta(rho, eps);
    for (const auto& b : like.blocks()) {
      grad_sq_.emplace_back(b.values.size(), 0.0);
      update_sq_.emplace_back(b.values.size(), 0.0);
    }
  }

  void apply(P& params, const P& grad, FrozenGroups frozen = {}) {
    auto pb = params.blocks();
    auto gb = grad.blocks();
    if (pb.size() != grad_sq_.size()) throw DimensionError("AdaDelta: block layout changed");
    std::vector<double> delta;
    for (std::size_t i = 0; i < pb.size(); ++i) {
      if (frozen.contains(pb[i].group)) continue;
      delta.resize(pb[i].values.size());
      adadelta_kernel(grad_sq_[i], update_sq_[i], gb[i].values, delta, rho_, eps_);
      for (std::size_t e = 0; e < delta.size(); ++e) pb[i].values[e] += delta[e];
    }
  }

 private:
  double rho_, eps_;
  std::vector<std::vector<double>> grad_sq_, update_sq_;
};

// ---------------------------------------------------------------------------

enum class BatchMode { PopulationExact, FullSample, Minibatch };
enum class OptimizerKind { Gd, AdaDelta };

inline std::string batch_mode_name(BatchMode m) {
  switch (m) {
    case BatchMode::PopulationExact: return "population-exact";
    case BatchMode::FullSample: return "full-sample";
    case BatchMode::Minibatch: return "minibatch";
  }
  return "?";
}

struct TrainConfig {
  std::size_t steps = 100;
  double eta = 0.1;
  bool use_eta_theorem = false;  // eta = sqrt(n)/(sqrt(q) T), overrides eta
  bool theorem_mode = false;     // rejects ReLU and freezes the bias
  BatchMode mode = BatchMode::PopulationExact;
  std::size_t minibatch = 32;
  OptimizerKind optimizer = OptimizerKind::Gd;
  double rho = 0.95;
  double adadelta_eps = 1e-6;
  FrozenGroups frozen;
  std::size_t record_stride = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1) throw ValidationError("TrainConfig: steps must be >= 1");
    if (!use_eta_theorem && !(eta >= 0.0)) throw ValidationError("TrainConfig: eta must be >= 0");
    if (mode == BatchMode::Minibatch && minibatch < 1) throw ValidationError("TrainConfig: minibatch >= 1");
    if (record_stride < 1) throw ValidationError("TrainConfig: record stride must be >= 1");
    if (optimizer == OptimizerKind::AdaDelta) validate_adadelta(rho, adadelta_eps);
  }
};

struct TrajectoryRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> readout_norms;  // ||u^(j,t)|| per position
  double first_layer_drift = 0.0;     // ||W^(t) - W^(0)||_F
  double grad_readout_norm = 0.0;
  double grad_first_norm = 0.0;
  double grad_bias_norm = 0.0;
  double eta = 0.0;
  std::optional<double> comparator_loss;  // loss of a fixed comparator readout at W^(t)
};

struct Trajectory {
  nlohmann::json meta;
  std::vector<TrajectoryRecord> records;

  /// JSON-Lines: one {"type":"meta"} line, then one {"type":"step"} line per record.
  std::string to_jsonl() const {
    std::string out;
    nlohmann::json m = meta;
    m["type"] = "meta";
    out += m.dump() + "\n";
    for (const auto& r : records) {
      nlohmann::json j{{"type", "step"},
                       {"step", r.step},
                       {"loss", r.loss},
                       {"accuracy", r.accuracy},
                       {"readout_norms", r.readout_norms},
                       {"first_layer_drift", r.first_layer_drift},
                       {"grad_readout_norm", r.grad_readout_norm},
                       {"grad_first_norm", r.grad_first_norm},
                       {"grad_bias_norm", r.grad_bias_norm},
                       {"eta", r.eta}};
      if (r.comparator_loss) j["comparator_loss"] = *r.comparator_loss;
      out += j.dump() + "\n";
    }
    return out;
  }

  static Trajectory from_jsonl(const std::string& text) {
    Trajectory t;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError("trajectory line " + std::to_string(lineno) + ": " + e.what());
      }
      const auto type = j.value("type", "");
      if (type == "meta") {
        t.meta = j;
        t.meta.erase("type");
      } else if (type == "step") {
        TrajectoryRecord r;
        r.step = j.at("step").get<std::size_t>();
        r.loss = j.at("loss").get<double>();
        r.accuracy = j.at("accuracy").get<double>();
        r.readout_norms = j.at("readout_norms").get<std::vector<double>>();
        r.first_layer_drift = j.at("first_layer_drift").get<double>();
        r.grad_readout_norm = j.at("grad_readout_norm").get<double>();
        r.grad_first_norm = j.at("grad_first_norm").get<double>();
        r.grad_bias_norm = j.value("grad_bias_norm", 0.0);
        r.eta = j.at("eta").get<double>();
        if (j.contains("comparator_loss")) r.comparator_loss = j.at("comparator_loss").get<double>();
        if (!t.records.empty() && r.step <= t.records.back().step)
          throw ValidationError("trajectory steps are not increasing");
        t.records.push_back(std::move(r));
      } else {
        throw ValidationError("trajectory line " + std::to_string(lineno) + ": unknown record type");
      }
    }
    return t;
  }

  CsvTable summary() const {
    CsvTable table({"step", "loss", "accuracy", "max_readout_norm", "first_layer_drift",
                    "grad_readout_norm", "grad_first_norm", "eta"});
    for (const auto& r : records) {
      double mx = 0.0;
      for (double v : r.readout_norms) mx = std::max(mx, v);
      table.add_row({std::to_string(r.step), full_precision(r.loss), full_precision(r.accuracy),
                     full_precision(mx), full_precision(r.first_layer_drift),
                     full_precision(r.grad_readout_norm), full_precision(r.grad_first_norm),
                     full_precision(r.eta)});
    }
    return table;
  }
};

template <ModelParams P>
struct TrainResult {
  P params;
  Trajectory trajectory;
};

/// What the loss is an expectation over.
using Objective = std::variant<CubeSource, SampleSource>;

template <ModelParams P>
LossGrad<P> evaluate_objective(const P& p, const WindowScheme& s, const Activation& act,
                               const Objective& data, bool with_grad = true) {
  if (const auto* cube = std::get_if<CubeSource>(&data)) return evaluate_exact(p, s, act, *cube, with_grad);
  return evaluate(p, s, act, std::get<SampleSource>(data), with_grad);
}

/// Fraction of the objective's mass where sign(h(x)) = f(x); sign(0) is wrong.
template <ModelParams P>
double zero_one_accuracy(const P& p, const WindowScheme& s, const Activation& act,
                         const Objective& data) {
  return evaluate_objective(p, s, act, data, false).accuracy;
}

namespace detail {
inline Batch draw_minibatch(const Batch& data, std::size_t m, Rng& rng) {
  Batch b{Matrix(m, data.inputs.cols()), Vector(m), Vector::Constant(m, 1.0 / static_cast<double>(m))};
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = static_cast<Eigen::Index>(rng.below(data.size()));
    b.inputs.row((Eigen::Index)r) = data.inputs.row(row);
    b.labels[(Eigen::Index)r] = data.labels[row];
  }
  return b;
}
}  // namespace detail

/// Gradient descent (or AdaDelta) on the hinge loss. Records step 0, every
/// `record_stride`-th step and step T. Record t describes the parameters
/// after t updates together with the gradient taken there.
template <ModelParams P>
TrainResult<P> train(P params, const WindowScheme& scheme, const Activation& act,
                     const Objective& data, const TrainConfig& cfg, Rng& rng,
                     const std::function<double(const P&)>& comparator = {}) {
  cfg.validate();
  scheme.validate();
  params.validate(scheme);
  require_finite(params);
  FrozenGroups frozen = cfg.frozen;
  if (cfg.theorem_mode) {
    act.require_theory_safe("train");
    frozen.bias = true;
  }
  if (cfg.mode == BatchMode::PopulationExact && !std::holds_alternative<CubeSource>(data))
    throw ValidationError("population-exact mode needs the boolean cube as objective");
  if (cfg.mode != BatchMode::PopulationExact && !std::holds_alternative<SampleSource>(data))
    throw ValidationError("sample modes need a sample objective");

  const double eta = cfg.use_eta_theorem
                         ? eta_theorem(static_cast<double>(scheme.input_length),
                                       static_cast<double>(params.neurons()), static_cast<double>(cfg.steps))
                         : cfg.eta;

  TrainResult<P> out{params, {}};
  out.trajectory.meta = {{"arch", arch_name(P::arch)},
                         {"mode", batch_mode_name(cfg.mode)},
                         {"activation", act.name()},
                         {"c", act.bound()},
                         {"input_length", scheme.input_length},
                         {"width", scheme.width},
                         {"stride", scheme.stride},
                         {"neurons", params.neurons()},
                         {"steps", cfg.steps},
                         {"eta", eta},
                         {"optimizer", cfg.optimizer == OptimizerKind::Gd ? "gd" : "adadelta"},
                         {"frozen", {{"first", frozen.first}, {"bias", frozen.bias}, {"readout", frozen.readout}}},
                         {"seed", cfg.seed}};
  const P initial = params;
  std::optional<AdaDelta<P>> adadelta;
  if (cfg.optimizer == OptimizerKind::AdaDelta) adadelta.emplace(params, cfg.rho, cfg.adadelta_eps);
  Rng stream = rng.split(cfg.seed);

  for (std::size_t t = 0;; ++t) {
    const bool record = (t % cfg.record_stride == 0) || t == cfg.steps;
    LossGrad<P> full;
    LossGrad<P> step_grad;
    if (cfg.mode == BatchMode::Minibatch) {
      const auto& sample = std::get<SampleSource>(data).data();
      if (record) full = evaluate_objective(params, scheme, act, data, false);
      if (t < cfg.steps)
        step_grad = loss_grad(params, scheme, act, detail::draw_minibatch(sample, cfg.minibatch, stream));
      else
        step_grad = evaluate_objective(params, scheme, act, data, true);
      if (!record) full.loss = step_grad.loss;
    } else {
      full = evaluate_objective(params, scheme, act, data, true);
      step_grad.grad = full.grad;
    }
    if (!std::isfinite(full.loss) || full.loss > kDivergenceThreshold)
      throw DivergenceError("training diverged at step " + std::to_string(t));

    if (record) {
      TrajectoryRecord r;
      r.step = t;
      r.loss = full.loss;
      r.accuracy = full.accuracy;
      r.readout_norms = readout_norms(params);
      r.first_layer_drift = first_layer_distance(params, initial);
      r.grad_readout_norm = std::sqrt(squared_norm(step_grad.grad, Group::Readout));
      r.grad_first_norm = std::sqrt(squared_norm(step_grad.grad, Group::First));
      r.grad_bias_norm = std::sqrt(squared_norm(step_grad.grad, Group::Bias));
      r.eta = eta;
      if (comparator) r.comparator_loss = comparator(params);
      out.trajectory.records.push_back(std::move(r));
    }
    if (t == cfg.steps) break;

    if (adadelta) adadelta->apply(params, step_grad.grad, frozen);
    else axpy(-eta, step_grad.grad, params, frozen);
    if (!params_finite(params)) throw DivergenceError("non-finite parameter after step " + std::to_string(t));
  }
  out.params = std::move(params);
  return out;
}

}  // namespace kpat
