#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kpat/error.hpp"
#include "kpat/numerics.hpp"
#include "kpat/problems.hpp"

namespace kpat {

// ---------------------------------------------------------------------------
// Activations

struct Activation {
  enum class Kind { ClippedRelu, Tanh, Relu };

  Kind kind = Kind::ClippedRelu;
  double cap = 1.0;  // c of the clipped ReLU; unused otherwise

  static Activation clipped_relu(double c) {
    if (!(c > 0.0)) throw ValidationError("clipped ReLU cap must be positive");
    return {Kind::ClippedRelu, c};
  }
  static Activation tanh() { return {Kind::Tanh, 1.0}; }
  static Activation relu() { return {Kind::Relu, 0.0}; }

  double value(double t) const {
    switch (kind) {
      case Kind::ClippedRelu: return std::min(std::max(t, 0.0), cap);
      case Kind::Tanh: return std::tanh(t);
      case Kind::Relu: return t > 0.0 ? t : 0.0;
    }
    return 0.0;
  }

  /// Derivative; 0 at the kinks of the piecewise-linear activations.
  double deriv(double t) const {
    switch (kind) {
      case Kind::ClippedRelu: return (t > 0.0 && t < cap) ? 1.0 : 0.0;
      case Kind::Tanh: {
        const double s = std::tanh(t);
        return 1.0 - s * s;
      }
      case Kind::Relu: return t > 0.0 ? 1.0 : 0.0;
    }
    return 0.0;
  }

  /// The constant c with |sigma| <= c; infinite for plain ReLU.
  double bound() const {
    switch (kind) {
      case Kind::ClippedRelu: return cap;
      case Kind::Tanh: return 1.0;
      case Kind::Relu: return std::numeric_limits<double>::infinity();
    }
    return 0.0;
  }

  bool theory_safe() const { return kind != Kind::Relu; }

  void require_theory_safe(const char* who) const {
    if (!theory_safe())
      throw ValidationError(std::string(who) + ": unbounded ReLU is not allowed in theorem mode");
  }

  std::string name() const {
    switch (kind) {
      case Kind::ClippedRelu: return "clipped_relu";
      case Kind::Tanh: return "tanh";
      case Kind::Relu: return "relu";
    }
    return "?";
  }

  static Activation parse(const std::string& name, double c = 1.0) {
    if (name == "clipped_relu" || name == "clipped-relu") return clipped_relu(c);
    if (name == "tanh") return tanh();
    if (name == "relu") return relu();
    throw ValidationError("unknown activation '" + name + "'");
  }
};

// ---------------------------------------------------------------------------
// Window geometry: positions j = 0..P-1 cover inputs [j*stride, j*stride+width).

struct WindowScheme {
  std::size_t input_length = 0;
  std::size_t width = 0;
  std::size_t stride = 1;

  static WindowScheme boolean(unsigned n, unsigned k) { return {n, k, 1}; }

  void validate() const {
    if (width < 1 || width > input_length) throw ValidationError("WindowScheme: need 1 <= w <= N");
    if (stride < 1) throw ValidationError("WindowScheme: stride must be >= 1");
  }

  std::size_t positions() const { return (input_length - width) / stride + 1; }
  std::size_t offset(std::size_t j) const { return j * stride; }
  bool is_boolean_window() const { return stride == 1; }
};

// ---------------------------------------------------------------------------
// Parameters. Every container exposes its storage as a list of contiguous
// blocks tagged with the group they belong to, which is all the optimizers,
// norms and serializers need.

enum class Group { First, Bias, Readout };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::First: return "first";
    case Group::Bias: return "bias";
    case Group::Readout: return "readout";
  }
  return "?";
}

struct FrozenGroups {
  bool first = false;
  bool bias = false;
  bool readout = false;

  bool contains(Group g) const {
    switch (g) {
      case Group::First: return first;
      case Group::Bias: return bias;
      case Group::Readout: return readout;
    }
    return false;
  }
};

struct Block {
  std::string name;
  Group group;
  std::size_t rows;
  std::size_t cols;
  std::span<double> values;
};

struct ConstBlock {
  std::string name;
  Group group;
  std::size_t rows;
  std::size_t cols;
  std::span<const double> values;
};

namespace detail {
template <class M>
std::span<double> span_of(M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <class M>
std::span<const double> span_of(const M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
}  // namespace detail

enum class Arch { Cnn, Lcn, Fcn };

inline std::string arch_name(Arch a) {
  switch (a) {
    case Arch::Cnn: return "cnn";
    case Arch::Lcn: return "lcn";
    case Arch::Fcn: return "fcn";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "cnn") return Arch::Cnn;
  if (s == "lcn") return Arch::Lcn;
  if (s == "fcn") return Arch::Fcn;
  throw ValidationError("unknown architecture '" + s + "'");
}

/// Shared kernel over all window positions, separate readout per position.
struct CnnParams {
  static constexpr Arch arch = Arch::Cnn;
  Matrix kernel;   // q x width
  Vector bias;     // q
  Matrix readout;  // positions x q; row j is the readout of window j

  std::size_t neurons() const { return static_cast<std::size_t>(kernel.rows()); }

  std::vector<Block> blocks() {
    return {{"kernel", Group::First, (size_t)kernel.rows(), (size_t)kernel.cols(), detail::span_of(kernel)},
            {"bias", Group::Bias, (size_t)bias.size(), 1, detail::span_of(bias)},
            {"readout", Group::Readout, (size_t)readout.rows(), (size_t)readout.cols(), detail::span_of(readout)}};
  }
  std::vector<ConstBlock> blocks() const {
    return {{"kernel", Group::First, (size_t)kernel.rows(), (size_t)kernel.cols(), detail::span_of(kernel)},
            {"bias", Group::Bias, (size_t)bias.size(), 1, detail::span_of(bias)},
            {"readout", Group::Readout, (size_t)readout.rows(), (size_t)readout.cols(), detail::span_of(readout)}};
  }

  void validate(const WindowScheme& s) const {
    if (static_cast<std::size_t>(kernel.cols()) != s.width || bias.size() != kernel.rows() ||
        static_cast<std::size_t>(readout.rows()) != s.positions() || readout.cols() != kernel.rows())
      throw DimensionError("CnnParams: shapes do not match the window scheme");
  }
};

/// Like the CNN but every position owns its kernel and bias.
struct LcnParams {
  static constexpr Arch arch = Arch::Lcn;
  std::vector<Matrix> kernels;  // positions entries of q x width
  Matrix biases;                // positions x q
  Matrix readout;               // positions x q

  std::size_t neurons() const { return static_cast<std::size_t>(readout.cols()); }

  std::vector<Block> blocks() {
    std::vector<Block> out;
    for (std::size_t j = 0; j < kernels.size(); ++j)
      out.push_back({"kernel" + std::to_string(j), Group::First, (size_t)kernels[j].rows(),
                     (size_t)kernels[j].cols(), detail::span_of(kernels[j])});
    out.push_back({"biases", Group::Bias, (size_t)biases.rows(), (size_t)biases.cols(), detail::span_of(biases)});
    out.push_back({"readout", Group::Readout, (size_t)readout.rows(), (size_t)readout.cols(), detail::span_of(readout)});
    return out;
  }
  std::vector<ConstBlock> blocks() const {
    std::vector<ConstBlock> out;
    for (std::size_t j = 0; j < kernels.size(); ++j)
      out.push_back({"kernel" + std::to_string(j), Group::First, (size_t)kernels[j].rows(),
                     (size_t)kernels[j].cols(), detail::span_of(kernels[j])});
    out.push_back({"biases", Group::Bias, (size_t)biases.rows(), (size_t)biases.cols(), detail::span_of(biases)});
    out.push_back({"readout", Group::Readout, (size_t)readout.rows(), (size_t)readout.cols(), detail::span_of(readout)});
    return out;
  }

  void validate(const WindowScheme& s) const {
    const auto P = s.positions();
    if (kernels.size() != P || static_cast<std::size_t>(biases.rows()) != P ||
        static_cast<std::size_t>(readout.rows()) != P || biases.cols() != readout.cols())
      throw DimensionError("LcnParams: position count does not match the window scheme");
    for (const auto& k : kernels)
      if (static_cast<std::size_t>(k.cols()) != s.width || k.rows() != readout.cols())
        throw DimensionError("LcnParams: kernel shape mismatch");
  }
};

/// One hidden layer over the whole input.
struct FcnParams {
  static constexpr Arch arch = Arch::Fcn;
  Matrix weights;  // q x N; row i is w^(i)
  Vector bias;     // q
  Vector readout;  // q

  std::size_t neurons() const { return static_cast<std::size_t>(weights.rows()); }

  std::vector<Block> blocks() {
    return {{"weights", Group::First, (size_t)weights.rows(), (size_t)weights.cols(), detail::span_of(weights)},
            {"bias", Group::Bias, (size_t)bias.size(), 1, detail::span_of(bias)},
            {"readout", Group::Readout, (size_t)readout.size(), 1, detail::span_of(readout)}};
  }
  std::vector<ConstBlock> blocks() const {
    return {{"weights", Group::First, (size_t)weights.rows(), (size_t)weights.cols(), detail::span_of(weights)},
            {"bias", Group::Bias, (size_t)bias.size(), 1, detail::span_of(bias)},
            {"readout", Group::Readout, (size_t)readout.size(), 1, detail::span_of(readout)}};
  }

  void validate(const WindowScheme& s) const {
    if (static_cast<std::size_t>(weights.cols()) != s.input_length || bias.size() != weights.rows() ||
        readout.size() != weights.rows())
      throw DimensionError("FcnParams: shapes do not match the input length");
  }
};

using Params = std::variant<CnnParams, LcnParams, FcnParams>;

template <class P>
concept ModelParams = std::is_same_v<P, CnnParams> || std::is_same_v<P, LcnParams> ||
                      std::is_same_v<P, FcnParams>;

// ---------------------------------------------------------------------------
// Block-wise helpers

template <ModelParams P>
P zeros_like(const P& p) {
  P z = p;
  for (auto& b : z.blocks()) std::fill(b.values.begin(), b.values.end(), 0.0);
  return z;
}

/// y += alpha * x over every group not in `frozen`.
template <ModelParams P>
void axpy(double alpha, const P& x, P& y, FrozenGroups frozen = {}) {
  auto xb = x.blocks();
  auto yb = y.blocks();
  for (std::size_t i = 0; i < yb.size(); ++i) {
    if (frozen.contains(yb[i].group)) continue;
    for (std::size_t e = 0; e < yb[i].values.size(); ++e) yb[i].values[e] += alpha * xb[i].values[e];
  }
}

template <ModelParams P>
double squared_norm(const P& p, Group g) {
  double s = 0.0;
  for (const auto& b : p.blocks())
    if (b.group == g)
      for (double v : b.values) s += v * v;
  return s;
}

template <ModelParams P>
double squared_norm(const P& p) {
  return squared_norm(p, Group::First) + squared_norm(p, Group::Bias) +
         squared_norm(p, Group::Readout);
}

template <ModelParams P>
bool params_finite(const P& p) {
  for (const auto& b : p.blocks())
    for (double v : b.values)
      if (!std::isfinite(v)) return false;
  return true;
}

template <ModelParams P>
void require_finite(const P& p) {
  if (!params_finite(p)) throw NumericError("model parameters contain NaN or Inf");
}

/// Concatenation of all blocks (or only the groups not frozen).
template <ModelParams P>
Vector flatten(const P& p, FrozenGroups skip = {}) {
  std::vector<double> out;
  for (const auto& b : p.blocks())
    if (!skip.contains(b.group)) out.insert(out.end(), b.values.begin(), b.values.end());
  return Eigen::Map<Vector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

template <ModelParams P>
void unflatten(const Vector& flat, P& p, FrozenGroups skip = {}) {
  Eigen::Index at = 0;
  for (auto& b : p.blocks()) {
    if (skip.contains(b.group)) continue;
    for (double& v : b.values) {
      if (at >= flat.size()) throw DimensionError("unflatten: vector too short");
      v = flat[at++];
    }
  }
  if (at != flat.size()) throw DimensionError("unflatten: vector too long");
}

/// Frobenius norm of the difference of the first-layer weights.
template <ModelParams P>
double first_layer_distance(const P& a, const P& b) {
  auto ab = a.blocks();
  auto bb = b.blocks();
  double s = 0.0;
  for (std::size_t i = 0; i < ab.size(); ++i) {
    if (ab[i].group != Group::First) continue;
    for (std::size_t e = 0; e < ab[i].values.size(); ++e) {
      const double d = ab[i].values[e] - bb[i].values[e];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

/// Euclidean norm of the readout of every position (one entry for an FCN).
template <ModelParams P>
std::vector<double> readout_norms(const P& p) {
  if constexpr (std::is_same_v<P, FcnParams>) {
    return {p.readout.norm()};
  } else {
    std::vector<double> out(static_cast<std::size_t>(p.readout.rows()));
    for (Eigen::Index j = 0; j < p.readout.rows(); ++j) out[(size_t)j] = p.readout.row(j).norm();
    return out;
  }
}

// ---------------------------------------------------------------------------
// Hinge loss

inline void require_label(double y) {
  if (y != 1.0 && y != -1.0) throw ValidationError("hinge: label must be +1 or -1");
}

inline double hinge(double yhat, double y) {
  require_label(y);
  return std::max(1.0 - y * yhat, 0.0);
}

/// d/dyhat of the hinge; the kink y*yhat = 1 takes the 0 branch.
inline double hinge_sub(double yhat, double y) {
  require_label(y);
  return (y * yhat < 1.0) ? -y : 0.0;
}

// ---------------------------------------------------------------------------
// Single-example forward passes: plain loops, kept as an independent route
// against the batched kernels below.

inline double cnn_forward(const CnnParams& p, const WindowScheme& s, const Activation& act,
                          std::span<const double> x) {
  if (x.size() != s.input_length) throw DimensionError("cnn_forward: input length mismatch");
  p.validate(s);
  double h = 0.0;
  for (std::size_t j = 0; j < s.positions(); ++j) {
    const std::size_t off = s.offset(j);
    for (Eigen::Index i = 0; i < p.kernel.rows(); ++i) {
      double pre = p.bias[i];
      for (std::size_t t = 0; t < s.width; ++t) pre += p.kernel(i, (Eigen::Index)t) * x[off + t];
      h += p.readout((Eigen::Index)j, i) * act.value(pre);
    }
  }
  return h;
}

inline double lcn_forward(const LcnParams& p, const WindowScheme& s, const Activation& act,
                          std::span<const double> x) {
  if (x.size() != s.input_length) throw DimensionError("lcn_forward: input length mismatch");
  p.validate(s);
  double h = 0.0;
  for (std::size_t j = 0; j < s.positions(); ++j) {
    const std::size_t off = s.offset(j);
    const Matrix& K = p.kernels[j];
    for (Eigen::Index i = 0; i < K.rows(); ++i) {
      double pre = p.biases((Eigen::Index)j, i);
      for (std::size_t t = 0; t < s.width; ++t) pre += K(i, (Eigen::Index)t) * x[off + t];
      h += p.readout((Eigen::Index)j, i) * act.value(pre);
    }
  }
  return h;
}

inline double fcn_forward(const FcnParams& p, const Activation& act, std::span<const double> x) {
  if (x.size() != static_cast<std::size_t>(p.weights.cols()))
    throw DimensionError("fcn_forward: input length mismatch");
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.weights.rows(); ++i) {
    double pre = p.bias[i];
    for (std::size_t t = 0; t < x.size(); ++t) pre += p.weights(i, (Eigen::Index)t) * x[t];
    h += p.readout[i] * act.value(pre);
  }
  return h;
}

template <ModelParams P>
double forward(const P& p, const WindowScheme& s, const Activation& act, std::span<const double> x) {
  if constexpr (std::is_same_v<P, CnnParams>) return cnn_forward(p, s, act, x);
  else if constexpr (std::is_same_v<P, LcnParams>) return lcn_forward(p, s, act, x);
  else return fcn_forward(p, act, x);
}

// ---------------------------------------------------------------------------
// Batched evaluation

/// Weighted examples; rows of `inputs` are examples. Population objectives use
/// weights summing to one.
struct Batch {
  Matrix inputs;
  Vector labels;
  Vector weights;

  std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
};

template <ModelParams P>
struct LossGrad {
  double loss = 0.0;      // weighted hinge loss
  double accuracy = 0.0;  // weighted fraction with y*h > 0 (sign 0 counts as wrong)
  P grad;
};

namespace detail {

inline Matrix activate(const Matrix& pre, const Activation& act) {
  return pre.unaryExpr([&act](double t) { return act.value(t); });
}
inline Matrix activate_deriv(const Matrix& pre, const Activation& act) {
  return pre.unaryExpr([&act](double t) { return act.deriv(t); });
}

/// First-layer pre-activations of position j (or the whole input for an FCN).
template <ModelParams P>
Matrix preactivation(const P& p, const WindowScheme& s, const Matrix& X, std::size_t j) {
  Matrix pre;
  if constexpr (std::is_same_v<P, CnnParams>) {
    pre.noalias() = X.middleCols((Eigen::Index)s.offset(j), (Eigen::Index)s.width) * p.kernel.transpose();
    pre.rowwise() += p.bias.transpose();
  } else if constexpr (std::is_same_v<P, LcnParams>) {
    pre.noalias() = X.middleCols((Eigen::Index)s.offset(j), (Eigen::Index)s.width) * p.kernels[j].transpose();
    pre.rowwise() += p.biases.row((Eigen::Index)j);
  } else {
    pre.noalias() = X * p.weights.transpose();
    pre.rowwise() += p.bias.transpose();
  }
  return pre;
}

template <ModelParams P>
std::size_t position_count(const WindowScheme& s) {
  if constexpr (std::is_same_v<P, FcnParams>) return 1;
  else return s.positions();
}

template <ModelParams P>
auto readout_row(const P& p, std::size_t j) {
  if constexpr (std::is_same_v<P, FcnParams>) return p.readout.transpose();
  else return p.readout.row((Eigen::Index)j);
}

}  // namespace detail

template <ModelParams P>
Vector predict(const P& p, const WindowScheme& s, const Activation& act, const Matrix& X) {
  p.validate(s);
  if (static_cast<std::size_t>(X.cols()) != s.input_length)
    throw DimensionError("predict: input width mismatch");
  Vector h = Vector::Zero(X.rows());
  for (std::size_t j = 0; j < detail::position_count<P>(s); ++j) {
    const Matrix A = detail::activate(detail::preactivation(p, s, X, j), act);
    h.noalias() += A * detail::readout_row(p, j).transpose();
  }
  return h;
}

/// Weighted hinge loss, accuracy and (optionally) the analytic subgradient.
template <ModelParams P>
LossGrad<P> loss_grad(const P& p, const WindowScheme& s, const Activation& act, const Batch& batch,
                      bool with_grad = true) {
  p.validate(s);
  const Matrix& X = batch.inputs;
  if (static_cast<std::size_t>(X.cols()) != s.input_length || batch.labels.size() != X.rows() ||
      batch.weights.size() != X.rows())
    throw DimensionError("loss_grad: batch shape mismatch");
  const std::size_t positions = detail::position_count<P>(s);

  std::vector<Matrix> pre(positions);
  std::vector<Matrix> act_out(positions);
  Vector h = Vector::Zero(X.rows());
  for (std::size_t j = 0; j < positions; ++j) {
    pre[j] = detail::preactivation(p, s, X, j);
    act_out[j] = detail::activate(pre[j], act);
    h.noalias() += act_out[j] * detail::readout_row(p, j).transpose();
  }

  LossGrad<P> out{0.0, 0.0, zeros_like(p)};
  Vector dh(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double y = batch.labels[r];
    const double w = batch.weights[r];
    const double margin = y * h[r];
    out.loss += w * std::max(1.0 - margin, 0.0);
    if (margin > 0.0) out.accuracy += w;
    dh[r] = (margin < 1.0) ? -y * w : 0.0;
  }
  if (!with_grad) return out;

  for (std::size_t j = 0; j < positions; ++j) {
    Matrix D = detail::activate_deriv(pre[j], act);
    D.array().colwise() *= dh.array();
    if constexpr (std::is_same_v<P, FcnParams>) {
      out.grad.readout.noalias() = act_out[j].transpose() * dh;
      D.array().rowwise() *= p.readout.transpose().array();
      out.grad.weights.noalias() += D.transpose() * X;
      out.grad.bias += D.colwise().sum().transpose();
    } else {
      const auto Xj = X.middleCols((Eigen::Index)s.offset(j), (Eigen::Index)s.width);
      out.grad.readout.row((Eigen::Index)j).noalias() = dh.transpose() * act_out[j];
      D.array().rowwise() *= p.readout.row((Eigen::Index)j).array();
      if constexpr (std::is_same_v<P, CnnParams>) {
        out.grad.kernel.noalias() += D.transpose() * Xj;
        out.grad.bias += D.colwise().sum().transpose();
      } else {
        out.grad.kernels[j].noalias() = D.transpose() * Xj;
        out.grad.biases.row((Eigen::Index)j) = D.colwise().sum();
      }
    }
  }
  return out;
}

template <ModelParams P>
void accumulate(LossGrad<P>& into, const LossGrad<P>& part) {
  into.loss += part.loss;
  into.accuracy += part.accuracy;
  axpy(1.0, part.grad, into.grad);
}

// ---------------------------------------------------------------------------
// Data sources split into fixed-size chunks. Reductions always add chunk
// results in ascending chunk order.

inline constexpr std::size_t kChunkRows = 4096;

/// All 2^n points of the cube, uniform weights, labels from a table.
class CubeSource {
 public:
  CubeSource(unsigned n, std::vector<int> labels) : n_(n), labels_(std::move(labels)) {
    if (n_ > kMaxExactDim) throw CapacityError("exact enumeration needs n <= 24");
    if (labels_.size() != (std::size_t{1} << n_)) throw DimensionError("CubeSource: label table size");
  }
  explicit CubeSource(const Target& target) : CubeSource(dimension(target), label_table(target)) {}

  unsigned dim() const { return n_; }
  const std::vector<int>& labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t num_chunks() const { return (size() + kChunkRows - 1) / kChunkRows; }

  Batch chunk(std::size_t c) const {
    const std::size_t begin = c * kChunkRows;
    const std::size_t rows = std::min(kChunkRows, size() - begin);
    Batch b{Matrix(rows, n_), Vector(rows), Vector::Constant(rows, std::ldexp(1.0, -(int)n_))};
    for (std::size_t r = 0; r < rows; ++r) {
      const auto m = static_cast<std::uint32_t>(begin + r);
      for (unsigned i = 0; i < n_; ++i) b.inputs((Eigen::Index)r, i) = ((m >> i) & 1u) ? -1.0 : 1.0;
      b.labels[(Eigen::Index)r] = labels_[m];
    }
    return b;
  }

 private:
  unsigned n_;
  std::vector<int> labels_;
};

/// A fixed sample (uniform weights over its rows unless given).
class SampleSource {
 public:
  explicit SampleSource(Batch data) : data_(std::move(data)) {
    if (data_.size() == 0) throw ValidationError("SampleSource: empty sample");
    if (data_.weights.size() != data_.inputs.rows())
      data_.weights = Vector::Constant(data_.inputs.rows(), 1.0 / static_cast<double>(data_.size()));
  }

  const Batch& data() const { return data_; }
  std::size_t size() const { return data_.size(); }
  std::size_t num_chunks() const { return (size() + kChunkRows - 1) / kChunkRows; }

  Batch chunk(std::size_t c) const {
    const auto begin = static_cast<Eigen::Index>(c * kChunkRows);
    const auto rows = std::min<Eigen::Index>(kChunkRows, data_.inputs.rows() - begin);
    return {data_.inputs.middleRows(begin, rows), data_.labels.segment(begin, rows),
            data_.weights.segment(begin, rows)};
  }

 private:
  Batch data_;
};

template <class S>
concept ChunkedSource = requires(const S& s, std::size_t i) {
  { s.num_chunks() } -> std::convertible_to<std::size_t>;
  { s.chunk(i) } -> std::convertible_to<Batch>;
};

/// Chunk-parallel evaluation with a deterministic reduction order.
template <ModelParams P, ChunkedSource S>
LossGrad<P> evaluate(const P& p, const WindowScheme& s, const Activation& act, const S& source,
                     bool with_grad = true) {
  const std::size_t chunks = source.num_chunks();
  std::vector<LossGrad<P>> parts(chunks);
  parallel_for(chunks, [&](std::size_t c) { parts[c] = loss_grad(p, s, act, source.chunk(c), with_grad); });
  LossGrad<P> total{0.0, 0.0, zeros_like(p)};
  for (const auto& part : parts) accumulate(total, part);
  return total;
}

// ---------------------------------------------------------------------------
// Exact population evaluation on the cube for windowed models (stride 1,
// input = cube point). A width-k window takes only 2^k values, so hidden
// activations are tabulated per pattern and every cube point reduces to P
// table lookups.

template <ModelParams P>
  requires(!std::is_same_v<P, FcnParams>)
LossGrad<P> evaluate_cube_patterns(const P& p, const WindowScheme& s, const Activation& act,
                                   const CubeSource& cube, bool with_grad = true) {
  p.validate(s);
  if (s.input_length != cube.dim() || s.stride != 1)
    throw ValidationError("pattern evaluation needs a stride-1 window over the cube");
  const unsigned k = static_cast<unsigned>(s.width);
  if (k > 16) throw CapacityError("pattern evaluation needs window width <= 16");
  const std::size_t Z = std::size_t{1} << k;
  const std::size_t positions = s.positions();

  Matrix patterns(Z, k);
  for (std::uint32_t z = 0; z < Z; ++z)
    for (unsigned t = 0; t < k; ++t) patterns((Eigen::Index)z, t) = ((z >> t) & 1u) ? -1.0 : 1.0;

  // Hidden pre-activations per (position, pattern); CNN shares one table.
  const std::size_t tables = std::is_same_v<P, CnnParams> ? 1 : positions;
  std::vector<Matrix> pre(tables), hidden(tables);
  for (std::size_t j = 0; j < tables; ++j) {
    if constexpr (std::is_same_v<P, CnnParams>) {
      pre[j].noalias() = patterns * p.kernel.transpose();
      pre[j].rowwise() += p.bias.transpose();
    } else {
      pre[j].noalias() = patterns * p.kernels[j].transpose();
      pre[j].rowwise() += p.biases.row((Eigen::Index)j);
    }
    hidden[j] = detail::activate(pre[j], act);
  }
  // score(j, z) = <u^(j), sigma(pre(z))>
  Matrix score(positions, Z);
  for (std::size_t j = 0; j < positions; ++j)
    score.row((Eigen::Index)j).noalias() = p.readout.row((Eigen::Index)j) * hidden[std::min(j, tables - 1)].transpose();

  const auto& labels = cube.labels();
  const std::uint32_t mask = static_cast<std::uint32_t>(Z - 1);
  Matrix dscore = Matrix::Zero(positions, Z);  // sum of dloss/dh over points with pattern z at j
  double loss = 0.0, correct = 0.0;
  for (std::uint32_t m = 0; m < labels.size(); ++m) {
    double h = 0.0;
    for (std::size_t j = 0; j < positions; ++j) h += score((Eigen::Index)j, (m >> j) & mask);
    const double y = labels[m];
    const double margin = y * h;
    loss += std::max(1.0 - margin, 0.0);
    if (margin > 0.0) correct += 1.0;
    if (with_grad && margin < 1.0)
      for (std::size_t j = 0; j < positions; ++j) dscore((Eigen::Index)j, (m >> j) & mask) -= y;
  }
  const double weight = std::ldexp(1.0, -static_cast<int>(cube.dim()));
  LossGrad<P> out{loss * weight, correct * weight, zeros_like(p)};
  if (!with_grad) return out;
  dscore *= weight;

  for (std::size_t j = 0; j < positions; ++j) {
    const std::size_t t = std::min(j, tables - 1);
    out.grad.readout.row((Eigen::Index)j).noalias() = dscore.row((Eigen::Index)j) * hidden[t];
    Matrix D = detail::activate_deriv(pre[t], act);
    D.array().colwise() *= dscore.row((Eigen::Index)j).transpose().array();
    D.array().rowwise() *= p.readout.row((Eigen::Index)j).array();
    if constexpr (std::is_same_v<P, CnnParams>) {
      out.grad.kernel.noalias() += D.transpose() * patterns;
      out.grad.bias += D.colwise().sum().transpose();
    } else {
      out.grad.kernels[j].noalias() = D.transpose() * patterns;
      out.grad.biases.row((Eigen::Index)j) = D.colwise().sum();
    }
  }
  return out;
}

/// Exact population loss/gradient over the cube, using pattern tables when the
/// model is windowed with stride 1.
template <ModelParams P>
LossGrad<P> evaluate_exact(const P& p, const WindowScheme& s, const Activation& act,
                           const CubeSource& cube, bool with_grad = true) {
  if constexpr (!std::is_same_v<P, FcnParams>) {
    if (s.stride == 1 && s.width <= 16 && s.input_length == cube.dim())
      return evaluate_cube_patterns(p, s, act, cube, with_grad);
  }
  return evaluate(p, s, act, cube, with_grad);
}

// ---------------------------------------------------------------------------
// Initializers

/// Kernel entries uniform on {+1/k, -1/k}, bias 1/k - 1, readout zero.
inline CnnParams init_cnn_theorem(Rng& rng, std::size_t q, unsigned k, std::size_t positions) {
  if (q < 1 || k < 1) throw ValidationError("init_cnn_theorem: need q, k >= 1");
  const double a = 1.0 / k;
  CnnParams p{Matrix(q, k), Vector::Constant(q, a - 1.0), Matrix::Zero(positions, q)};
  for (Eigen::Index i = 0; i < p.kernel.size(); ++i) p.kernel.data()[i] = a * rng.sign();
  return p;
}

inline LcnParams init_lcn_theorem(Rng& rng, std::size_t q, unsigned k, std::size_t positions) {
  if (q < 1 || k < 1) throw ValidationError("init_lcn_theorem: need q, k >= 1");
  const double a = 1.0 / k;
  LcnParams p{std::vector<Matrix>(positions, Matrix(q, k)),
              Matrix::Constant(positions, q, a - 1.0), Matrix::Zero(positions, q)};
  for (auto& K : p.kernels)
    for (Eigen::Index i = 0; i < K.size(); ++i) K.data()[i] = a * rng.sign();
  return p;
}

/// Coordinate-i.i.d. first-layer draws (hence permutation invariant).
struct FcnInit {
  enum class Kind { Gaussian, Rademacher };
  Kind kind = Kind::Gaussian;
  double parameter = 1.0;  // variance for Gaussian, magnitude for Rademacher

  static FcnInit gaussian(double variance) { return {Kind::Gaussian, variance}; }
  static FcnInit rademacher(double scale) { return {Kind::Rademacher, scale}; }

  double draw(Rng& rng) const {
    return kind == Kind::Gaussian ? std::sqrt(parameter) * rng.normal() : parameter * rng.sign();
  }
  std::string name() const { return kind == Kind::Gaussian ? "gaussian" : "rademacher"; }
};

/// Readout u_i = +-1/(q c) so that |h| <= sum |u_i| c = 1 for every input.
inline FcnParams init_fcn_perm_invariant(Rng& rng, std::size_t q, std::size_t n, FcnInit scheme,
                                         double c) {
  if (q < 1 || n < 1) throw ValidationError("init_fcn_perm_invariant: need q, n >= 1");
  if (!(c > 0.0) || !std::isfinite(c)) throw ValidationError("init_fcn_perm_invariant: c must be finite and > 0");
  FcnParams p{Matrix(q, n), Vector::Zero(q), Vector(q)};
  for (Eigen::Index i = 0; i < p.weights.size(); ++i) p.weights.data()[i] = scheme.draw(rng);
  const double mag = 1.0 / (static_cast<double>(q) * c);
  for (Eigen::Index i = 0; i < p.readout.size(); ++i) p.readout[i] = mag * rng.sign();
  return p;
}

namespace detail {
inline void fill_uniform(Rng& rng, double* data, Eigen::Index count, double bound) {
  for (Eigen::Index i = 0; i < count; ++i) data[i] = bound * (2.0 * rng.uniform() - 1.0);
}
}  // namespace detail

/// Symmetric uniform(+-1/sqrt(fan_in)) weights, zero biases; used for the
/// image experiments.
inline Params init_standard(Arch arch, Rng& rng, std::size_t q, const WindowScheme& s) {
  s.validate();
  const std::size_t P = s.positions();
  switch (arch) {
    case Arch::Cnn: {
      CnnParams p{Matrix(q, s.width), Vector::Zero(q), Matrix(P, q)};
      detail::fill_uniform(rng, p.kernel.data(), p.kernel.size(), 1.0 / std::sqrt((double)s.width));
      detail::fill_uniform(rng, p.readout.data(), p.readout.size(), 1.0 / std::sqrt((double)(q * P)));
      return p;
    }
    case Arch::Lcn: {
      LcnParams p{std::vector<Matrix>(P, Matrix(q, s.width)), Matrix::Zero(P, q), Matrix(P, q)};
      for (auto& K : p.kernels) detail::fill_uniform(rng, K.data(), K.size(), 1.0 / std::sqrt((double)s.width));
      detail::fill_uniform(rng, p.readout.data(), p.readout.size(), 1.0 / std::sqrt((double)(q * P)));
      return p;
    }
    case Arch::Fcn: {
      FcnParams p{Matrix(q, s.input_length), Vector::Zero(q), Vector(q)};
      detail::fill_uniform(rng, p.weights.data(), p.weights.size(), 1.0 / std::sqrt((double)s.input_length));
      detail::fill_uniform(rng, p.readout.data(), p.readout.size(), 1.0 / std::sqrt((double)q));
      return p;
    }
  }
  throw ValidationError("init_standard: unknown architecture");
}

// ---------------------------------------------------------------------------
// JSON snapshots
//
//   { "format": "kpat-params/1", "arch": "cnn"|"lcn"|"fcn",
//     "activation": {"kind": ..., "c": ...},
//     "scheme": {"input_length": N, "width": w, "stride": s},
//     "blocks": [ {"name", "group", "rows", "cols", "data": [row-major]} ... ] }

template <ModelParams P>
nlohmann::json to_json(const P& p, const WindowScheme& s, const Activation& act) {
  nlohmann::json j;
  j["format"] = "kpat-params/1";
  j["arch"] = arch_name(P::arch);
  j["activation"] = {{"kind", act.name()}, {"c", act.cap}};
  j["scheme"] = {{"input_length", s.input_length}, {"width", s.width}, {"stride", s.stride}};
  j["blocks"] = nlohmann::json::array();
  for (const auto& b : p.blocks())
    j["blocks"].push_back({{"name", b.name},
                           {"group", group_name(b.group)},
                           {"rows", b.rows},
                           {"cols", b.cols},
                           {"data", std::vector<double>(b.values.begin(), b.values.end())}});
  return j;
}

struct Snapshot {
  Params params;
  WindowScheme scheme;
  Activation activation;
};

inline Snapshot snapshot_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "kpat-params/1") throw ValidationError("not a kpat-params/1 snapshot");
  Snapshot out;
  out.scheme = {j.at("scheme").at("input_length").get<std::size_t>(), j.at("scheme").at("width").get<std::size_t>(),
                j.at("scheme").at("stride").get<std::size_t>()};
  out.scheme.validate();
  out.activation = Activation::parse(j.at("activation").at("kind").get<std::string>(),
                                     j.at("activation").at("c").get<double>());
  const auto& blocks = j.at("blocks");
  auto matrix_of = [](const nlohmann::json& b) {
    const auto rows = b.at("rows").get<Eigen::Index>();
    const auto cols = b.at("cols").get<Eigen::Index>();
    const auto data = b.at("data").get<std::vector<double>>();
    if (data.size() != static_cast<std::size_t>(rows * cols)) throw ValidationError("snapshot block size mismatch");
    for (double v : data)
      if (!std::isfinite(v)) throw NumericError("snapshot contains a non-finite value");
    return Matrix(Eigen::Map<const Matrix>(data.data(), rows, cols));
  };
  auto vector_of = [&](const nlohmann::json& b) {
    Matrix m = matrix_of(b);
    return Vector(Eigen::Map<const Vector>(m.data(), m.size()));
  };
  const Arch arch = parse_arch(j.at("arch").get<std::string>());
  if (arch == Arch::Cnn) {
    if (blocks.size() != 3) throw ValidationError("cnn snapshot needs 3 blocks");
    out.params = CnnParams{matrix_of(blocks[0]), vector_of(blocks[1]), matrix_of(blocks[2])};
  } else if (arch == Arch::Fcn) {
    if (blocks.size() != 3) throw ValidationError("fcn snapshot needs 3 blocks");
    out.params = FcnParams{matrix_of(blocks[0]), vector_of(blocks[1]), vector_of(blocks[2])};
  } else {
    if (blocks.size() < 3) throw ValidationError("lcn snapshot needs >= 3 blocks");
    LcnParams p;
    for (std::size_t b = 0; b + 2 < blocks.size(); ++b) p.kernels.push_back(matrix_of(blocks[b]));
    p.biases = matrix_of(blocks[blocks.size() - 2]);
    p.readout = matrix_of(blocks[blocks.size() - 1]);
    out.params = std::move(p);
  }
  std::visit([&](const auto& p) { p.validate(out.scheme); }, out.params);
  return out;
}

}  // namespace kpat
