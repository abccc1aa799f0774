#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "kpat/error.hpp"
#include "kpat/numerics.hpp"

namespace kpat {

/// A point of {+1,-1}^n. Coordinates are stored 0-based; x[i] is x_{i+1}.
class SignVector {
 public:
  SignVector() = default;
  explicit SignVector(std::vector<int> values) : values_(std::move(values)) {
    for (int v : values_)
      if (v != 1 && v != -1) throw ValidationError("SignVector entries must be +1 or -1");
  }

  /// Decodes a cube index (bit i set iff x_{i+1} = -1).
  static SignVector from_index(std::uint32_t index, unsigned n) {
    SignVector x;
    x.values_.resize(n);
    for (unsigned i = 0; i < n; ++i) x.values_[i] = ((index >> i) & 1u) ? -1 : 1;
    return x;
  }

  std::uint32_t to_index() const {
    if (values_.size() > 32) throw CapacityError("SignVector::to_index: n > 32");
    std::uint32_t m = 0;
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (values_[i] < 0) m |= 1u << i;
    return m;
  }

  std::size_t size() const { return values_.size(); }
  int operator[](std::size_t i) const { return values_[i]; }
  const std::vector<int>& values() const { return values_; }

  Vector to_real() const {
    Vector v(static_cast<Eigen::Index>(values_.size()));
    for (std::size_t i = 0; i < values_.size(); ++i) v[static_cast<Eigen::Index>(i)] = values_[i];
    return v;
  }

  friend bool operator==(const SignVector&, const SignVector&) = default;

 private:
  std::vector<int> values_;
};

/// f(x) = g(x_{jstar}, ..., x_{jstar+k-1}); g is a truth table over {+1,-1}^k
/// indexed with the cube convention.
struct KPattern {
  unsigned n = 0;
  unsigned k = 0;
  unsigned jstar = 1;  // 1-based window start
  std::vector<int> g;

  void validate() const {
    if (k < 1 || k > n) throw ValidationError("KPattern: need 1 <= k <= n");
    if (k > kMaxExactDim) throw CapacityError("KPattern: k too large for a truth table");
    if (jstar < 1 || jstar > n - k + 1) throw ValidationError("KPattern: jstar out of range");
    if (g.size() != (std::size_t{1} << k)) throw ValidationError("KPattern: table size != 2^k");
    for (int v : g)
      if (v != 1 && v != -1) throw ValidationError("KPattern: table values must be +1/-1");
  }

  /// Index of the window pattern inside a cube index.
  std::uint32_t window_of(std::uint32_t cube_index) const {
    return (cube_index >> (jstar - 1)) & ((1u << k) - 1u);
  }
};

/// chi_I for a non-empty I given as a bitmask (bit i <-> coordinate i+1).
struct Parity {
  unsigned n = 0;
  std::uint32_t subset = 0;

  void validate() const {
    if (n > 32) throw CapacityError("Parity: n > 32");
    if (n < 32 && (subset >> n) != 0) throw ValidationError("Parity: index set not inside [n]");
  }
};

/// A function of an arbitrary index set (1-based), well beyond consecutive windows.
struct Junta {
  unsigned n = 0;
  std::vector<unsigned> indices;
  std::vector<int> g;

  void validate() const {
    if (indices.empty() || indices.size() > kMaxExactDim)
      throw ValidationError("Junta: bad index count");
    for (unsigned i : indices)
      if (i < 1 || i > n) throw ValidationError("Junta: index outside [n]");
    if (g.size() != (std::size_t{1} << indices.size()))
      throw ValidationError("Junta: table size != 2^|indices|");
    for (int v : g)
      if (v != 1 && v != -1) throw ValidationError("Junta: table values must be +1/-1");
  }
};

using Target = std::variant<KPattern, Parity, Junta>;

inline unsigned dimension(const Target& t) {
  return std::visit([](const auto& f) { return f.n; }, t);
}

inline std::uint32_t subset_of(std::initializer_list<unsigned> one_based) {
  std::uint32_t m = 0;
  for (unsigned i : one_based) m |= 1u << (i - 1);
  return m;
}

inline std::uint32_t window_subset(unsigned jstar, unsigned k) {
  return ((k >= 32 ? 0u : (1u << k)) - 1u) << (jstar - 1);
}

/// Parity of a consecutive window, as a KPattern with g = product.
inline KPattern parity_pattern(unsigned n, unsigned jstar, unsigned k) {
  KPattern f{n, k, jstar, std::vector<int>(std::size_t{1} << k)};
  for (std::uint32_t z = 0; z < f.g.size(); ++z) f.g[z] = character(z, z);
  f.validate();
  return f;
}

inline int eval_kpattern(const KPattern& f, const SignVector& x) {
  if (x.size() != f.n) throw DimensionError("eval_kpattern: length mismatch");
  std::uint32_t z = 0;
  for (unsigned t = 0; t < f.k; ++t)
    if (x[f.jstar - 1 + t] < 0) z |= 1u << t;
  return f.g[z];
}

inline int eval_parity(std::uint32_t subset, const SignVector& x) {
  if (x.size() < 32 && (subset >> x.size()) != 0)
    throw ValidationError("eval_parity: index set not inside [n]");
  int r = 1;
  for (std::size_t i = 0; i < x.size(); ++i)
    if ((subset >> i) & 1u) r *= x[i];
  return r;
}

inline int eval_junta(const Junta& f, const SignVector& x) {
  if (x.size() != f.n) throw DimensionError("eval_junta: length mismatch");
  std::uint32_t z = 0;
  for (std::size_t t = 0; t < f.indices.size(); ++t)
    if (x[f.indices[t] - 1] < 0) z |= 1u << t;
  return f.g[z];
}

inline int eval_target(const Target& t, const SignVector& x) {
  struct {
    const SignVector& x;
    int operator()(const KPattern& f) const { return eval_kpattern(f, x); }
    int operator()(const Parity& p) const {
      if (x.size() != p.n) throw DimensionError("eval_parity: length mismatch");
      return eval_parity(p.subset, x);
    }
    int operator()(const Junta& f) const { return eval_junta(f, x); }
  } visitor{x};
  return std::visit(visitor, t);
}

/// Label of every cube point, ascending index order.
inline std::vector<int> label_table(const Target& target) {
  const unsigned n = dimension(target);
  if (n > kMaxExactDim) throw CapacityError("label_table: n > 24");
  std::visit([](const auto& f) { f.validate(); }, target);
  std::vector<int> labels(std::size_t{1} << n);
  for (std::uint32_t m = 0; m < labels.size(); ++m) {
    labels[m] = std::visit(
        [m](const auto& f) -> int {
          using F = std::decay_t<decltype(f)>;
          if constexpr (std::is_same_v<F, KPattern>) {
            return f.g[f.window_of(m)];
          } else if constexpr (std::is_same_v<F, Parity>) {
            return character(f.subset, m);
          } else {
            std::uint32_t z = 0;
            for (std::size_t t = 0; t < f.indices.size(); ++t)
              if ((m >> (f.indices[t] - 1)) & 1u) z |= 1u << t;
            return f.g[z];
          }
        },
        target);
  }
  return labels;
}

// ---------------------------------------------------------------------------

struct UniformCube {
  unsigned n = 0;
};

struct Empirical {
  std::vector<SignVector> points;
};

using Distribution = std::variant<UniformCube, Empirical>;

struct Expectation {
  double value = 0.0;
  double std_error = 0.0;  // 0 for exact evaluation
  bool exact = true;
};

/// E_{x~D}[fn(x)]. Exact mode enumerates the support in ascending order;
/// with mc_samples set, averages that many draws and reports the standard error.
template <class Fn>
Expectation population_expectation(Fn&& fn, const Distribution& dist,
                                   std::optional<std::size_t> mc_samples = std::nullopt,
                                   Rng* rng = nullptr) {
  if (mc_samples) {
    if (*mc_samples < 2) throw ValidationError("population_expectation: need >= 2 MC samples");
    if (rng == nullptr) throw ValidationError("population_expectation: MC mode needs an Rng");
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t s = 0; s < *mc_samples; ++s) {
      double v;
      if (const auto* u = std::get_if<UniformCube>(&dist)) {
        std::vector<int> coords(u->n);
        for (int& c : coords) c = rng->sign();
        v = fn(SignVector(std::move(coords)));
      } else {
        const auto& pts = std::get<Empirical>(dist).points;
        if (pts.empty()) throw ValidationError("Empirical distribution is empty");
        v = fn(pts[rng->below(pts.size())]);
      }
      sum += v;
      sum_sq += v * v;
    }
    const double m = static_cast<double>(*mc_samples);
    const double mean = sum / m;
    const double var = std::max(0.0, (sum_sq - m * mean * mean) / (m - 1.0));
    return {mean, std::sqrt(var / m), false};
  }
  double sum = 0.0;
  if (const auto* u = std::get_if<UniformCube>(&dist)) {
    if (u->n > kMaxExactDim) throw CapacityError("exact expectation needs n <= 24");
    const std::size_t count = std::size_t{1} << u->n;
    for (std::uint32_t m = 0; m < count; ++m) sum += fn(SignVector::from_index(m, u->n));
    return {sum / static_cast<double>(count), 0.0, true};
  }
  const auto& pts = std::get<Empirical>(dist).points;
  if (pts.empty()) throw ValidationError("Empirical distribution is empty");
  for (const auto& x : pts) sum += fn(x);
  return {sum / static_cast<double>(pts.size()), 0.0, true};
}

// ---------------------------------------------------------------------------

/// Bijection on coordinates, stored 0-based: image[i] = pi(i+1) - 1.
class Permutation {
 public:
  Permutation() = default;
  explicit Permutation(std::vector<unsigned> image) : image_(std::move(image)) {
    std::vector<bool> seen(image_.size(), false);
    for (unsigned v : image_) {
      if (v >= image_.size() || seen[v]) throw ValidationError("Permutation: not a bijection");
      seen[v] = true;
    }
  }

  static Permutation identity(unsigned n) {
    std::vector<unsigned> id(n);
    for (unsigned i = 0; i < n; ++i) id[i] = i;
    return Permutation(std::move(id));
  }

  /// Transposition of two 1-based coordinates.
  static Permutation swap(unsigned n, unsigned a, unsigned b) {
    auto p = identity(n);
    std::swap(p.image_.at(a - 1), p.image_.at(b - 1));
    return p;
  }

  std::size_t size() const { return image_.size(); }
  /// pi applied to a 1-based coordinate.
  unsigned operator()(unsigned one_based) const { return image_.at(one_based - 1) + 1; }
  const std::vector<unsigned>& image() const { return image_; }

  Permutation inverse() const {
    std::vector<unsigned> inv(image_.size());
    for (unsigned i = 0; i < image_.size(); ++i) inv[image_[i]] = i;
    return Permutation(std::move(inv));
  }

  bool fixes(unsigned one_based) const { return (*this)(one_based) == one_based; }

  /// Cube index of pi(x) given the cube index of x.
  std::uint32_t apply_to_index(std::uint32_t m) const {
    std::uint32_t r = 0;
    for (unsigned i = 0; i < image_.size(); ++i)
      if ((m >> image_[i]) & 1u) r |= 1u << i;
    return r;
  }

 private:
  std::vector<unsigned> image_;
};

/// pi(x) = (x_{pi(1)}, ..., x_{pi(n)}).
inline SignVector apply_permutation(const Permutation& pi, const SignVector& x) {
  if (pi.size() != x.size()) throw DimensionError("apply_permutation: size mismatch");
  std::vector<int> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[pi.image()[i]];
  return SignVector(std::move(y));
}

/// Same coordinate relabeling for a real vector (used for pi(w)).
inline Vector apply_permutation(const Permutation& pi, const Vector& w) {
  if (pi.size() != static_cast<std::size_t>(w.size()))
    throw DimensionError("apply_permutation: size mismatch");
  Vector out(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) out[i] = w[pi.image()[static_cast<std::size_t>(i)]];
  return out;
}

/// pi(I) = { pi(j) : j in I }.
inline std::uint32_t permute_set(const Permutation& pi, std::uint32_t subset) {
  if (pi.size() < 32 && (subset >> pi.size()) != 0)
    throw DimensionError("permute_set: index set larger than permutation");
  std::uint32_t r = 0;
  for (unsigned i = 0; i < pi.size(); ++i)
    if ((subset >> i) & 1u) r |= 1u << pi.image()[i];
  return r;
}

inline KPattern random_kpattern(Rng& rng, unsigned n, unsigned k) {
  if (k < 1 || k > n) throw ValidationError("random_kpattern: need 1 <= k <= n");
  KPattern f{n, k, 1, std::vector<int>(std::size_t{1} << k)};
  f.jstar = 1 + static_cast<unsigned>(rng.below(n - k + 1));
  for (int& v : f.g) v = rng.sign();
  return f;
}

/// Uniform among permutations of [n] with pi(j) = j (j is 1-based).
inline Permutation random_permutation_fixing(Rng& rng, unsigned n, unsigned j) {
  if (j < 1 || j > n) throw ValidationError("random_permutation_fixing: j outside [n]");
  std::vector<unsigned> others;
  for (unsigned i = 0; i < n; ++i)
    if (i != j - 1) others.push_back(i);
  rng.shuffle(others);
  std::vector<unsigned> image(n);
  std::size_t next = 0;
  for (unsigned i = 0; i < n; ++i) image[i] = (i == j - 1) ? i : others[next++];
  return Permutation(std::move(image));
}

inline Permutation random_permutation(Rng& rng, unsigned n) {
  std::vector<unsigned> image(n);
  for (unsigned i = 0; i < n; ++i) image[i] = i;
  rng.shuffle(image);
  return Permutation(std::move(image));
}

}  // namespace kpat
