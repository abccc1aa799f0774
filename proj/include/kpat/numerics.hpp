#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "kpat/error.hpp"

namespace kpat {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Largest cube dimension we enumerate exhaustively.
inline constexpr unsigned kMaxExactDim = 24;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// Worker pool setting shared by every parallel kernel. The thread count only
// changes scheduling: all reductions run over a fixed chunk structure in
// ascending chunk order, so results are bit-identical for any count.

namespace detail {
inline std::atomic<std::size_t>& thread_setting() {
  static std::atomic<std::size_t> value{1};
  return value;
}
}  // namespace detail

inline void set_threads(std::size_t n) { detail::thread_setting() = std::max<std::size_t>(1, n); }
inline std::size_t threads() { return detail::thread_setting(); }

namespace detail {
// Nested parallel_for calls run inline on the calling worker.
inline thread_local bool in_worker = false;
}  // namespace detail

/// Runs fn(i) for i in [0, count). Each index is executed exactly once.
template <class Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t workers = detail::in_worker ? 1 : std::min(threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto body = [&] {
    const bool was_worker = detail::in_worker;
    detail::in_worker = true;
    struct Restore {
      bool v;
      ~Restore() { detail::in_worker = v; }
    } restore{was_worker};
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count || failed) return;
      try {
        fn(i);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Counter-based generator: output i of a stream is a keyed hash of i, so a
// stream can be split into children without advancing the parent.

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix64(key_ ^ mix64(counter_++ + 0x3c6ef372fe94f82bULL)); }

  /// Independent child stream; the parent's position is not consumed.
  Rng split(std::uint64_t stream) const {
    Rng child;
    child.key_ = mix64(key_ + mix64(stream ^ 0xbb67ae8584caa73bULL));
    return child;
  }

  /// Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Unbiased integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw ValidationError("Rng::below: empty range");
    for (;;) {
      const unsigned __int128 product = static_cast<unsigned __int128>((*this)()) * bound;
      const auto low = static_cast<std::uint64_t>(product);
      if (low >= bound || low >= (-bound) % bound) return static_cast<std::uint64_t>(product >> 64);
    }
  }

  int sign() { return ((*this)() >> 63) ? -1 : 1; }

  /// Standard normal via Box-Muller (cosine branch only).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Walsh-Hadamard transform.
//
// Cube convention used everywhere in the library: a table index m encodes the
// point x in {+1,-1}^n with bit i of m set iff x_{i+1} = -1. Subsets I of [n]
// use the same bit layout, so chi_I(x(m)) = (-1)^popcount(I & m).

inline int character(std::uint32_t subset, std::uint32_t point) {
  return (std::popcount(subset & point) & 1) ? -1 : 1;
}

inline unsigned log2_exact(std::size_t length) {
  if (length == 0 || (length & (length - 1)) != 0)
    throw DimensionError("length " + std::to_string(length) + " is not a power of two");
  return static_cast<unsigned>(std::countr_zero(length));
}

/// Unnormalized in-place butterfly: a[I] <- sum_m a[m] chi_I(x(m)).
inline void wht_inplace(std::span<double> a) {
  log2_exact(a.size());
  for (std::size_t half = 1; half < a.size(); half <<= 1) {
    for (std::size_t block = 0; block < a.size(); block += 2 * half) {
      for (std::size_t i = block; i < block + half; ++i) {
        const double lo = a[i];
        const double hi = a[i + half];
        a[i] = lo + hi;
        a[i + half] = lo - hi;
      }
    }
  }
}

/// Fourier coefficients <g, chi_I> under the uniform distribution.
struct FourierSpectrum {
  unsigned n = 0;
  std::vector<double> coeff;

  double at(std::uint32_t subset) const { return coeff.at(subset); }

  double sum_of_squares() const {
    double s = 0.0;
    for (double c : coeff) s += c * c;
    return s;
  }
};

inline FourierSpectrum wht(std::span<const double> table) {
  const unsigned n = log2_exact(table.size());
  if (n > kMaxExactDim) throw CapacityError("wht: n = " + std::to_string(n) + " exceeds 24");
  FourierSpectrum out{n, std::vector<double>(table.begin(), table.end())};
  wht_inplace(out.coeff);
  const double scale = std::ldexp(1.0, -static_cast<int>(n));
  for (double& c : out.coeff) c *= scale;
  return out;
}

/// ||g||_D^2 under the uniform distribution, summed in index order.
inline double squared_norm_uniform(std::span<const double> table) {
  double s = 0.0;
  for (double v : table) s += v * v;
  return s / static_cast<double>(table.size());
}

// ---------------------------------------------------------------------------

/// Central differences (fn(x + h e_i) - fn(x - h e_i)) / 2h per coordinate.
inline Vector finite_diff_grad(const std::function<double(const Vector&)>& fn, const Vector& point,
                               double h) {
  if (!(h > 0.0)) throw ValidationError("finite_diff_grad: step must be positive");
  Vector probe = point;
  Vector grad(point.size());
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + h;
    const double up = fn(probe);
    probe[i] = point[i] - h;
    const double down = fn(probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(i));
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Binomials. Exact in 64-bit integers while they fit, log-space above n = 40.

inline double log_binomial(unsigned n, unsigned k) {
  if (k > n) return -std::numeric_limits<double>::infinity();
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

inline double binomial(unsigned n, unsigned k) {
  if (k > n) return 0.0;
  if (n > 40) return std::exp(log_binomial(n, k));
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (unsigned i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return static_cast<double>(r);
}

/// 1 / C(n, k), staying finite for large n.
inline double inverse_binomial(unsigned n, unsigned k) {
  if (k > n) throw ValidationError("inverse_binomial: k > n");
  if (n > 40) return std::exp(-log_binomial(n, k));
  return 1.0 / binomial(n, k);
}

}  // namespace kpat
