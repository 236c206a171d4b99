// Shared numeric primitives: stable scalar functions, a deterministic RNG,
// seed derivation, hashing, and the exception taxonomy used across dilab.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dilab {

// ----------------------------- errors -----------------------------

// Bad inputs, bad files, bad configs. Maps to exit code 1 in the CLI.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Loss or objective became non-finite. Maps to exit code 3 in the CLI.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& msg, long step)
      : std::runtime_error(msg + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// ----------------------------- scalar numerics -----------------------------

// Logistic function, stable for |z| up to ~700. NaN in -> NaN out.
inline double sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// ln(1 + e^z) without overflow; softplus(z) = z + softplus(-z) for z > 0.
inline double softplus(double z) {
  if (z > 0.0) {
    return z + std::log1p(std::exp(-z));
  }
  return std::log1p(std::exp(z));
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;  // all -inf (or a NaN/inf slipped in)
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline double sqr(double x) { return x * x; }

// Shortest round-trip decimal form; used for CSV and summary lines so that
// identical doubles always print identical bytes.
inline std::string fmt_double(double x) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  (void)ec;
  return std::string(buf, ptr);
}

inline std::string fmt_hex(std::uint64_t v) {
  char buf[20];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, 16);
  (void)ec;
  return std::string(buf, ptr);
}

// ----------------------------- rng -----------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Decorrelated per-stream seed so independent workers (one per prompt, one
// per sweep cell) can draw without order effects.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
  return splitmix64(s);
}

// mt19937_64 has a standardized output sequence; all distribution transforms
// below are hand-rolled so byte-identical artifacts do not depend on the
// standard library's unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 significant bits.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n); rejection sampling keeps it exact.
  int uniform_int(int n) {
    if (n <= 0) throw ConfigError("uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - (std::numeric_limits<std::uint64_t>::max() % un);
    std::uint64_t x = eng_();
    while (x >= limit) x = eng_();
    return static_cast<int>(x % un);
  }

  // Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u = 1.0 - uniform01();  // (0, 1], keeps log finite
    const double v = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double a = 2.0 * 3.14159265358979323846 * v;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Inverse-CDF draw from a probability vector (assumed to sum to ~1).
  int categorical(std::span<const double> probs) {
    const double u = uniform01();
    double c = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      c += probs[i];
      if (u < c) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  bool bernoulli(double p) { return uniform01() < p; }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ----------------------------- hashing -----------------------------

// FNV-1a over raw bytes; used for input fingerprints in run manifests.
inline std::uint64_t fnv1a64(std::span<const char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ----------------------------- chi-square tail -----------------------------

namespace detail {

// Regularized incomplete gamma, split as usual: series for x < a+1,
// continued fraction otherwise.
inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int n = 0; n < 500; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_contfrac(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

// Upper regularized incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a).
inline double gamma_q(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw ConfigError("gamma_q: need a > 0, x >= 0");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_contfrac(a, x);
}

// P(Chi2_dof >= chi2); independent of any statistics library.
inline double chi_square_pvalue(double chi2, double dof) {
  return gamma_q(0.5 * dof, 0.5 * chi2);
}

}  // namespace dilab
