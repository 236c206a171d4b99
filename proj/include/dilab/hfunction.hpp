// The convex h-function family behind Bregman density-ratio estimation and
// the per-example losses it induces on the log ratio f = ln(pi / pi_ref):
//
//   kind   h(r)                      l1(f)            l_-1(f)
//   LSIF   (r-1)^2 / 2               -e^f             e^{2f} / 2
//   BCE    r ln r - (r+1) ln(r+1)    ln(1 + e^{-f})   ln(1 + e^f)
//   UKL    r ln r - r                -f               e^f
//
// l1 weights samples of the chosen distribution, l_-1 samples of the
// reference. Relative to the raw Bregman terms -h'(r) and h'(r) r - h(r),
// the l columns are shifted by r-independent constants (-1 and +1/2 for
// LSIF, zero for BCE and UKL); dre.hpp pins those constants in tests.
#pragma once

#include <cmath>
#include <string>

#include "dilab/common.hpp"

namespace dilab {

enum class HKind { lsif, ukl, bce };

inline const char* to_string(HKind k) {
  switch (k) {
    case HKind::lsif: return "lsif";
    case HKind::ukl: return "ukl";
    case HKind::bce: return "bce";
  }
  return "?";
}

struct HFunction {
  HKind kind;

  double h(double r) const {
    require_positive(r);
    switch (kind) {
      case HKind::lsif: return 0.5 * sqr(r - 1.0);
      case HKind::ukl: return r * std::log(r) - r;
      case HKind::bce: return r * std::log(r) - (r + 1.0) * std::log(r + 1.0);
    }
    return 0.0;
  }

  double h_prime(double r) const {
    require_positive(r);
    switch (kind) {
      case HKind::lsif: return r - 1.0;
      case HKind::ukl: return std::log(r);
      case HKind::bce: return std::log(r) - std::log1p(r);
    }
    return 0.0;
  }

  // Second derivative; strictly positive on r > 0, which is what makes the
  // exact-expectation fit in dre.hpp have the true ratio as its unique
  // stationary point.
  double h_second(double r) const {
    require_positive(r);
    switch (kind) {
      case HKind::lsif: return 1.0;
      case HKind::ukl: return 1.0 / r;
      case HKind::bce: return 1.0 / (r * (1.0 + r));
    }
    return 0.0;
  }

  double ell1(double f) const {
    switch (kind) {
      case HKind::lsif: return -std::exp(f);
      case HKind::ukl: return -f;
      case HKind::bce: return softplus(-f);
    }
    return 0.0;
  }

  double ell_neg1(double f) const {
    switch (kind) {
      case HKind::lsif: return 0.5 * std::exp(2.0 * f);
      case HKind::ukl: return std::exp(f);
      case HKind::bce: return softplus(f);
    }
    return 0.0;
  }

  // d ell1 / df and d ell_-1 / df, used by the analytic loss gradients.
  double ell1_deriv(double f) const {
    switch (kind) {
      case HKind::lsif: return -std::exp(f);
      case HKind::ukl: return -1.0;
      case HKind::bce: return -sigmoid(-f);
    }
    return 0.0;
  }

  double ell_neg1_deriv(double f) const {
    switch (kind) {
      case HKind::lsif: return std::exp(2.0 * f);
      case HKind::ukl: return std::exp(f);
      case HKind::bce: return sigmoid(f);
    }
    return 0.0;
  }

  std::string name() const { return to_string(kind); }

  static HFunction make(HKind k) { return HFunction{k}; }

 private:
  static void require_positive(double r) {
    if (!(r > 0.0)) throw ConfigError("HFunction: ratio argument must be > 0, got " + fmt_double(r));
  }
};

inline HFunction h_lsif() { return HFunction{HKind::lsif}; }
inline HFunction h_ukl() { return HFunction{HKind::ukl}; }
inline HFunction h_bce() { return HFunction{HKind::bce}; }

}  // namespace dilab
