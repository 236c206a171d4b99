// First-order update rules shared by the trainer and the tabular fitters.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dilab/common.hpp"

namespace dilab {

inline void sgd_step(std::span<double> params, std::span<const double> grad, double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

// Adaptive-moment estimation with bias correction; constants follow the
// standard update equations.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  std::vector<double> m;
  std::vector<double> v;

  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(AdamState& st, std::span<double> params, std::span<const double> grad,
                      double lr) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grad[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grad[i] * grad[i];
    const double m_hat = st.m[i] / bc1;
    const double v_hat = st.v[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + st.eps);
  }
}

// Rescales grad in place so its L2 norm is at most max_norm; returns the
// pre-clip norm.
inline double clip_grad_norm(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (double& g : grad) g *= scale;
  }
  return norm;
}

}  // namespace dilab
