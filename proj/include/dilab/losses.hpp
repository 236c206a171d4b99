// Policy-parameterized alignment losses on the log ratio
// f = ln pi_theta(y|x) - ln pi_ref(y|x):
//
//   dil-lsif / dil-ukl / dil-bce   l1(f_w) + l_-1(f_l)      (hfunction.hpp)
//   dpo                            -ln sigmoid(beta (f_w - f_l))
//   sft                            -ln pi_theta(y_w|x)      (no reference)
//   bt-reward                      -ln sigmoid(f_w - f_l)   (implicit reward f)
//
// The reference policy is frozen: no gradient flows through it. Gradients
// are exact chain-rule compositions of d loss/d f with the policies'
// hand-derived log-prob gradients, verified against finite differences.
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dilab/common.hpp"
#include "dilab/core.hpp"
#include "dilab/hfunction.hpp"
#include "dilab/policy.hpp"

namespace dilab {

// ----------------------------- configuration -----------------------------

struct LogRatioConfig {
  bool length_normalize = false;
  std::optional<double> clamp;  // bound on |f|; squared-ratio terms can overflow without it
};

enum class LossKind { dil, dpo, sft, bt_reward };

struct LossSpec {
  LossKind kind = LossKind::dil;
  HKind h = HKind::lsif;   // dil only
  double beta = 0.1;       // dpo only
  LogRatioConfig ratio_config;

  std::string name() const {
    switch (kind) {
      case LossKind::dil: return std::string("dil-") + to_string(h);
      case LossKind::dpo: return "dpo";
      case LossKind::sft: return "sft";
      case LossKind::bt_reward: return "bt-reward";
    }
    return "?";
  }
};

inline const std::vector<std::string>& loss_names() {
  static const std::vector<std::string> names = {"dil-lsif", "dil-ukl", "dil-bce", "dpo", "sft"};
  return names;
}

// The squared-ratio term of dil-lsif is the only loss that can overflow from
// moderate log-ratios, so it ships with a default clamp.
inline LossSpec make_loss_spec(const std::string& name, double dpo_beta = 0.1) {
  LossSpec s;
  if (name == "dil-lsif") {
    s.kind = LossKind::dil;
    s.h = HKind::lsif;
    s.ratio_config.clamp = 30.0;
  } else if (name == "dil-ukl") {
    s.kind = LossKind::dil;
    s.h = HKind::ukl;
  } else if (name == "dil-bce") {
    s.kind = LossKind::dil;
    s.h = HKind::bce;
  } else if (name == "dpo") {
    s.kind = LossKind::dpo;
    if (!(dpo_beta > 0.0)) throw ConfigError("dpo requires beta > 0");
    s.beta = dpo_beta;
  } else if (name == "sft") {
    s.kind = LossKind::sft;
  } else if (name == "bt-reward") {
    s.kind = LossKind::bt_reward;
  } else {
    std::string valid;
    for (const std::string& n : loss_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown loss '" + name + "' (valid: " + valid + ")");
  }
  return s;
}

// ----------------------------- scalar losses -----------------------------

inline double dil_loss(const HFunction& h, double f_w, double f_l) {
  return h.ell1(f_w) + h.ell_neg1(f_l);
}

inline double dpo_loss(double f_w, double f_l, double beta) {
  if (!(beta > 0.0)) throw ConfigError("dpo_loss: beta must be positive");
  return softplus(-beta * (f_w - f_l));
}

inline double bt_reward_loss(double r_w, double r_l) { return softplus(r_l - r_w); }

// ----------------------------- log ratio -----------------------------

template <class Policy, class X, class Y>
double log_ratio(const Policy& policy, const Policy& ref_policy, const X& x, const Y& y,
                 const LogRatioConfig& cfg = {}) {
  double f = policy.log_prob(x, y) - ref_policy.log_prob(x, y);
  if (cfg.length_normalize) {
    f /= static_cast<double>(policy.response_token_count(x, y));
  }
  if (cfg.clamp) {
    f = std::clamp(f, -*cfg.clamp, *cfg.clamp);
  }
  return f;
}

// ----------------------------- batch adapters -----------------------------

inline int prompt_of(const IdTriple& t) { return t.prompt; }
inline int chosen_of(const IdTriple& t) { return t.chosen; }
inline int rejected_of(const IdTriple& t) { return t.rejected; }

inline const TokenSeq& prompt_of(const PreferenceTriple& t) { return t.prompt; }
inline const TokenSeq& chosen_of(const PreferenceTriple& t) { return t.chosen; }
inline const TokenSeq& rejected_of(const PreferenceTriple& t) { return t.rejected; }

// ----------------------------- batch losses -----------------------------

// -mean ln pi_theta(y_w | x); the reference policy plays no part.
template <class Policy, class Triple>
double sft_loss(const Policy& policy, std::span<const Triple> batch) {
  if (batch.empty()) throw ConfigError("sft_loss: empty batch");
  double total = 0.0;
  for (const Triple& t : batch) total += -policy.log_prob(prompt_of(t), chosen_of(t));
  return total / static_cast<double>(batch.size());
}

struct LossGrad {
  double value = 0.0;
  std::vector<double> grad;
};

namespace detail {

// d loss / d f_w and d loss / d f_l for the pairwise specs.
struct PairDerivs {
  double value;
  double d_fw;
  double d_fl;
};

inline PairDerivs pair_loss_derivs(const LossSpec& spec, double f_w, double f_l) {
  switch (spec.kind) {
    case LossKind::dil: {
      const HFunction h = HFunction::make(spec.h);
      return {dil_loss(h, f_w, f_l), h.ell1_deriv(f_w), h.ell_neg1_deriv(f_l)};
    }
    case LossKind::dpo: {
      const double m = spec.beta * (f_w - f_l);
      const double s = sigmoid(-m);
      return {softplus(-m), -spec.beta * s, spec.beta * s};
    }
    case LossKind::bt_reward: {
      const double s = sigmoid(f_l - f_w);
      return {softplus(f_l - f_w), -s, s};
    }
    case LossKind::sft:
      throw ConfigError("pair_loss_derivs: sft is not a pairwise loss");
  }
  throw ConfigError("pair_loss_derivs: bad loss kind");
}

}  // namespace detail

// Batch mean loss and its exact gradient in the policy parameters. Batch
// elements are processed in order; for fixed inputs the result is
// deterministic bit for bit.
template <class Policy, class Triple>
LossGrad loss_and_grad(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                       std::span<const Triple> batch) {
  if (batch.empty()) throw ConfigError("loss_and_grad: empty batch");
  LossGrad out;
  out.grad.assign(policy.params().size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  if (spec.kind == LossKind::sft) {
    for (const Triple& t : batch) {
      out.value += -policy.log_prob(prompt_of(t), chosen_of(t)) * inv_n;
      policy.accum_grad_log_prob(prompt_of(t), chosen_of(t), -inv_n, out.grad);
    }
    return out;
  }

  const LogRatioConfig& cfg = spec.ratio_config;
  for (const Triple& t : batch) {
    const double f_w = log_ratio(policy, ref_policy, prompt_of(t), chosen_of(t), cfg);
    const double f_l = log_ratio(policy, ref_policy, prompt_of(t), rejected_of(t), cfg);
    const auto d = detail::pair_loss_derivs(spec, f_w, f_l);
    out.value += d.value * inv_n;

    // df/d theta = grad ln pi_theta (the reference term is constant), scaled
    // by the shared length divisor; a saturated clamp zeroes the chain.
    double scale_w = inv_n * d.d_fw;
    double scale_l = inv_n * d.d_fl;
    if (cfg.length_normalize) {
      scale_w /= static_cast<double>(policy.response_token_count(prompt_of(t), chosen_of(t)));
      scale_l /= static_cast<double>(policy.response_token_count(prompt_of(t), rejected_of(t)));
    }
    if (cfg.clamp) {
      const double raw_w = policy.log_prob(prompt_of(t), chosen_of(t)) -
                           ref_policy.log_prob(prompt_of(t), chosen_of(t));
      const double raw_l = policy.log_prob(prompt_of(t), rejected_of(t)) -
                           ref_policy.log_prob(prompt_of(t), rejected_of(t));
      const double lim_w = *cfg.clamp * (cfg.length_normalize
                               ? policy.response_token_count(prompt_of(t), chosen_of(t)) : 1.0);
      const double lim_l = *cfg.clamp * (cfg.length_normalize
                               ? policy.response_token_count(prompt_of(t), rejected_of(t)) : 1.0);
      if (std::fabs(raw_w) > lim_w) scale_w = 0.0;
      if (std::fabs(raw_l) > lim_l) scale_l = 0.0;
    }
    if (scale_w != 0.0) policy.accum_grad_log_prob(prompt_of(t), chosen_of(t), scale_w, out.grad);
    if (scale_l != 0.0) policy.accum_grad_log_prob(prompt_of(t), rejected_of(t), scale_l, out.grad);
  }
  return out;
}

}  // namespace dilab
