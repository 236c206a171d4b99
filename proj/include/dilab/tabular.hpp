// Exact computation over small finite prompt/response worlds: partition
// functions, energy-reweighted policies, KL divergences, the closed-form
// KL-regularized optimum, and machine-precision checks of the
// imitation-learning equivalences that the rest of the project builds on.
//
// Everything here is an exact enumeration; domains are capped at 64
// responses per prompt so no expectation is ever sampled.
#pragma once

#include <cmath>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dilab/common.hpp"
#include "dilab/core.hpp"

namespace dilab {

constexpr int kMaxResponsesPerPrompt = 64;
constexpr double kMinRefProb = 1e-6;  // support floor so density ratios stay finite

// ----------------------------- domain -----------------------------

struct PromptEntry {
  TokenSeq prompt;
  std::vector<TokenSeq> responses;
  ProbTable pi_ref;            // reference policy over responses, full support
  std::vector<double> reward;  // ground-truth reward per response
  ProbTable pi_chosen;         // chosen-response marginal (derived by datagen)
};

struct TabularDomain {
  std::vector<PromptEntry> prompts;
  int vocab_size = 0;
  double beta = 1.0;

  int num_prompts() const { return static_cast<int>(prompts.size()); }
  int num_responses(int x) const { return static_cast<int>(prompts[x].responses.size()); }
};

// One probability row per prompt; carrier for exact policies.
struct PolicyTable {
  std::vector<ProbTable> rows;
};

inline void validate(const TabularDomain& d) {
  if (d.prompts.empty()) throw ConfigError("TabularDomain: no prompts");
  if (!(d.beta > 0.0)) throw ConfigError("TabularDomain: beta must be positive");
  for (std::size_t x = 0; x < d.prompts.size(); ++x) {
    const PromptEntry& e = d.prompts[x];
    const std::string where = "prompt " + std::to_string(x);
    const std::size_t n = e.responses.size();
    if (n < 2 || n > kMaxResponsesPerPrompt) {
      throw ConfigError(where + ": needs 2..64 responses, has " + std::to_string(n));
    }
    if (e.pi_ref.size() != n || e.pi_chosen.size() != n || e.reward.size() != n) {
      throw ConfigError(where + ": table sizes disagree with response count");
    }
    validate(e.prompt, where + " prompt seq");
    for (const TokenSeq& r : e.responses) validate(r, where + " response seq");
    validate(e.pi_ref);
    validate(e.pi_chosen);
    for (double p : e.pi_ref.p) {
      if (p <= 0.0) throw ConfigError(where + ": pi_ref must have full support");
    }
    for (double r : e.reward) {
      if (!std::isfinite(r)) throw ConfigError(where + ": non-finite reward");
    }
  }
}

// Hand-built domains in tests carry placeholder single-token sequences; only
// the tables matter for the oracle math.
inline TabularDomain make_table_domain(const std::vector<ProbTable>& pi_ref,
                                       const std::vector<std::vector<double>>& reward,
                                       const std::vector<ProbTable>& pi_chosen,
                                       double beta = 1.0) {
  TabularDomain d;
  d.beta = beta;
  int max_id = static_cast<int>(pi_ref.size());
  for (const ProbTable& t : pi_ref) max_id = std::max<int>(max_id, static_cast<int>(t.size()));
  d.vocab_size = max_id;
  for (std::size_t x = 0; x < pi_ref.size(); ++x) {
    PromptEntry e;
    e.prompt = TokenSeq{{static_cast<int>(x)}, d.vocab_size};
    for (std::size_t y = 0; y < pi_ref[x].size(); ++y) {
      e.responses.push_back(TokenSeq{{static_cast<int>(y)}, d.vocab_size});
    }
    e.pi_ref = pi_ref[x];
    e.reward = reward[x];
    e.pi_chosen = pi_chosen[x];
    d.prompts.push_back(std::move(e));
  }
  return d;
}

// ln(pi_chosen / pi_ref) per (prompt, response): the implicit reward whose
// distillation at beta = 1 reproduces pi_chosen exactly.
inline std::vector<std::vector<double>> log_ratio_tables(const TabularDomain& d) {
  std::vector<std::vector<double>> out(d.prompts.size());
  for (std::size_t x = 0; x < d.prompts.size(); ++x) {
    const PromptEntry& e = d.prompts[x];
    out[x].resize(e.responses.size());
    for (std::size_t y = 0; y < e.responses.size(); ++y) {
      out[x][y] = std::log(e.pi_chosen[y]) - std::log(e.pi_ref[y]);
    }
  }
  return out;
}

// ----------------------------- partition & EBM policy -----------------------------

namespace detail {

inline void require_rewards(const TabularDomain& d, int x, std::span<const double> reward,
                            double beta) {
  if (x < 0 || x >= d.num_prompts()) throw ConfigError("partition: prompt id out of range");
  if (!(beta > 0.0)) throw ConfigError("partition: beta must be positive");
  if (static_cast<int>(reward.size()) != d.num_responses(x)) {
    throw ConfigError("partition: reward vector size mismatch");
  }
  for (double r : reward) {
    if (!std::isfinite(r)) throw ConfigError("partition: non-finite reward");
  }
}

}  // namespace detail

// ln Z(x) with Z(x) = sum_y pi_ref(y|x) exp(reward(y)/beta), max-shifted.
inline double log_partition(const TabularDomain& d, int x, std::span<const double> reward,
                            double beta) {
  detail::require_rewards(d, x, reward, beta);
  const ProbTable& ref = d.prompts[x].pi_ref;
  double m = -std::numeric_limits<double>::infinity();
  for (double r : reward) m = std::max(m, r / beta);
  double s = 0.0;
  for (std::size_t y = 0; y < reward.size(); ++y) {
    s += ref[y] * std::exp(reward[y] / beta - m);
  }
  return m + std::log(s);
}

inline double partition(const TabularDomain& d, int x, std::span<const double> reward,
                        double beta) {
  return std::exp(log_partition(d, x, reward, beta));
}

// pi(y|x) = pi_ref(y|x) exp(reward(y)/beta) / Z(x). Each row is divided by
// its own accumulated total, so rows sum to 1 to machine precision.
inline PolicyTable ebm_policy(const TabularDomain& d,
                              const std::vector<std::vector<double>>& reward, double beta) {
  if (static_cast<int>(reward.size()) != d.num_prompts()) {
    throw ConfigError("ebm_policy: one reward vector per prompt required");
  }
  PolicyTable out;
  out.rows.reserve(d.prompts.size());
  for (int x = 0; x < d.num_prompts(); ++x) {
    detail::require_rewards(d, x, reward[x], beta);
    const ProbTable& ref = d.prompts[x].pi_ref;
    double m = -std::numeric_limits<double>::infinity();
    for (double r : reward[x]) m = std::max(m, r / beta);
    std::vector<double> w(reward[x].size());
    for (std::size_t y = 0; y < w.size(); ++y) {
      w[y] = ref[y] * std::exp(reward[x][y] / beta - m);
    }
    out.rows.push_back(normalize(w));
  }
  return out;
}

// Same computation, separate name: this is the unique minimizer of the
// reward-then-KL distillation objective (see distillation_objective below).
inline PolicyTable rlhf_optimum(const TabularDomain& d,
                                const std::vector<std::vector<double>>& reward, double beta) {
  return ebm_policy(d, reward, beta);
}

// ----------------------------- divergences -----------------------------

// KL(p || q) = sum_y p ln(p/q), with 0 ln(0/q) := 0. Arguments are ordered
// (target, model): forward_kl is the mass-covering direction used by
// behavior cloning, reverse_kl(p, q) = KL(q || p) is the mode-seeking
// direction used by the distillation step.
inline double forward_kl(const ProbTable& p, const ProbTable& q) {
  if (p.size() != q.size()) throw ConfigError("forward_kl: size mismatch");
  double s = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y) {
    if (p[y] == 0.0) continue;
    if (q[y] <= 0.0) throw ConfigError("forward_kl: q has a zero where p > 0 (infinite divergence)");
    s += p[y] * std::log(p[y] / q[y]);
  }
  return s;
}

inline double reverse_kl(const ProbTable& p, const ProbTable& q) { return forward_kl(q, p); }

inline double tv_distance(const ProbTable& p, const ProbTable& q) {
  if (p.size() != q.size()) throw ConfigError("tv_distance: size mismatch");
  double s = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y) s += std::fabs(p[y] - q[y]);
  return 0.5 * s;
}

// ----------------------------- exact objectives -----------------------------

// Exact-expectation reward-imitation objective (forward-KL route through the
// energy-based policy), with uniform prompt weights:
//   J(r) = mean_x [ -sum_y pi_chosen(y|x) r(x,y) + ln sum_y pi_ref(y|x) e^{r(x,y)} ].
// Minimized (up to per-prompt constants) by r = ln(pi_chosen/pi_ref).
inline double il_objective(const TabularDomain& d,
                           const std::vector<std::vector<double>>& reward) {
  double total = 0.0;
  for (int x = 0; x < d.num_prompts(); ++x) {
    const PromptEntry& e = d.prompts[x];
    double lin = 0.0;
    for (std::size_t y = 0; y < e.responses.size(); ++y) lin += e.pi_chosen[y] * reward[x][y];
    total += -lin + log_partition(d, x, reward[x], 1.0);
  }
  return total / d.num_prompts();
}

// Distillation objective -E_{pi}[r] + beta KL(pi || pi_ref), mean over
// prompts; brute-force evaluator used to certify rlhf_optimum.
inline double distillation_objective(const TabularDomain& d, const PolicyTable& pi,
                                     const std::vector<std::vector<double>>& reward,
                                     double beta) {
  double total = 0.0;
  for (int x = 0; x < d.num_prompts(); ++x) {
    const PromptEntry& e = d.prompts[x];
    double exp_r = 0.0;
    for (std::size_t y = 0; y < e.responses.size(); ++y) exp_r += pi.rows[x][y] * reward[x][y];
    total += -exp_r + beta * forward_kl(pi.rows[x], e.pi_ref);
  }
  return total / d.num_prompts();
}

// ----------------------------- equivalence checks -----------------------------

struct Prop1Report {
  double lower_level_gap = 0.0;  // min over perturbations of J(r*+delta) - J(r*); > 0 required
  double upper_level_tv = 0.0;   // max over prompts of TV(distilled, pi_chosen)
  bool pass = false;
};

// (i) r* = ln(pi_chosen/pi_ref) must beat random perturbations on the exact
// reward-imitation objective; (ii) distilling r* at beta = 1 must reproduce
// pi_chosen. Perturbation rather than a second optimizer: the minimizer is
// known analytically, so the check is a falsification attempt.
inline Prop1Report check_proposition1(const TabularDomain& d, double tol,
                                      std::uint64_t seed = 0, int perturbations = 200,
                                      double perturb_scale = 0.1) {
  validate(d);
  const auto r_star = log_ratio_tables(d);
  const double j_star = il_objective(d, r_star);

  Rng rng(derive_seed(seed, 0x9001));
  double min_gap = std::numeric_limits<double>::infinity();
  for (int k = 0; k < perturbations; ++k) {
    auto r = r_star;
    for (auto& row : r) {
      for (double& v : row) v += perturb_scale * rng.normal();
    }
    min_gap = std::min(min_gap, il_objective(d, r) - j_star);
  }

  const PolicyTable distilled = rlhf_optimum(d, r_star, 1.0);
  double max_tv = 0.0;
  for (int x = 0; x < d.num_prompts(); ++x) {
    max_tv = std::max(max_tv, tv_distance(distilled.rows[x], d.prompts[x].pi_chosen));
  }

  Prop1Report rep;
  rep.lower_level_gap = min_gap;
  rep.upper_level_tv = max_tv;
  rep.pass = (min_gap > 0.0) && (max_tv < tol);
  return rep;
}

// Z(x) = sum_y pi_ref(y|x) * (pi_chosen(y|x) / pi_ref(y|x)), evaluated
// literally through the ratio; telescopes to 1 for any valid pi_chosen.
inline std::vector<double> self_normalization_check(const TabularDomain& d) {
  std::vector<double> zs;
  zs.reserve(d.prompts.size());
  for (const PromptEntry& e : d.prompts) {
    double z = 0.0;
    for (std::size_t y = 0; y < e.responses.size(); ++y) {
      if (e.pi_ref[y] <= 0.0) throw ConfigError("self_normalization_check: pi_ref support violation");
      z += e.pi_ref[y] * (e.pi_chosen[y] / e.pi_ref[y]);
    }
    zs.push_back(z);
  }
  return zs;
}

// Two-point form of the reward-imitation loss vs the pairwise logistic
// reward loss. lhs goes through a generic log-sum-exp, rhs through softplus;
// the contract is |lhs - rhs| < 1e-12 over the tested range.
struct RewardLossPair {
  double lhs;  // -r_w + ln(e^{r_w} + e^{r_l})
  double rhs;  // -ln sigmoid(r_w - r_l)
};

inline RewardLossPair il_reward_loss_equivalence(double r_w, double r_l) {
  const double terms[2] = {r_w, r_l};
  RewardLossPair out;
  out.lhs = -r_w + log_sum_exp(terms);
  out.rhs = softplus(r_l - r_w);
  return out;
}

// ----------------------------- domain file I/O -----------------------------

constexpr int kDomainFormatVersion = 1;

inline json domain_to_json(const TabularDomain& d) {
  json j;
  j["format_version"] = kDomainFormatVersion;
  j["kind"] = "tabular-domain";
  j["vocab_size"] = d.vocab_size;
  j["beta"] = d.beta;
  j["prompts"] = json::array();
  for (const PromptEntry& e : d.prompts) {
    json p;
    p["prompt"] = e.prompt.tokens;
    p["responses"] = json::array();
    for (const TokenSeq& r : e.responses) p["responses"].push_back(r.tokens);
    p["pi_ref"] = e.pi_ref.p;
    p["reward"] = e.reward;
    p["pi_chosen"] = e.pi_chosen.p;
    j["prompts"].push_back(std::move(p));
  }
  return j;
}

inline TabularDomain domain_from_json(const json& j) {
  if (!j.contains("format_version") || j.at("format_version").get<int>() != kDomainFormatVersion) {
    throw ConfigError("domain file: missing or unsupported format_version");
  }
  TabularDomain d;
  d.vocab_size = j.at("vocab_size").get<int>();
  d.beta = j.at("beta").get<double>();
  for (const json& p : j.at("prompts")) {
    PromptEntry e;
    e.prompt = TokenSeq{p.at("prompt").get<std::vector<int>>(), d.vocab_size};
    for (const json& r : p.at("responses")) {
      e.responses.push_back(TokenSeq{r.get<std::vector<int>>(), d.vocab_size});
    }
    e.pi_ref = ProbTable{p.at("pi_ref").get<std::vector<double>>()};
    e.reward = p.at("reward").get<std::vector<double>>();
    e.pi_chosen = ProbTable{p.at("pi_chosen").get<std::vector<double>>()};
    d.prompts.push_back(std::move(e));
  }
  validate(d);
  return d;
}

inline void save_domain(const TabularDomain& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("save_domain: cannot write '" + path + "'");
  out << domain_to_json(d).dump(2) << '\n';
}

inline TabularDomain load_domain(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_domain: cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("load_domain: '" + path + "': " + e.what());
  }
  return domain_from_json(j);
}

}  // namespace dilab
