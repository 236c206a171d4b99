// Self-contained verification suites: each one generates its own domains,
// runs an equivalence or recovery check at a pinned tolerance, and returns
// one line per measured quantity. The CLI exposes these so the project's
// claims are demonstrable from a release binary, not only from the tests.
#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "dilab/common.hpp"
#include "dilab/datagen.hpp"
#include "dilab/dre.hpp"
#include "dilab/losses.hpp"
#include "dilab/policy.hpp"
#include "dilab/tabular.hpp"

namespace dilab {

struct CheckLine {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  std::string relation;  // how value compares against threshold to pass
  bool pass = false;
};

struct SuiteResult {
  std::string suite;
  std::vector<CheckLine> checks;
  bool pass = true;
  double seconds = 0.0;

  void add(const std::string& name, double value, double threshold, const std::string& relation) {
    bool ok = false;
    if (relation == "<") ok = value < threshold;
    else if (relation == "<=") ok = value <= threshold;
    else if (relation == ">") ok = value > threshold;
    else if (relation == ">=") ok = value >= threshold;
    checks.push_back({name, value, threshold, relation, ok});
    pass = pass && ok;
  }
};

namespace detail {

class SuiteTimer {
 public:
  explicit SuiteTimer(SuiteResult& r) : r_(r), t0_(std::chrono::steady_clock::now()) {}
  ~SuiteTimer() {
    r_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  SuiteResult& r_;
  std::chrono::steady_clock::time_point t0_;
};

inline GroundTruth random_domain(std::uint64_t seed, int prompts, int responses,
                                 double reward_scale = 1.0, double concentration = 1.0) {
  GenConfig cfg;
  cfg.num_prompts = prompts;
  cfg.responses_per_prompt = responses;
  cfg.vocab_size = std::max(24, responses + 2);
  cfg.response_length = 4;
  cfg.reward_spec = RewardRandomGaussian{reward_scale};
  cfg.ref_concentration = concentration;
  cfg.seed = seed;
  return build_domain(cfg);
}

}  // namespace detail

// ----------------------------- prop1 -----------------------------

// r* = ln(pi_chosen/pi_ref) must beat random perturbations on the exact
// reward-imitation objective, and its beta = 1 distillate must match
// pi_chosen in total variation.
inline SuiteResult run_suite_prop1(std::uint64_t seed = 1, double tol = 1e-10,
                                   int num_domains = 50, int perturbations = 200) {
  SuiteResult r;
  r.suite = "prop1";
  detail::SuiteTimer timer(r);
  Rng size_rng(derive_seed(seed, 71));
  double max_tv = 0.0;
  double min_gap = std::numeric_limits<double>::infinity();
  for (int k = 0; k < num_domains; ++k) {
    const int prompts = 2 + size_rng.uniform_int(7);     // 2..8
    const int responses = 2 + size_rng.uniform_int(15);  // 2..16
    const GroundTruth gt = detail::random_domain(derive_seed(seed, 100 + k), prompts, responses);
    const Prop1Report rep =
        check_proposition1(gt.domain, tol, derive_seed(seed, 200 + k), perturbations);
    max_tv = std::max(max_tv, rep.upper_level_tv);
    min_gap = std::min(min_gap, rep.lower_level_gap);
  }
  r.add("upper_level_tv_max", max_tv, tol, "<");
  r.add("lower_level_gap_min", min_gap, 0.0, ">");
  return r;
}

// ----------------------------- dre recovery -----------------------------

inline SuiteResult run_suite_dre_recovery(std::uint64_t seed = 1, double tol = 1e-3,
                                          int domains_per_h = 4, int steps = 12000,
                                          double lr = 0.02) {
  SuiteResult r;
  r.suite = "dre-recovery";
  detail::SuiteTimer timer(r);
  for (HKind kind : {HKind::lsif, HKind::ukl, HKind::bce}) {
    const HFunction h = HFunction::make(kind);
    double worst = 0.0;
    for (int k = 0; k < domains_per_h; ++k) {
      const GroundTruth gt = detail::random_domain(derive_seed(seed, 300 + k), 4, 8);
      const TabularRatioModel fit = fit_tabular_ratio(h, gt.domain, steps, lr);
      const TabularRatioModel star = TabularRatioModel::target_of(gt.domain);
      for (int x = 0; x < gt.domain.num_prompts(); ++x) {
        for (int y = 0; y < gt.domain.num_responses(x); ++y) {
          worst = std::max(worst, std::fabs(fit.ratio(x, y) - star.ratio(x, y)));
        }
      }
    }
    r.add(std::string("max_ratio_error_") + to_string(kind), worst, tol, "<");
  }
  return r;
}

// ----------------------------- dpo == dil-cpc -----------------------------

inline SuiteResult run_suite_dpo_cpc(std::uint64_t seed = 1, double tol = 1e-12,
                                     int pairs = 10000, double critic_tol = 1e-3) {
  SuiteResult r;
  r.suite = "dpo-cpc";
  detail::SuiteTimer timer(r);

  // Identity: dpo_loss(f_w, f_l, beta) vs the CPC route with scores
  // (beta f_w, beta f_l) and unit temperature.
  Rng rng(derive_seed(seed, 400));
  double max_diff = 0.0;
  for (double beta : {0.01, 0.1, 1.0, 2.5}) {
    for (int k = 0; k < pairs; ++k) {
      const double f_w = -20.0 + 40.0 * rng.uniform01();
      const double f_l = -20.0 + 40.0 * rng.uniform01();
      const double via_dpo = dpo_loss(f_w, f_l, beta);
      const double via_cpc = cpc_loss(beta * f_w, beta * f_l, 1.0);
      max_diff = std::max(max_diff, std::fabs(via_dpo - via_cpc));
    }
  }
  r.add("dpo_vs_cpc_max_abs_diff", max_diff, tol, "<");

  // Optimal-critic property: fitted scores recover ln r* differences.
  double worst_dev = 0.0;
  double max_offset = 0.0;
  for (int k = 0; k < 2; ++k) {
    const GroundTruth gt = detail::random_domain(derive_seed(seed, 410 + k), 4, 8);
    const CpcCheckReport rep = cpc_optimal_critic_check(gt.domain, 0.1, critic_tol);
    worst_dev = std::max(worst_dev, rep.max_pairwise_dev);
    max_offset = std::max(max_offset, rep.max_abs_offset);
  }
  r.add("cpc_critic_pairwise_dev", worst_dev, critic_tol, "<");
  // The per-prompt offset c(x) is real: absolute scores do not recover
  // ln r*, only differences do.
  r.add("cpc_critic_offset_observed", max_offset, 0.0, ">=");
  return r;
}

// ----------------------------- gradients -----------------------------

inline SuiteResult run_suite_gradients(std::uint64_t seed = 1, double tol_tabular = 1e-5,
                                       double tol_neural = 1e-4, int param_points = 10,
                                       int coords_per_point = 3) {
  SuiteResult r;
  r.suite = "gradients";
  detail::SuiteTimer timer(r);

  const GroundTruth gt = detail::random_domain(derive_seed(seed, 500), 3, 6);
  const TabularDomain& dom = gt.domain;

  std::vector<IdTriple> id_batch;
  Rng sample_rng(derive_seed(seed, 501));
  for (int x = 0; x < dom.num_prompts(); ++x) {
    for (int k = 0; k < 8; ++k) id_batch.push_back(bt_sample_pair_ids(dom, x, sample_rng));
  }
  std::vector<PreferenceTriple> tok_batch;
  for (const IdTriple& t : id_batch) tok_batch.push_back(materialize_triple(dom, t));

  std::vector<LossSpec> specs;
  for (const std::string& n : loss_names()) specs.push_back(make_loss_spec(n, 0.25));
  specs.push_back(make_loss_spec("bt-reward"));

  for (const LossSpec& spec : specs) {
    {  // tabular
      TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(dom);
      const TabularSoftmaxPolicy ref = clone_frozen(pol);
      Rng rng(derive_seed(seed, 510));
      double worst = 0.0;
      for (int p = 0; p < param_points; ++p) {
        for (double& v : pol.params()) v += 0.3 * rng.normal();
        const LossGrad lg =
            loss_and_grad(spec, pol, ref, std::span<const IdTriple>(id_batch));
        auto loss = [&] {
          return loss_and_grad(spec, pol, ref, std::span<const IdTriple>(id_batch)).value;
        };
        worst = std::max(worst,
                         finite_diff_check_informative(pol, loss, lg.grad, 1e-5, coords_per_point, rng));
      }
      r.add("fd_tabular_" + spec.name(), worst, tol_tabular, "<");
    }
    {  // tiny neural
      TinySeqPolicy pol(dom.vocab_size, derive_seed(seed, 520));
      const TinySeqPolicy ref = clone_frozen(pol);
      Rng rng(derive_seed(seed, 521));
      double worst = 0.0;
      for (int p = 0; p < param_points; ++p) {
        for (double& v : pol.params()) v += 0.05 * rng.normal();
        const LossGrad lg =
            loss_and_grad(spec, pol, ref, std::span<const PreferenceTriple>(tok_batch));
        auto loss = [&] {
          return loss_and_grad(spec, pol, ref, std::span<const PreferenceTriple>(tok_batch)).value;
        };
        worst = std::max(worst,
                         finite_diff_check_informative(pol, loss, lg.grad, 1e-4, coords_per_point, rng));
      }
      r.add("fd_neural_" + spec.name(), worst, tol_neural, "<");
    }
  }
  return r;
}

// ----------------------------- self-normalization -----------------------------

inline SuiteResult run_suite_self_norm(std::uint64_t seed = 1, double tol = 1e-12,
                                       int num_domains = 20) {
  SuiteResult r;
  r.suite = "self-norm";
  detail::SuiteTimer timer(r);
  Rng size_rng(derive_seed(seed, 600));
  double worst = 0.0;
  for (int k = 0; k < num_domains; ++k) {
    const int prompts = 2 + size_rng.uniform_int(7);
    const int responses = 2 + size_rng.uniform_int(15);
    const GroundTruth gt = detail::random_domain(derive_seed(seed, 610 + k), prompts, responses);
    for (double z : self_normalization_check(gt.domain)) {
      worst = std::max(worst, std::fabs(z - 1.0));
    }
  }
  // one 8x16 domain pinned on top of the random shapes
  const GroundTruth big = detail::random_domain(derive_seed(seed, 666), 8, 16);
  for (double z : self_normalization_check(big.domain)) worst = std::max(worst, std::fabs(z - 1.0));
  r.add("max_abs_z_minus_1", worst, tol, "<");
  return r;
}

// ----------------------------- preference sampling statistics -----------------------------

inline SuiteResult run_suite_bt_stats(std::uint64_t seed = 1, double alpha = 0.001,
                                      int draws = 100000) {
  SuiteResult r;
  r.suite = "bt-stats";
  detail::SuiteTimer timer(r);

  // Goodness of fit of sampled chosen frequencies against pi_chosen.
  const GroundTruth gt = detail::random_domain(derive_seed(seed, 700), 3, 6);
  const TabularDomain& dom = gt.domain;
  double chi2 = 0.0;
  double dof = 0.0;
  for (int x = 0; x < dom.num_prompts(); ++x) {
    Rng rng(derive_seed(seed, 710 + x));
    std::vector<long> counts(dom.num_responses(x), 0);
    for (int k = 0; k < draws; ++k) counts[bt_sample_pair_ids(dom, x, rng).chosen]++;
    for (int y = 0; y < dom.num_responses(x); ++y) {
      const double expected = dom.prompts[x].pi_chosen[y] * draws;
      chi2 += sqr(counts[y] - expected) / expected;
    }
    dof += dom.num_responses(x) - 1;
  }
  r.add("chi2_pvalue", chi_square_pvalue(chi2, dof), alpha, ">=");

  // The two worked rates on uniform two-response prompts.
  auto two_response_rate = [&](double gap, std::uint64_t stream) {
    const TabularDomain d = make_table_domain({ProbTable{{0.5, 0.5}}}, {{gap, 0.0}},
                                              {ProbTable{{sigmoid(gap), sigmoid(-gap)}}});
    Rng rng(derive_seed(seed, stream));
    long wins = 0;
    for (int k = 0; k < draws; ++k) {
      if (bt_sample_pair_ids(d, 0, rng).chosen == 0) ++wins;
    }
    return static_cast<double>(wins) / draws;
  };
  const double sigma = std::sqrt(0.5 * 0.5 / draws);
  r.add("rate_zero_gap_abs_err", std::fabs(two_response_rate(0.0, 720) - 0.5), 3.0 * sigma, "<");
  const double p75 = sigmoid(std::log(3.0));
  const double sigma75 = std::sqrt(p75 * (1.0 - p75) / draws);
  r.add("rate_ln3_gap_abs_err", std::fabs(two_response_rate(std::log(3.0), 721) - p75),
        3.0 * sigma75, "<");
  return r;
}

// ----------------------------- aggregate -----------------------------

inline std::vector<SuiteResult> run_all_suites(std::uint64_t seed = 1) {
  return {run_suite_prop1(seed),    run_suite_dre_recovery(seed), run_suite_dpo_cpc(seed),
          run_suite_gradients(seed), run_suite_self_norm(seed),    run_suite_bt_stats(seed)};
}

}  // namespace dilab
