// Deterministic mini-batch optimization over any LossSpec and policy, with
// full-dataset diagnostics per step and exact evaluation against a tabular
// domain. (seed, config, dataset, initial policy) fully determine every
// metrics row and the final parameters.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dilab/common.hpp"
#include "dilab/core.hpp"
#include "dilab/losses.hpp"
#include "dilab/optim.hpp"
#include "dilab/policy.hpp"
#include "dilab/tabular.hpp"

namespace dilab {

// ----------------------------- configuration -----------------------------

enum class Optimizer { plain_gradient, adaptive_moment };
enum class LrSchedule { constant, cosine_with_warmup };

inline const char* to_string(Optimizer o) {
  return o == Optimizer::plain_gradient ? "plain-gradient" : "adaptive-moment";
}
inline const char* to_string(LrSchedule s) {
  return s == LrSchedule::constant ? "constant" : "cosine-with-warmup";
}

struct OptimConfig {
  Optimizer optimizer = Optimizer::adaptive_moment;
  double lr = 0.05;
  LrSchedule schedule = LrSchedule::constant;
  double warmup_fraction = 0.1;
  int steps = 100;
  int batch_size = 16;
  std::uint64_t seed = 1;
  std::optional<double> grad_clip;
  int metrics_every = 1;  // full-dataset metrics cadence; 10 suits neural runs
};

inline void validate(const OptimConfig& c) {
  // lr = 0 is allowed: a null update is the cheapest determinism probe.
  if (!std::isfinite(c.lr) || c.lr < 0.0) throw ConfigError("OptimConfig: lr must be >= 0");
  if (c.warmup_fraction < 0.0 || c.warmup_fraction >= 1.0) {
    throw ConfigError("OptimConfig: warmup_fraction must be in [0, 1)");
  }
  if (c.steps < 0) throw ConfigError("OptimConfig: steps must be >= 0");
  if (c.batch_size < 1) throw ConfigError("OptimConfig: batch_size must be >= 1");
  if (c.metrics_every < 1) throw ConfigError("OptimConfig: metrics_every must be >= 1");
  if (c.grad_clip && !(*c.grad_clip > 0.0)) throw ConfigError("OptimConfig: grad_clip must be > 0");
}

// Linear ramp 0 -> lr over ceil(warmup_fraction * steps) steps, then cosine
// decay to 0 over the remainder. Constant schedule returns lr always.
inline double schedule_lr(const OptimConfig& cfg, int step) {
  if (step < 0 || step >= cfg.steps) throw ConfigError("schedule_lr: step out of range");
  if (cfg.schedule == LrSchedule::constant) return cfg.lr;
  const int warmup = static_cast<int>(std::ceil(cfg.warmup_fraction * cfg.steps));
  if (step < warmup) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double progress = (cfg.steps == warmup)
                              ? 0.0
                              : static_cast<double>(step - warmup) / static_cast<double>(cfg.steps - warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ----------------------------- metrics -----------------------------

struct MetricsRow {
  int step = 0;
  double loss = 0.0;
  double mean_chosen_logp = 0.0;
  double mean_rejected_logp = 0.0;
  double margin = 0.0;  // mean_chosen_logp - mean_rejected_logp
  double mean_chosen_log_ratio = 0.0;
  double mean_rejected_log_ratio = 0.0;
  double reverse_kl_to_chosen = std::numeric_limits<double>::quiet_NaN();  // tabular runs only
  double forward_kl_to_chosen = std::numeric_limits<double>::quiet_NaN();
  double expected_true_reward = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

inline const char* metrics_csv_header() {
  return "step,loss,mean_chosen_logp,mean_rejected_logp,margin,mean_chosen_log_ratio,"
         "mean_rejected_log_ratio,reverse_kl_to_chosen,forward_kl_to_chosen,"
         "expected_true_reward,lr";
}

inline void write_metrics_csv(std::span<const MetricsRow> rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("write_metrics_csv: cannot write '" + path + "'");
  out << metrics_csv_header() << '\n';
  for (const MetricsRow& r : rows) {
    out << r.step << ',' << fmt_double(r.loss) << ',' << fmt_double(r.mean_chosen_logp) << ','
        << fmt_double(r.mean_rejected_logp) << ',' << fmt_double(r.margin) << ','
        << fmt_double(r.mean_chosen_log_ratio) << ',' << fmt_double(r.mean_rejected_log_ratio)
        << ',' << fmt_double(r.reverse_kl_to_chosen) << ',' << fmt_double(r.forward_kl_to_chosen)
        << ',' << fmt_double(r.expected_true_reward) << ',' << fmt_double(r.lr) << '\n';
  }
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("read_metrics_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header()) {
    throw ConfigError("read_metrics_csv: bad header in '" + path + "'");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> vals;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t comma = line.find(',', pos);
      const std::string cell = line.substr(pos, comma == std::string::npos ? std::string::npos
                                                                           : comma - pos);
      vals.push_back(std::strtod(cell.c_str(), nullptr));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (vals.size() != 11) throw ConfigError("read_metrics_csv: bad row in '" + path + "'");
    MetricsRow r;
    r.step = static_cast<int>(vals[0]);
    r.loss = vals[1];
    r.mean_chosen_logp = vals[2];
    r.mean_rejected_logp = vals[3];
    r.margin = vals[4];
    r.mean_chosen_log_ratio = vals[5];
    r.mean_rejected_log_ratio = vals[6];
    r.reverse_kl_to_chosen = vals[7];
    r.forward_kl_to_chosen = vals[8];
    r.expected_true_reward = vals[9];
    r.lr = vals[10];
    rows.push_back(r);
  }
  return rows;
}

// ----------------------------- evaluation -----------------------------

struct EvalRecord {
  double reverse_kl_to_chosen = 0.0;
  double forward_kl_to_chosen = 0.0;
  double expected_true_reward = 0.0;
  double mean_chosen_log_ratio = 0.0;
  double mean_rejected_log_ratio = 0.0;
};

inline PolicyTable policy_table_of(const TabularSoftmaxPolicy& p, const TabularDomain& d) {
  if (p.num_prompts() != d.num_prompts()) throw ConfigError("evaluate: policy/domain mismatch");
  PolicyTable t;
  for (int x = 0; x < d.num_prompts(); ++x) {
    if (p.num_responses(x) != d.num_responses(x)) {
      throw ConfigError("evaluate: policy/domain response count mismatch");
    }
    t.rows.push_back(p.prob_table(x));
  }
  return t;
}

// Neural policies are renormalized over the domain's enumerated responses.
inline PolicyTable policy_table_of(const TinySeqPolicy& p, const TabularDomain& d) {
  PolicyTable t;
  for (int x = 0; x < d.num_prompts(); ++x) {
    const PromptEntry& e = d.prompts[x];
    std::vector<double> logp(e.responses.size());
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < e.responses.size(); ++y) {
      logp[y] = p.log_prob(e.prompt, e.responses[y]);
      m = std::max(m, logp[y]);
    }
    std::vector<double> w(logp.size());
    for (std::size_t y = 0; y < logp.size(); ++y) w[y] = std::exp(logp[y] - m);
    t.rows.push_back(normalize(w));
  }
  return t;
}

template <class Policy>
EvalRecord evaluate(const Policy& policy, const Policy& ref_policy, const TabularDomain& d) {
  const PolicyTable pi = policy_table_of(policy, d);
  const PolicyTable ref = policy_table_of(ref_policy, d);
  EvalRecord rec;
  for (int x = 0; x < d.num_prompts(); ++x) {
    const PromptEntry& e = d.prompts[x];
    rec.reverse_kl_to_chosen += reverse_kl(e.pi_chosen, pi.rows[x]);
    rec.forward_kl_to_chosen += forward_kl(e.pi_chosen, pi.rows[x]);
    for (std::size_t y = 0; y < e.responses.size(); ++y) {
      const double f = std::log(pi.rows[x][y]) - std::log(ref.rows[x][y]);
      rec.expected_true_reward += pi.rows[x][y] * e.reward[y] / d.num_prompts();
      rec.mean_chosen_log_ratio += e.pi_chosen[y] * f / d.num_prompts();
      rec.mean_rejected_log_ratio += e.pi_ref[y] * f / d.num_prompts();
    }
  }
  rec.reverse_kl_to_chosen /= d.num_prompts();
  rec.forward_kl_to_chosen /= d.num_prompts();
  return rec;
}

// ----------------------------- training -----------------------------

// Non-finite loss or parameters: training stops, the last good parameter
// vector rides along so callers can checkpoint it.
class TrainAbortError : public NumericError {
 public:
  TrainAbortError(long step, std::vector<double> last_good)
      : NumericError("training aborted: non-finite loss", step),
        last_good_params_(std::move(last_good)) {}
  const std::vector<double>& last_good_params() const { return last_good_params_; }

 private:
  std::vector<double> last_good_params_;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  double final_loss = 0.0;
};

namespace detail {

template <class Policy, class Triple>
MetricsRow full_metrics(int step, double lr, const LossSpec& spec, const Policy& policy,
                        const Policy& ref, std::span<const Triple> data,
                        const TabularDomain* domain) {
  MetricsRow row;
  row.step = step;
  row.lr = lr;
  if (spec.kind == LossKind::sft) {
    row.loss = sft_loss(policy, data);
  } else {
    double total = 0.0;
    for (const Triple& t : data) {
      const double f_w = log_ratio(policy, ref, prompt_of(t), chosen_of(t), spec.ratio_config);
      const double f_l = log_ratio(policy, ref, prompt_of(t), rejected_of(t), spec.ratio_config);
      total += pair_loss_derivs(spec, f_w, f_l).value;
    }
    row.loss = total / static_cast<double>(data.size());
  }
  for (const Triple& t : data) {
    row.mean_chosen_logp += policy.log_prob(prompt_of(t), chosen_of(t));
    row.mean_rejected_logp += policy.log_prob(prompt_of(t), rejected_of(t));
    row.mean_chosen_log_ratio +=
        log_ratio(policy, ref, prompt_of(t), chosen_of(t), spec.ratio_config);
    row.mean_rejected_log_ratio +=
        log_ratio(policy, ref, prompt_of(t), rejected_of(t), spec.ratio_config);
  }
  const double n = static_cast<double>(data.size());
  row.mean_chosen_logp /= n;
  row.mean_rejected_logp /= n;
  row.mean_chosen_log_ratio /= n;
  row.mean_rejected_log_ratio /= n;
  row.margin = row.mean_chosen_logp - row.mean_rejected_logp;
  if (domain) {
    const EvalRecord rec = evaluate(policy, ref, *domain);
    row.reverse_kl_to_chosen = rec.reverse_kl_to_chosen;
    row.forward_kl_to_chosen = rec.forward_kl_to_chosen;
    row.expected_true_reward = rec.expected_true_reward;
  }
  return row;
}

// Fisher-Yates with our own uniform_int so the permutation is the same on
// every platform.
inline void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i) {
    std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
  }
}

}  // namespace detail

template <class Policy, class Triple>
TrainResult train(Policy& policy, const Policy& ref_policy, const std::vector<Triple>& data,
                  const LossSpec& spec, const OptimConfig& cfg,
                  const TabularDomain* eval_domain = nullptr) {
  validate(cfg);
  if (data.empty()) throw ConfigError("train: empty dataset");

  TrainResult result;
  const std::span<const Triple> all(data);
  const double lr0 = cfg.steps > 0 ? schedule_lr(cfg, 0) : 0.0;  // steps = 0: metrics only
  result.metrics.push_back(
      detail::full_metrics(0, lr0, spec, policy, ref_policy, all, eval_domain));

  Rng shuffle_rng(derive_seed(cfg.seed, 3000));
  std::vector<int> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  detail::shuffle_indices(order, shuffle_rng);
  std::size_t pos = 0;

  AdamState adam(policy.params().size());
  std::vector<Triple> batch;
  std::vector<double> before_step;

  for (int step = 0; step < cfg.steps; ++step) {
    if (pos >= order.size()) {
      detail::shuffle_indices(order, shuffle_rng);
      pos = 0;
    }
    batch.clear();
    const std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - pos);
    for (std::size_t k = 0; k < take; ++k) batch.push_back(data[order[pos + k]]);
    pos += take;

    before_step.assign(policy.params().begin(), policy.params().end());
    LossGrad lg = loss_and_grad(spec, policy, ref_policy, std::span<const Triple>(batch));
    if (!std::isfinite(lg.value)) throw TrainAbortError(step, std::move(before_step));

    if (cfg.grad_clip) clip_grad_norm(lg.grad, *cfg.grad_clip);
    const double lr = schedule_lr(cfg, step);
    if (cfg.optimizer == Optimizer::plain_gradient) {
      sgd_step(policy.params(), lg.grad, lr);
    } else {
      adam_step(adam, policy.params(), lg.grad, lr);
    }
    for (double p : policy.params()) {
      if (!std::isfinite(p)) throw TrainAbortError(step, std::move(before_step));
    }

    const int done = step + 1;
    if (done % cfg.metrics_every == 0 || done == cfg.steps) {
      result.metrics.push_back(
          detail::full_metrics(done, lr, spec, policy, ref_policy, all, eval_domain));
    }
  }
  result.final_loss = result.metrics.back().loss;
  return result;
}

// ----------------------------- run comparison -----------------------------

struct RunSummary {
  std::string name;
  double initial_chosen_logp = 0.0;
  double final_chosen_logp = 0.0;
  double min_chosen_logp = 0.0;
  double chosen_decline = 0.0;  // initial - minimum over training
  double initial_margin = 0.0;
  double final_margin = 0.0;
  double max_margin = 0.0;
  double final_loss = 0.0;
  double final_reverse_kl = 0.0;
};

struct NamedLog {
  std::string name;
  std::vector<MetricsRow> rows;
};

inline std::vector<RunSummary> compare_runs(std::span<const NamedLog> logs) {
  if (logs.empty()) throw ConfigError("compare_runs: no logs");
  for (const NamedLog& l : logs) {
    if (l.rows.empty()) throw ConfigError("compare_runs: empty log '" + l.name + "'");
    if (l.rows.size() != logs.front().rows.size()) {
      throw ConfigError("compare_runs: step grids differ ('" + l.name + "')");
    }
    for (std::size_t i = 0; i < l.rows.size(); ++i) {
      if (l.rows[i].step != logs.front().rows[i].step) {
        throw ConfigError("compare_runs: step grids differ ('" + l.name + "')");
      }
    }
  }
  std::vector<RunSummary> out;
  for (const NamedLog& l : logs) {
    RunSummary s;
    s.name = l.name;
    s.initial_chosen_logp = l.rows.front().mean_chosen_logp;
    s.final_chosen_logp = l.rows.back().mean_chosen_logp;
    s.min_chosen_logp = l.rows.front().mean_chosen_logp;
    s.initial_margin = l.rows.front().margin;
    s.final_margin = l.rows.back().margin;
    s.max_margin = l.rows.front().margin;
    for (const MetricsRow& r : l.rows) {
      s.min_chosen_logp = std::min(s.min_chosen_logp, r.mean_chosen_logp);
      s.max_margin = std::max(s.max_margin, r.margin);
    }
    s.chosen_decline = s.initial_chosen_logp - s.min_chosen_logp;
    s.final_loss = l.rows.back().loss;
    s.final_reverse_kl = l.rows.back().reverse_kl_to_chosen;
    out.push_back(std::move(s));
  }
  return out;
}

inline void write_summary_csv(std::span<const RunSummary> rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("write_summary_csv: cannot write '" + path + "'");
  out << "name,initial_chosen_logp,final_chosen_logp,min_chosen_logp,chosen_decline,"
         "initial_margin,final_margin,max_margin,final_loss,final_reverse_kl\n";
  for (const RunSummary& s : rows) {
    out << s.name << ',' << fmt_double(s.initial_chosen_logp) << ','
        << fmt_double(s.final_chosen_logp) << ',' << fmt_double(s.min_chosen_logp) << ','
        << fmt_double(s.chosen_decline) << ',' << fmt_double(s.initial_margin) << ','
        << fmt_double(s.final_margin) << ',' << fmt_double(s.max_margin) << ','
        << fmt_double(s.final_loss) << ',' << fmt_double(s.final_reverse_kl) << '\n';
  }
}

}  // namespace dilab
