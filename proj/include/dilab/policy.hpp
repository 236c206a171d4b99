// Differentiable conditional policies with exact hand-derived gradients:
// a tabular softmax policy addressed by (prompt id, response id) and a tiny
// fixed-window autoregressive scorer addressed by token sequences. Both
// expose the same surface so the loss and trainer templates treat them
// interchangeably:
//
//   double log_prob(X x, Y y) const;
//   void   accum_grad_log_prob(X x, Y y, double coeff, std::span<double> acc) const;
//   int    response_token_count(X x, Y y) const;
//   std::span<double> params();  const ParamLayout& layout();
//
// Reference policies are plain value copies (clone_frozen): training the
// source never touches the clone.
#pragma once

#include <cmath>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dilab/common.hpp"
#include "dilab/core.hpp"
#include "dilab/tabular.hpp"

namespace dilab {

// ----------------------------- parameter layout -----------------------------

struct LayoutSegment {
  std::string name;
  int size = 0;
};

struct ParamLayout {
  std::vector<LayoutSegment> segments;

  int total() const {
    int n = 0;
    for (const LayoutSegment& s : segments) n += s.size;
    return n;
  }
};

inline std::vector<std::vector<double>> unflatten(const ParamLayout& layout,
                                                  std::span<const double> flat) {
  if (static_cast<int>(flat.size()) != layout.total()) {
    throw ConfigError("unflatten: parameter count does not match layout");
  }
  std::vector<std::vector<double>> out;
  std::size_t off = 0;
  for (const LayoutSegment& s : layout.segments) {
    out.emplace_back(flat.begin() + off, flat.begin() + off + s.size);
    off += s.size;
  }
  return out;
}

inline std::vector<double> flatten(const ParamLayout& layout,
                                   const std::vector<std::vector<double>>& parts) {
  if (parts.size() != layout.segments.size()) throw ConfigError("flatten: segment count mismatch");
  std::vector<double> out;
  out.reserve(layout.total());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (static_cast<int>(parts[i].size()) != layout.segments[i].size) {
      throw ConfigError("flatten: segment '" + layout.segments[i].name + "' size mismatch");
    }
    out.insert(out.end(), parts[i].begin(), parts[i].end());
  }
  return out;
}

// ----------------------------- tabular softmax policy -----------------------------

class TabularSoftmaxPolicy {
 public:
  TabularSoftmaxPolicy() = default;

  explicit TabularSoftmaxPolicy(std::vector<int> row_sizes)
      : row_sizes_(std::move(row_sizes)) {
    init_offsets();
    params_.assign(offsets_.back(), 0.0);
    resp_len_.resize(row_sizes_.size());
    for (std::size_t x = 0; x < row_sizes_.size(); ++x) resp_len_[x].assign(row_sizes_[x], 1);
  }

  // pi_theta^0 = pi_ref: logits are the reference log-probabilities, token
  // counts come from the domain so length normalization sees real lengths.
  static TabularSoftmaxPolicy from_reference(const TabularDomain& d) {
    TabularSoftmaxPolicy p(row_sizes_of(d));
    for (int x = 0; x < d.num_prompts(); ++x) {
      for (int y = 0; y < d.num_responses(x); ++y) {
        p.logit(x, y) = std::log(d.prompts[x].pi_ref[y]);
        p.resp_len_[x][y] = static_cast<int>(d.prompts[x].responses[y].tokens.size());
      }
    }
    return p;
  }

  static TabularSoftmaxPolicy from_tables(const std::vector<ProbTable>& rows) {
    std::vector<int> sizes;
    for (const ProbTable& r : rows) sizes.push_back(static_cast<int>(r.size()));
    TabularSoftmaxPolicy p(std::move(sizes));
    for (std::size_t x = 0; x < rows.size(); ++x) {
      for (std::size_t y = 0; y < rows[x].size(); ++y) {
        if (rows[x][y] <= 0.0) throw ConfigError("from_tables: zero probability has no finite logit");
        p.logit(static_cast<int>(x), static_cast<int>(y)) = std::log(rows[x][y]);
      }
    }
    return p;
  }

  int num_prompts() const { return static_cast<int>(row_sizes_.size()); }
  int num_responses(int x) const { return row_sizes_[x]; }

  double& logit(int x, int y) { return params_[offsets_[x] + y]; }
  double logit(int x, int y) const { return params_[offsets_[x] + y]; }

  double log_prob(int x, int y) const {
    check_ids(x, y);
    const std::span<const double> row(params_.data() + offsets_[x], row_sizes_[x]);
    return row[y] - log_sum_exp(row);
  }

  // d log pi(y|x) / d logit(x, j) = 1{j==y} - softmax_j(row); rows sum to 0.
  void accum_grad_log_prob(int x, int y, double coeff, std::span<double> acc) const {
    check_ids(x, y);
    const std::span<const double> row(params_.data() + offsets_[x], row_sizes_[x]);
    const double lse = log_sum_exp(row);
    for (int j = 0; j < row_sizes_[x]; ++j) {
      const double soft = std::exp(row[j] - lse);
      acc[offsets_[x] + j] += coeff * ((j == y ? 1.0 : 0.0) - soft);
    }
  }

  int response_token_count(int x, int y) const {
    check_ids(x, y);
    return resp_len_[x][y];
  }

  ProbTable prob_table(int x) const {
    if (x < 0 || x >= num_prompts()) throw ConfigError("prob_table: prompt id out of range");
    const std::span<const double> row(params_.data() + offsets_[x], row_sizes_[x]);
    const double lse = log_sum_exp(row);
    ProbTable t;
    t.p.reserve(row.size());
    for (double l : row) t.p.push_back(std::exp(l - lse));
    return t;
  }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  ParamLayout layout() const {
    ParamLayout l;
    for (std::size_t x = 0; x < row_sizes_.size(); ++x) {
      l.segments.push_back({"logits/" + std::to_string(x), row_sizes_[x]});
    }
    return l;
  }

  const std::vector<int>& row_sizes() const { return row_sizes_; }

 private:
  static std::vector<int> row_sizes_of(const TabularDomain& d) {
    std::vector<int> sizes;
    for (int x = 0; x < d.num_prompts(); ++x) sizes.push_back(d.num_responses(x));
    return sizes;
  }

  void init_offsets() {
    offsets_.assign(row_sizes_.size() + 1, 0);
    for (std::size_t x = 0; x < row_sizes_.size(); ++x) {
      if (row_sizes_[x] < 1) throw ConfigError("TabularSoftmaxPolicy: empty row");
      offsets_[x + 1] = offsets_[x] + row_sizes_[x];
    }
  }

  void check_ids(int x, int y) const {
    if (x < 0 || x >= num_prompts() || y < 0 || y >= row_sizes_[x]) {
      throw ConfigError("TabularSoftmaxPolicy: (prompt, response) id out of range");
    }
  }

  std::vector<int> row_sizes_;
  std::vector<int> offsets_;
  std::vector<double> params_;
  std::vector<std::vector<int>> resp_len_;
};

// ----------------------------- tiny autoregressive policy -----------------------------

// Deliberately minimal next-token scorer: the context is the last `window`
// tokens of (prompt ++ generated-so-far); their embeddings are mixed by
// per-position weights and projected to vocabulary logits. The
// autoregressive factorization ln pi(y|x) = sum_t ln p(y_t | x, y_<t) is
// exact, which is what the oracle tests rely on.
class TinySeqPolicy {
 public:
  TinySeqPolicy(int vocab_size, std::uint64_t seed, int embed_dim = 16, int window = 8)
      : vocab_(vocab_size), dim_(embed_dim), window_(window), seed_(seed) {
    if (vocab_ < 2) throw ConfigError("TinySeqPolicy: vocab_size must be >= 2");
    if (dim_ < 1 || window_ < 1) throw ConfigError("TinySeqPolicy: bad architecture constants");
    params_.assign(static_cast<std::size_t>(2 * vocab_ * dim_ + window_), 0.0);
    Rng rng(derive_seed(seed, 0x7e11));
    for (int i = 0; i < vocab_ * dim_; ++i) params_[i] = 0.08 * rng.normal();  // embeddings
    for (int i = 0; i < window_; ++i) params_[vocab_ * dim_ + i] = 1.0 / window_;  // mix
    const int proj_off = vocab_ * dim_ + window_;
    for (int i = 0; i < vocab_ * dim_; ++i) params_[proj_off + i] = 0.08 * rng.normal();
  }

  int vocab_size() const { return vocab_; }
  int embed_dim() const { return dim_; }
  int window() const { return window_; }
  std::uint64_t init_seed() const { return seed_; }

  double log_prob(const TokenSeq& x, const TokenSeq& y) const {
    check_seqs(x, y);
    double total = 0.0;
    std::vector<double> logits(vocab_);
    for (std::size_t t = 0; t < y.tokens.size(); ++t) {
      next_token_logits(x, y, t, logits);
      total += logits[y.tokens[t]] - log_sum_exp(logits);
    }
    return total;
  }

  void accum_grad_log_prob(const TokenSeq& x, const TokenSeq& y, double coeff,
                           std::span<double> acc) const {
    check_seqs(x, y);
    const int mix_off = vocab_ * dim_;
    const int proj_off = mix_off + window_;
    std::vector<double> h(dim_);
    std::vector<double> logits(vocab_);
    std::vector<double> dh(dim_);
    for (std::size_t t = 0; t < y.tokens.size(); ++t) {
      const auto ctx = context_at(x, y, t);
      hidden_state(ctx, h);
      for (int v = 0; v < vocab_; ++v) {
        logits[v] = 0.0;
        for (int k = 0; k < dim_; ++k) logits[v] += params_[proj_off + v * dim_ + k] * h[k];
      }
      const double lse = log_sum_exp(logits);
      std::fill(dh.begin(), dh.end(), 0.0);
      for (int v = 0; v < vocab_; ++v) {
        const double delta = coeff * ((v == y.tokens[t] ? 1.0 : 0.0) - std::exp(logits[v] - lse));
        for (int k = 0; k < dim_; ++k) {
          acc[proj_off + v * dim_ + k] += delta * h[k];
          dh[k] += delta * params_[proj_off + v * dim_ + k];
        }
      }
      for (std::size_t i = 0; i < ctx.size(); ++i) {
        const int tok = ctx[i];
        const double mix = params_[mix_off + static_cast<int>(i)];
        double dot = 0.0;
        for (int k = 0; k < dim_; ++k) {
          dot += dh[k] * params_[tok * dim_ + k];
          acc[tok * dim_ + k] += mix * dh[k];
        }
        acc[mix_off + static_cast<int>(i)] += dot;
      }
    }
  }

  // Distribution over the next token given prompt + partial response; used
  // by tests to certify per-position normalization.
  std::vector<double> next_token_distribution(const TokenSeq& x, const TokenSeq& y_prefix,
                                              std::size_t t) const {
    std::vector<double> logits(vocab_);
    next_token_logits(x, y_prefix, t, logits);
    const double lse = log_sum_exp(logits);
    for (double& l : logits) l = std::exp(l - lse);
    return logits;
  }

  int response_token_count(const TokenSeq&, const TokenSeq& y) const {
    return static_cast<int>(y.tokens.size());
  }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  ParamLayout layout() const {
    ParamLayout l;
    l.segments.push_back({"embeddings", vocab_ * dim_});
    l.segments.push_back({"mix_weights", window_});
    l.segments.push_back({"projection", vocab_ * dim_});
    return l;
  }

 private:
  void check_seqs(const TokenSeq& x, const TokenSeq& y) const {
    for (const TokenSeq* s : {&x, &y}) {
      if (s->tokens.empty()) throw ConfigError("TinySeqPolicy: empty sequence");
      for (int t : s->tokens) {
        if (t < 0 || t >= vocab_) throw ConfigError("TinySeqPolicy: token id out of vocabulary");
      }
    }
  }

  // Most recent history token first; at most `window` entries.
  std::vector<int> context_at(const TokenSeq& x, const TokenSeq& y, std::size_t t) const {
    std::vector<int> ctx;
    ctx.reserve(window_);
    // history = x.tokens ++ y.tokens[0..t)
    for (std::size_t back = 0; back < static_cast<std::size_t>(window_); ++back) {
      const std::size_t hist_len = x.tokens.size() + t;
      if (back + 1 > hist_len) break;
      const std::size_t idx = hist_len - 1 - back;
      ctx.push_back(idx < x.tokens.size() ? x.tokens[idx]
                                          : y.tokens[idx - x.tokens.size()]);
    }
    return ctx;
  }

  void hidden_state(const std::vector<int>& ctx, std::vector<double>& h) const {
    const int mix_off = vocab_ * dim_;
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t i = 0; i < ctx.size(); ++i) {
      const double mix = params_[mix_off + static_cast<int>(i)];
      for (int k = 0; k < dim_; ++k) h[k] += mix * params_[ctx[i] * dim_ + k];
    }
  }

  void next_token_logits(const TokenSeq& x, const TokenSeq& y, std::size_t t,
                         std::vector<double>& logits) const {
    const auto ctx = context_at(x, y, t);
    std::vector<double> h(dim_);
    hidden_state(ctx, h);
    const int proj_off = vocab_ * dim_ + window_;
    for (int v = 0; v < vocab_; ++v) {
      logits[v] = 0.0;
      for (int k = 0; k < dim_; ++k) logits[v] += params_[proj_off + v * dim_ + k] * h[k];
    }
  }

  int vocab_;
  int dim_;
  int window_;
  std::uint64_t seed_;
  std::vector<double> params_;
};

// ----------------------------- shared helpers -----------------------------

// Deep immutable snapshot; value semantics make independence automatic.
template <class Policy>
Policy clone_frozen(const Policy& p) {
  return p;
}

template <class Policy, class X, class Y>
std::vector<double> grad_log_prob(const Policy& p, const X& x, const Y& y) {
  std::vector<double> g(p.params().size(), 0.0);
  p.accum_grad_log_prob(x, y, 1.0, g);
  return g;
}

namespace detail {

template <class Policy, class LossFn>
double central_difference(Policy& policy, LossFn&& loss, int i, double epsilon) {
  std::span<double> params = policy.params();
  const double saved = params[i];
  params[i] = saved + epsilon;
  const double up = loss();
  params[i] = saved - epsilon;
  const double down = loss();
  params[i] = saved;
  if (!std::isfinite(up) || !std::isfinite(down)) {
    throw NumericError("finite_diff_check: non-finite loss", i);
  }
  return (up - down) / (2.0 * epsilon);
}

}  // namespace detail

// Central finite differences on `points` random coordinates against a
// supplied analytic gradient. Relative error uses max(|analytic|, 1e-8) as
// denominator. The loss closure must be deterministic in the parameters.
template <class Policy, class LossFn>
double finite_diff_check(Policy& policy, LossFn&& loss, std::span<const double> analytic_grad,
                         double epsilon, int points, Rng& rng) {
  std::span<double> params = policy.params();
  if (analytic_grad.size() != params.size()) throw ConfigError("finite_diff_check: grad size mismatch");
  double max_rel = 0.0;
  for (int k = 0; k < points; ++k) {
    const int i = rng.uniform_int(static_cast<int>(params.size()));
    const double fd = detail::central_difference(policy, loss, i, epsilon);
    const double denom = std::max(std::fabs(analytic_grad[i]), 1e-8);
    max_rel = std::max(max_rel, std::fabs(fd - analytic_grad[i]) / denom);
  }
  return max_rel;
}

// Same check restricted to coordinates with |analytic| >= grad_floor. A
// coordinate whose chosen/rejected contributions cancel to ~1e-7 cannot be
// resolved to 1e-5 relative accuracy by 1e-5 central differences in double
// precision (the (up - down) cancellation noise alone is ~1e-10), so the
// relative-error criterion is meaningful only on informative coordinates;
// near-zero coordinates get their own absolute check in the tests.
template <class Policy, class LossFn>
double finite_diff_check_informative(Policy& policy, LossFn&& loss,
                                     std::span<const double> analytic_grad, double epsilon,
                                     int points, Rng& rng, double grad_floor = 1e-4) {
  std::span<double> params = policy.params();
  if (analytic_grad.size() != params.size()) throw ConfigError("finite_diff_check: grad size mismatch");
  double max_rel = 0.0;
  int checked = 0;
  for (int attempt = 0; attempt < points * 50 && checked < points; ++attempt) {
    const int i = rng.uniform_int(static_cast<int>(params.size()));
    if (std::fabs(analytic_grad[i]) < grad_floor) continue;
    const double fd = detail::central_difference(policy, loss, i, epsilon);
    max_rel = std::max(max_rel, std::fabs(fd - analytic_grad[i]) / std::fabs(analytic_grad[i]));
    ++checked;
  }
  if (checked == 0) throw ConfigError("finite_diff_check_informative: no coordinate above floor");
  return max_rel;
}

// ----------------------------- checkpoint I/O -----------------------------

constexpr int kCheckpointFormatVersion = 1;

inline json layout_to_json(const ParamLayout& l) {
  json arr = json::array();
  for (const LayoutSegment& s : l.segments) {
    arr.push_back(json{{"name", s.name}, {"size", s.size}});
  }
  return arr;
}

inline json checkpoint_to_json(const TabularSoftmaxPolicy& p) {
  json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["kind"] = "policy-checkpoint";
  j["policy_type"] = "tabular-softmax";
  j["arch"] = json{{"row_sizes", p.row_sizes()}};
  j["init_seed"] = 0;
  j["layout"] = layout_to_json(p.layout());
  j["params"] = std::vector<double>(p.params().begin(), p.params().end());
  return j;
}

inline json checkpoint_to_json(const TinySeqPolicy& p) {
  json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["kind"] = "policy-checkpoint";
  j["policy_type"] = "tiny-seq";
  j["arch"] = json{{"vocab_size", p.vocab_size()},
                   {"embed_dim", p.embed_dim()},
                   {"window", p.window()}};
  j["init_seed"] = p.init_seed();
  j["layout"] = layout_to_json(p.layout());
  j["params"] = std::vector<double>(p.params().begin(), p.params().end());
  return j;
}

template <class Policy>
void save_checkpoint(const Policy& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("save_checkpoint: cannot write '" + path + "'");
  out << checkpoint_to_json(p).dump(2) << '\n';
}

inline json load_checkpoint_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_checkpoint: cannot open '" + path + "'");
  json j = json::parse(in);
  if (j.value("format_version", -1) != kCheckpointFormatVersion) {
    throw ConfigError("load_checkpoint: unsupported format_version in '" + path + "'");
  }
  return j;
}

inline TabularSoftmaxPolicy load_tabular_checkpoint(const std::string& path) {
  json j = load_checkpoint_json(path);
  if (j.at("policy_type") != "tabular-softmax") {
    throw ConfigError("load_tabular_checkpoint: wrong policy_type");
  }
  TabularSoftmaxPolicy p(j.at("arch").at("row_sizes").get<std::vector<int>>());
  auto vals = j.at("params").get<std::vector<double>>();
  if (vals.size() != p.params().size()) throw ConfigError("checkpoint: parameter count mismatch");
  std::copy(vals.begin(), vals.end(), p.params().begin());
  return p;
}

inline TinySeqPolicy load_tiny_checkpoint(const std::string& path) {
  json j = load_checkpoint_json(path);
  if (j.at("policy_type") != "tiny-seq") throw ConfigError("load_tiny_checkpoint: wrong policy_type");
  const json& a = j.at("arch");
  TinySeqPolicy p(a.at("vocab_size").get<int>(), j.at("init_seed").get<std::uint64_t>(),
                  a.at("embed_dim").get<int>(), a.at("window").get<int>());
  auto vals = j.at("params").get<std::vector<double>>();
  if (vals.size() != p.params().size()) throw ConfigError("checkpoint: parameter count mismatch");
  std::copy(vals.begin(), vals.end(), p.params().begin());
  return p;
}

}  // namespace dilab
