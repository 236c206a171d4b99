// Ground-truth synthetic worlds and pairwise-preference sampling under the
// sigmoid preference model. The chosen-response marginal pi_chosen is
// derived in closed form as the exact law of the sampler, so every
// downstream oracle can compare against it at machine precision.
//
// Sampling process per pair: draw (y_a, y_b) i.i.d. from pi_ref(.|x),
// resample until the ids are distinct, then label y_a chosen with
// probability sigmoid(r(x,y_a) - r(x,y_b)). Its marginal, conditioned on
// distinctness, is
//
//   pi_chosen(y|x) = 2 pi_ref(y) sum_{y' != y} pi_ref(y') sigmoid(r_y - r_y')
//                    / (1 - sum_y pi_ref(y)^2),
//
// which sums to 1 because sigmoid(z) + sigmoid(-z) = 1. With a uniform
// pi_ref and constant reward this reduces to pi_ref itself; for a skewed
// pi_ref the distinctness conditioning moves mass (see tests).
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "dilab/common.hpp"
#include "dilab/core.hpp"
#include "dilab/tabular.hpp"

namespace dilab {

// ----------------------------- configuration -----------------------------

struct RewardRandomGaussian {
  double scale = 1.0;
};
struct RewardLinearTokenSum {
  double weight = 0.1;
};
using RewardSpec = std::variant<RewardRandomGaussian, RewardLinearTokenSum>;

inline std::string to_string(const RewardSpec& r) {
  if (const auto* g = std::get_if<RewardRandomGaussian>(&r)) {
    return "random-gaussian(" + fmt_double(g->scale) + ")";
  }
  const auto& l = std::get<RewardLinearTokenSum>(r);
  return "linear-in-token-sum(" + fmt_double(l.weight) + ")";
}

// Accepts "random-gaussian(scale)" / "linear-in-token-sum(weight)".
inline RewardSpec parse_reward_spec(const std::string& text) {
  const auto open = text.find('(');
  const auto close = text.rfind(')');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw ConfigError("reward_spec: expected name(value), got '" + text + "'");
  }
  const std::string name = text.substr(0, open);
  const std::string arg = text.substr(open + 1, close - open - 1);
  double value = 0.0;
  try {
    value = std::stod(arg);
  } catch (const std::exception&) {
    throw ConfigError("reward_spec: bad numeric argument '" + arg + "'");
  }
  if (name == "random-gaussian") return RewardRandomGaussian{value};
  if (name == "linear-in-token-sum") return RewardLinearTokenSum{value};
  throw ConfigError("reward_spec: unknown kind '" + name +
                    "' (valid: random-gaussian, linear-in-token-sum)");
}

struct GenConfig {
  int num_prompts = 4;
  int responses_per_prompt = 8;
  int vocab_size = 16;
  int response_length = 4;
  RewardSpec reward_spec = RewardRandomGaussian{1.0};
  double ref_concentration = 1.0;  // 0 gives an exactly uniform pi_ref
  int pairs_per_prompt = 16;
  std::uint64_t seed = 1;
  double beta = 1.0;
};

inline void validate(const GenConfig& c) {
  if (c.num_prompts < 1) throw ConfigError("GenConfig: num_prompts must be >= 1");
  if (c.responses_per_prompt < 2 || c.responses_per_prompt > kMaxResponsesPerPrompt) {
    throw ConfigError("GenConfig: responses_per_prompt must be in [2, 64], got " +
                      std::to_string(c.responses_per_prompt));
  }
  if (c.vocab_size < 1) throw ConfigError("GenConfig: vocab_size must be >= 1");
  if (c.response_length < 1) throw ConfigError("GenConfig: response_length must be >= 1");
  if (c.ref_concentration < 0.0) throw ConfigError("GenConfig: ref_concentration must be >= 0");
  if (c.pairs_per_prompt < 0) throw ConfigError("GenConfig: pairs_per_prompt must be >= 0");
  if (!(c.beta > 0.0)) throw ConfigError("GenConfig: beta must be positive");
}

struct GroundTruth {
  TabularDomain domain;
  GenConfig config;
};

// ----------------------------- chosen-response marginal -----------------------------

inline std::vector<ProbTable> derive_chosen_distribution(const TabularDomain& d) {
  std::vector<ProbTable> out;
  out.reserve(d.prompts.size());
  for (const PromptEntry& e : d.prompts) {
    const std::size_t n = e.responses.size();
    double sum_sq = 0.0;
    for (double p : e.pi_ref.p) {
      if (p <= 0.0) throw ConfigError("derive_chosen_distribution: pi_ref support violation");
      sum_sq += p * p;
    }
    const double p_distinct = 1.0 - sum_sq;
    if (p_distinct <= 0.0) {
      throw ConfigError("derive_chosen_distribution: degenerate pi_ref, no distinct pairs");
    }
    std::vector<double> num(n, 0.0);
    for (std::size_t y = 0; y < n; ++y) {
      double s = 0.0;
      for (std::size_t yp = 0; yp < n; ++yp) {
        if (yp == y) continue;
        s += e.pi_ref[yp] * sigmoid(e.reward[y] - e.reward[yp]);
      }
      num[y] = 2.0 * e.pi_ref[y] * s / p_distinct;
    }
    out.push_back(ProbTable{std::move(num)});
  }
  return out;
}

// ----------------------------- domain construction -----------------------------

namespace detail {

inline TokenSeq random_seq(Rng& rng, int length, int vocab) {
  TokenSeq s;
  s.vocab_size = vocab;
  s.tokens.reserve(length);
  for (int i = 0; i < length; ++i) s.tokens.push_back(rng.uniform_int(vocab));
  return s;
}

inline TokenSeq distinct_seq(Rng& rng, int length, int vocab,
                             std::set<std::vector<int>>& used, const char* what) {
  for (int attempt = 0; attempt < 200; ++attempt) {
    TokenSeq s = random_seq(rng, length, vocab);
    if (used.insert(s.tokens).second) return s;
  }
  throw ConfigError(std::string("build_domain: could not draw a distinct ") + what +
                    " after 200 attempts (vocab/length too small)");
}

}  // namespace detail

// Fully deterministic in the seed; each prompt uses a derived sub-seed so
// prompts could be generated in parallel without changing the output.
inline GroundTruth build_domain(const GenConfig& cfg) {
  validate(cfg);
  TabularDomain d;
  d.vocab_size = cfg.vocab_size;
  d.beta = cfg.beta;

  std::set<std::vector<int>> used_prompts;
  Rng prompt_rng(derive_seed(cfg.seed, 500));

  for (int x = 0; x < cfg.num_prompts; ++x) {
    Rng rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(x)));
    PromptEntry e;
    e.prompt = detail::distinct_seq(prompt_rng, cfg.response_length, cfg.vocab_size,
                                    used_prompts, "prompt");

    std::set<std::vector<int>> used_responses;
    for (int y = 0; y < cfg.responses_per_prompt; ++y) {
      e.responses.push_back(detail::distinct_seq(rng, cfg.response_length, cfg.vocab_size,
                                                 used_responses, "response"));
    }

    // pi_ref = softmax(concentration * score) with a support floor.
    std::vector<double> w(cfg.responses_per_prompt);
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> score(cfg.responses_per_prompt);
    for (int y = 0; y < cfg.responses_per_prompt; ++y) {
      score[y] = cfg.ref_concentration * rng.normal();
      m = std::max(m, score[y]);
    }
    for (int y = 0; y < cfg.responses_per_prompt; ++y) w[y] = std::exp(score[y] - m);
    ProbTable ref = normalize(w);
    bool floored = false;
    for (double& p : ref.p) {
      if (p < kMinRefProb) {
        p = kMinRefProb;
        floored = true;
      }
    }
    if (floored) ref = normalize(ref.p);
    e.pi_ref = std::move(ref);

    e.reward.resize(cfg.responses_per_prompt);
    if (const auto* g = std::get_if<RewardRandomGaussian>(&cfg.reward_spec)) {
      for (double& r : e.reward) r = g->scale * rng.normal();
    } else {
      const auto& lin = std::get<RewardLinearTokenSum>(cfg.reward_spec);
      for (int y = 0; y < cfg.responses_per_prompt; ++y) {
        long sum = 0;
        for (int tok : e.responses[y].tokens) sum += tok;
        e.reward[y] = lin.weight * static_cast<double>(sum);
      }
    }

    e.pi_chosen = ProbTable{};  // filled below once the entry is in place
    d.prompts.push_back(std::move(e));
  }

  const auto chosen = derive_chosen_distribution(d);
  for (int x = 0; x < cfg.num_prompts; ++x) d.prompts[x].pi_chosen = chosen[x];
  validate(d);
  return GroundTruth{std::move(d), cfg};
}

// ----------------------------- pair sampling -----------------------------

constexpr int kPairRetryLimit = 10000;

// Draws one labeled pair of distinct response ids for prompt x.
inline IdTriple bt_sample_pair_ids(const TabularDomain& d, int x, Rng& rng) {
  if (x < 0 || x >= d.num_prompts()) throw ConfigError("bt_sample_pair: prompt id out of range");
  const PromptEntry& e = d.prompts[x];
  int a = 0, b = 0;
  int attempt = 0;
  do {
    if (++attempt > kPairRetryLimit) {
      throw ConfigError("bt_sample_pair: could not draw distinct responses (degenerate pi_ref)");
    }
    a = rng.categorical(e.pi_ref.p);
    b = rng.categorical(e.pi_ref.p);
  } while (a == b);
  const bool a_wins = rng.bernoulli(sigmoid(e.reward[a] - e.reward[b]));
  return a_wins ? IdTriple{x, a, b} : IdTriple{x, b, a};
}

inline PreferenceTriple materialize_triple(const TabularDomain& d, const IdTriple& ids) {
  const PromptEntry& e = d.prompts[ids.prompt];
  return PreferenceTriple{e.prompt, e.responses[ids.chosen], e.responses[ids.rejected]};
}

inline PreferenceTriple bt_sample_pair(const TabularDomain& d, int x, Rng& rng) {
  return materialize_triple(d, bt_sample_pair_ids(d, x, rng));
}

// Binds token triples back to domain ids (lookup by exact sequence); the
// tabular trainer consumes ids, the wire format carries tokens.
inline std::vector<IdTriple> bind_dataset(const TabularDomain& d, const PreferenceDataset& ds) {
  std::vector<IdTriple> out;
  out.reserve(ds.triples.size());
  for (std::size_t i = 0; i < ds.triples.size(); ++i) {
    const PreferenceTriple& t = ds.triples[i];
    int x = -1;
    for (int p = 0; p < d.num_prompts(); ++p) {
      if (d.prompts[p].prompt == t.prompt) {
        x = p;
        break;
      }
    }
    if (x < 0) throw ConfigError("bind_dataset: triple " + std::to_string(i) + ": unknown prompt");
    auto find_response = [&](const TokenSeq& s, const char* what) {
      for (int y = 0; y < d.num_responses(x); ++y) {
        if (d.prompts[x].responses[y] == s) return y;
      }
      throw ConfigError("bind_dataset: triple " + std::to_string(i) + ": unknown " + what);
    };
    out.push_back(IdTriple{x, find_response(t.chosen, "chosen response"),
                           find_response(t.rejected, "rejected response")});
  }
  return out;
}

// ----------------------------- dataset writing -----------------------------

constexpr int kManifestFormatVersion = 1;

struct WrittenDataset {
  std::string dataset_path;
  std::string manifest_path;
  int triples = 0;
};

inline json gen_config_to_json(const GenConfig& c) {
  json j;
  j["num_prompts"] = c.num_prompts;
  j["responses_per_prompt"] = c.responses_per_prompt;
  j["vocab_size"] = c.vocab_size;
  j["response_length"] = c.response_length;
  j["reward_spec"] = to_string(c.reward_spec);
  j["ref_concentration"] = c.ref_concentration;
  j["pairs_per_prompt"] = c.pairs_per_prompt;
  j["seed"] = c.seed;
  j["beta"] = c.beta;
  return j;
}

inline std::uint64_t file_fnv64(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("file_fnv64: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes);
}

// Emits the line-delimited dataset plus a manifest. Pairs are drawn with a
// per-prompt sub-seed, prompts in order, so the file bytes depend only on
// (domain, pairs_per_prompt, seed).
inline WrittenDataset write_dataset(const TabularDomain& d, int pairs_per_prompt,
                                    const std::string& dataset_path, std::uint64_t seed,
                                    const GenConfig* cfg = nullptr,
                                    const std::string& domain_file = "",
                                    std::string manifest_path = "") {
  if (pairs_per_prompt < 0) throw ConfigError("write_dataset: pairs_per_prompt must be >= 0");
  std::ofstream out(dataset_path, std::ios::binary);
  if (!out) throw ConfigError("write_dataset: cannot write '" + dataset_path + "'");

  int count = 0;
  for (int x = 0; x < d.num_prompts(); ++x) {
    Rng rng(derive_seed(seed, 2000 + static_cast<std::uint64_t>(x)));
    for (int k = 0; k < pairs_per_prompt; ++k) {
      const IdTriple ids = bt_sample_pair_ids(d, x, rng);
      const PreferenceTriple t = materialize_triple(d, ids);
      json j = triple_to_json(t);
      j["meta"] = json{{"prompt_id", ids.prompt},
                       {"chosen_id", ids.chosen},
                       {"rejected_id", ids.rejected}};
      out << j.dump() << '\n';
      ++count;
    }
  }
  out.close();

  json manifest;
  manifest["format_version"] = kManifestFormatVersion;
  manifest["kind"] = "dataset-manifest";
  manifest["seed"] = seed;
  if (cfg) manifest["config"] = gen_config_to_json(*cfg);
  if (!domain_file.empty()) manifest["domain_file"] = domain_file;
  manifest["counts"] = json{{"prompts", d.num_prompts()}, {"triples", count}};
  manifest["dataset_file"] = dataset_path;
  manifest["dataset_fnv64"] = fmt_hex(file_fnv64(dataset_path));

  if (manifest_path.empty()) manifest_path = dataset_path + ".manifest.json";
  std::ofstream mout(manifest_path, std::ios::binary);
  if (!mout) throw ConfigError("write_dataset: cannot write '" + manifest_path + "'");
  mout << manifest.dump(2) << '\n';

  return WrittenDataset{dataset_path, manifest_path, count};
}

}  // namespace dilab
