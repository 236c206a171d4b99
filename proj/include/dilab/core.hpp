// Domain types shared by every module: token sequences, preference triples,
// probability tables, and the line-delimited dataset format.
//
// Dataset file format: UTF-8, one JSON object per line, keys `prompt`,
// `chosen`, `rejected` (arrays of non-negative token ids) plus an optional
// `meta` object. Unknown keys are ignored. Blank lines are skipped.
#pragma once

#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dilab/common.hpp"

namespace dilab {

using json = nlohmann::ordered_json;

// ----------------------------- token sequences -----------------------------

struct TokenSeq {
  std::vector<int> tokens;
  int vocab_size = 0;

  bool operator==(const TokenSeq& o) const { return tokens == o.tokens; }
};

inline void validate(const TokenSeq& s, const std::string& what = "token sequence") {
  if (s.vocab_size <= 0) throw ConfigError(what + ": vocab_size must be positive");
  if (s.tokens.empty()) throw ConfigError(what + ": length must be >= 1");
  for (int t : s.tokens) {
    if (t < 0 || t >= s.vocab_size) {
      throw ConfigError(what + ": token id " + std::to_string(t) + " outside [0, " +
                        std::to_string(s.vocab_size) + ")");
    }
  }
}

struct PreferenceTriple {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;

  bool operator==(const PreferenceTriple& o) const {
    return prompt == o.prompt && chosen == o.chosen && rejected == o.rejected;
  }
};

struct PreferenceDataset {
  std::vector<PreferenceTriple> triples;
  int vocab_size = 0;
  std::optional<std::string> source_path;
};

// ----------------------------- probability tables -----------------------------

// Dense probability vector indexed by response id. Linear probabilities are
// kept only at this tabular-oracle boundary; everything upstream works in
// log space.
struct ProbTable {
  std::vector<double> p;

  std::size_t size() const { return p.size(); }
  double operator[](std::size_t i) const { return p[i]; }
};

inline void validate(const ProbTable& t, double tol = 1e-9) {
  double sum = 0.0;
  for (double v : t.p) {
    if (!(v >= 0.0)) throw ConfigError("ProbTable: negative or NaN entry");
    sum += v;
  }
  if (std::fabs(sum - 1.0) > tol) {
    throw ConfigError("ProbTable: entries sum to " + fmt_double(sum) + ", not 1");
  }
}

// weights -> weights / sum(weights). Sum of the output is 1 up to one final
// rounding because the division is by the exact accumulated total.
inline ProbTable normalize(std::span<const double> weights) {
  if (weights.empty()) throw ConfigError("normalize: empty weight vector");
  double sum = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("normalize: weights must be finite and >= 0");
    sum += w;
  }
  if (sum <= 0.0) throw ConfigError("normalize: all weights are zero");
  ProbTable out;
  out.p.reserve(weights.size());
  for (double w : weights) out.p.push_back(w / sum);
  return out;
}

inline ProbTable normalize(const std::vector<double>& weights) {
  return normalize(std::span<const double>(weights));
}

// ----------------------------- dataset I/O -----------------------------

namespace detail {

inline std::vector<int> parse_token_array(const json& j, const char* key, std::size_t line_no) {
  if (!j.contains(key)) {
    throw ConfigError("dataset line " + std::to_string(line_no) + ": missing key '" + key + "'");
  }
  const json& arr = j.at(key);
  if (!arr.is_array() || arr.empty()) {
    throw ConfigError("dataset line " + std::to_string(line_no) + ": '" + key +
                      "' must be a non-empty array");
  }
  std::vector<int> out;
  out.reserve(arr.size());
  for (const json& v : arr) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError("dataset line " + std::to_string(line_no) + ": '" + key +
                        "' holds a token that is not a non-negative integer");
    }
    out.push_back(v.get<int>());
  }
  return out;
}

}  // namespace detail

inline PreferenceDataset load_dataset(const std::string& path, int vocab_size,
                                      bool allow_duplicates = false) {
  if (vocab_size <= 0) throw ConfigError("load_dataset: vocab_size must be positive");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_dataset: cannot open '" + path + "'");

  PreferenceDataset ds;
  ds.vocab_size = vocab_size;
  ds.source_path = path;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ConfigError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    PreferenceTriple t;
    t.prompt = TokenSeq{detail::parse_token_array(j, "prompt", line_no), vocab_size};
    t.chosen = TokenSeq{detail::parse_token_array(j, "chosen", line_no), vocab_size};
    t.rejected = TokenSeq{detail::parse_token_array(j, "rejected", line_no), vocab_size};
    for (const TokenSeq* s : {&t.prompt, &t.chosen, &t.rejected}) {
      for (int tok : s->tokens) {
        if (tok >= vocab_size) {
          throw ConfigError("dataset line " + std::to_string(line_no) + ": token id " +
                            std::to_string(tok) + " >= vocab_size " + std::to_string(vocab_size));
        }
      }
    }
    if (!allow_duplicates && t.chosen == t.rejected) {
      throw ConfigError("dataset line " + std::to_string(line_no) +
                        ": chosen equals rejected (use allow_duplicates to accept)");
    }
    ds.triples.push_back(std::move(t));
  }
  return ds;
}

inline json triple_to_json(const PreferenceTriple& t) {
  json j;
  j["prompt"] = t.prompt.tokens;
  j["chosen"] = t.chosen.tokens;
  j["rejected"] = t.rejected.tokens;
  return j;
}

inline void save_dataset(const PreferenceDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("save_dataset: cannot write '" + path + "'");
  for (const PreferenceTriple& t : ds.triples) {
    out << triple_to_json(t).dump() << '\n';
  }
}

// Id-addressed preference record for tabular policies; the token form above
// is the wire format, this is the in-memory form bound to a domain.
struct IdTriple {
  int prompt = 0;
  int chosen = 0;
  int rejected = 0;

  bool operator==(const IdTriple&) const = default;
};

}  // namespace dilab
