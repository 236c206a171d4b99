// Run-config files: plain-text key = value lines under [section] headers.
// Lines starting with '#' or ';' are comments. Unknown sections or keys are
// errors, as are referenced files that do not exist at parse time.
//
//   [gen]      domain/dataset generation     (GenConfig)
//   [train]    optimizer + loss + policy     (OptimConfig, LossSpec, paths)
//   [eval]     evaluation target overrides
//   [output]   default output directory
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dilab/common.hpp"
#include "dilab/datagen.hpp"
#include "dilab/losses.hpp"
#include "dilab/trainer.hpp"

namespace dilab {

struct TrainSection {
  std::string policy = "tabular";  // or "tiny-neural"
  std::optional<std::string> loss;
  double dpo_beta = 0.1;
  OptimConfig optim;
  bool metrics_every_set = false;
  bool length_normalize = false;
  std::optional<double> clamp;
  bool clamp_set = false;
  std::string dataset_path;
  std::string domain_path;
  std::optional<int> vocab_size;  // only needed when no domain is given
  int embed_dim = 16;
  int window = 8;
};

struct EvalSection {
  std::optional<std::string> domain_path;
};

struct RunConfig {
  std::optional<GenConfig> gen;
  std::optional<TrainSection> train;
  EvalSection eval;
  std::optional<std::string> output_dir;
};

namespace detail {

using Section = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::map<std::string, Section> parse_ini(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::map<std::string, Section> sections;
  std::string line;
  std::string current;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": bad section header");
      current = trim(t.substr(1, t.size() - 2));
      if (current != "gen" && current != "train" && current != "eval" && current != "output") {
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" + current + "]");
      }
      sections[current];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    if (current.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": key outside any section");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (sections[current].count(key)) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    sections[current][key] = value;
  }
  return sections;
}

class SectionReader {
 public:
  SectionReader(const std::string& name, const Section& s) : name_(name), section_(s) {}

  ~SectionReader() = default;

  // Every key must be consumed; leftovers are unknown keys.
  void finish() const {
    for (const auto& [key, value] : section_) {
      if (!consumed_.count(key)) {
        throw ConfigError("config [" + name_ + "]: unknown key '" + key + "'");
      }
    }
  }

  bool has(const std::string& key) const { return section_.count(key) > 0; }

  std::string require(const std::string& key) {
    if (!has(key)) throw ConfigError("config [" + name_ + "]: missing required key '" + key + "'");
    consumed_.insert(key);
    return section_.at(key);
  }

  std::optional<std::string> optional(const std::string& key) {
    if (!has(key)) return std::nullopt;
    consumed_.insert(key);
    return section_.at(key);
  }

  long require_int(const std::string& key) { return to_int(key, require(key)); }
  double require_double(const std::string& key) { return to_double(key, require(key)); }

  long optional_int(const std::string& key, long fallback) {
    auto v = optional(key);
    return v ? to_int(key, *v) : fallback;
  }
  double optional_double(const std::string& key, double fallback) {
    auto v = optional(key);
    return v ? to_double(key, *v) : fallback;
  }
  bool optional_bool(const std::string& key, bool fallback) {
    auto v = optional(key);
    if (!v) return fallback;
    if (*v == "true") return true;
    if (*v == "false") return false;
    throw ConfigError("config [" + name_ + "]: key '" + key + "' must be true or false");
  }

 private:
  long to_int(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const long x = std::stol(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config [" + name_ + "]: key '" + key + "' is not an integer: '" + v + "'");
    }
  }
  double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config [" + name_ + "]: key '" + key + "' is not a number: '" + v + "'");
    }
  }

  std::string name_;
  const Section& section_;
  std::set<std::string> consumed_;
};

inline void require_path_exists(const std::string& what, const std::string& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError("config: " + what + " path does not exist: '" + path + "'");
  }
}

}  // namespace detail

// check_train_paths: the gen command parses combined configs whose [train]
// inputs it has not produced yet, so only train/sweep enforce existence.
inline RunConfig load_run_config(const std::string& path, bool check_train_paths = true) {
  const auto sections = detail::parse_ini(path);
  RunConfig rc;

  if (auto it = sections.find("gen"); it != sections.end()) {
    detail::SectionReader r("gen", it->second);
    GenConfig g;
    g.num_prompts = static_cast<int>(r.require_int("num_prompts"));
    g.responses_per_prompt = static_cast<int>(r.require_int("responses_per_prompt"));
    g.vocab_size = static_cast<int>(r.require_int("vocab_size"));
    g.response_length = static_cast<int>(r.require_int("response_length"));
    g.reward_spec = parse_reward_spec(r.require("reward_spec"));
    g.pairs_per_prompt = static_cast<int>(r.require_int("pairs_per_prompt"));
    g.seed = static_cast<std::uint64_t>(r.require_int("seed"));
    g.ref_concentration = r.optional_double("ref_concentration", 1.0);
    g.beta = r.optional_double("beta", 1.0);
    r.finish();
    validate(g);
    rc.gen = g;
  }

  if (auto it = sections.find("train"); it != sections.end()) {
    detail::SectionReader r("train", it->second);
    TrainSection t;
    t.policy = r.optional("policy").value_or("tabular");
    if (t.policy != "tabular" && t.policy != "tiny-neural") {
      throw ConfigError("config [train]: policy must be 'tabular' or 'tiny-neural'");
    }
    t.loss = r.optional("loss");
    if (t.loss) make_loss_spec(*t.loss, 0.1);  // reject unknown names early
    t.dpo_beta = r.optional_double("beta", 0.1);

    const std::string opt = r.optional("optimizer").value_or("adaptive-moment");
    if (opt == "plain-gradient") t.optim.optimizer = Optimizer::plain_gradient;
    else if (opt == "adaptive-moment") t.optim.optimizer = Optimizer::adaptive_moment;
    else throw ConfigError("config [train]: optimizer must be plain-gradient or adaptive-moment");

    const std::string sched = r.optional("schedule").value_or("constant");
    if (sched == "constant") t.optim.schedule = LrSchedule::constant;
    else if (sched == "cosine-with-warmup") t.optim.schedule = LrSchedule::cosine_with_warmup;
    else throw ConfigError("config [train]: schedule must be constant or cosine-with-warmup");

    t.optim.lr = r.require_double("lr");
    t.optim.warmup_fraction = r.optional_double("warmup_fraction", 0.1);
    t.optim.steps = static_cast<int>(r.require_int("steps"));
    t.optim.batch_size = static_cast<int>(r.require_int("batch_size"));
    t.optim.seed = static_cast<std::uint64_t>(r.require_int("seed"));
    if (auto gc = r.optional("grad_clip"); gc && *gc != "none") {
      t.optim.grad_clip = std::stod(*gc);
    }
    if (auto me = r.optional("metrics_every")) {
      t.optim.metrics_every = static_cast<int>(std::stol(*me));
      t.metrics_every_set = true;
    }
    t.length_normalize = r.optional_bool("length_normalize", false);
    if (auto cl = r.optional("clamp")) {
      t.clamp_set = true;
      if (*cl != "none") t.clamp = std::stod(*cl);
    }
    t.dataset_path = r.require("dataset");
    if (check_train_paths) detail::require_path_exists("dataset", t.dataset_path);
    if (auto dp = r.optional("domain")) {
      t.domain_path = *dp;
      if (check_train_paths) detail::require_path_exists("domain", t.domain_path);
    }
    if (auto vs = r.optional("vocab_size")) t.vocab_size = static_cast<int>(std::stol(*vs));
    t.embed_dim = static_cast<int>(r.optional_int("embed_dim", 16));
    t.window = static_cast<int>(r.optional_int("window", 8));
    r.finish();

    if (!t.metrics_every_set) t.optim.metrics_every = (t.policy == "tabular") ? 1 : 10;
    if (t.policy == "tabular" && t.domain_path.empty()) {
      throw ConfigError("config [train]: tabular policy requires a domain path");
    }
    if (t.domain_path.empty() && !t.vocab_size) {
      throw ConfigError("config [train]: need either domain or vocab_size");
    }
    validate(t.optim);
    rc.train = t;
  }

  if (auto it = sections.find("eval"); it != sections.end()) {
    detail::SectionReader r("eval", it->second);
    if (auto dp = r.optional("domain")) {
      if (check_train_paths) detail::require_path_exists("eval domain", *dp);
      rc.eval.domain_path = *dp;
    }
    r.finish();
  }

  if (auto it = sections.find("output"); it != sections.end()) {
    detail::SectionReader r("output", it->second);
    rc.output_dir = r.optional("dir");
    r.finish();
  }

  return rc;
}

// Builds the LossSpec a train section describes, with the spec-level
// defaults (dil-lsif ships a 30.0 clamp unless the config overrides it).
inline LossSpec loss_spec_of(const TrainSection& t, const std::string& loss_override = "") {
  const std::string name = !loss_override.empty() ? loss_override
                           : t.loss ? *t.loss
                                    : throw ConfigError("no loss given (config [train] loss or --loss)");
  LossSpec spec = make_loss_spec(name, t.dpo_beta);
  spec.ratio_config.length_normalize = t.length_normalize;
  if (t.clamp_set) spec.ratio_config.clamp = t.clamp;
  return spec;
}

}  // namespace dilab
