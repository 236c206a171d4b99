// dilab command line: generate synthetic preference worlds, train policies
// against them, run the verification suites, and sweep grids of runs.
//
// Exit codes: 0 success, 1 usage/config error, 2 verification-suite failure,
// 3 numerical abort.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "dilab/dilab.hpp"

namespace fs = std::filesystem;
using namespace dilab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitVerifyFail = 2;
constexpr int kExitNumeric = 3;

std::string resolve_out_dir(const std::string& cli_out, const RunConfig& rc) {
  if (!cli_out.empty()) return cli_out;
  if (rc.output_dir) return *rc.output_dir;
  if (const char* env = std::getenv("DILAB_OUT_ROOT")) return std::string(env);
  return "runs";
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

// ----------------------------- gen -----------------------------

int cmd_gen(const std::string& config_path, long seed_override, const std::string& cli_out) {
  RunConfig rc = load_run_config(config_path, /*check_train_paths=*/false);
  if (!rc.gen) throw ConfigError("config: [gen] section required for the gen command");
  GenConfig cfg = *rc.gen;
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);

  const fs::path out_dir = resolve_out_dir(cli_out, rc);
  fs::create_directories(out_dir);
  const std::string domain_path = (out_dir / "domain.json").string();
  const std::string dataset_path = (out_dir / "dataset.jsonl").string();
  const std::string manifest_path = (out_dir / "manifest.json").string();

  const GroundTruth gt = build_domain(cfg);
  save_domain(gt.domain, domain_path);
  write_dataset(gt.domain, cfg.pairs_per_prompt, dataset_path, cfg.seed, &cfg, domain_path,
                manifest_path);

  std::cout << manifest_path << '\n';
  return kExitOk;
}

// ----------------------------- train -----------------------------

struct TrainArtifacts {
  RunSummary summary;
  EvalRecord final_eval{};
  bool has_eval = false;
  std::string checkpoint_path;
  std::string metrics_path;
  std::vector<MetricsRow> metrics;
};

template <class Policy, class Triple>
TrainArtifacts run_and_save(Policy& policy, const Policy& ref, const std::vector<Triple>& data,
                            const LossSpec& spec, const OptimConfig& optim,
                            const TabularDomain* domain, const fs::path& out_dir) {
  TrainArtifacts art;
  art.checkpoint_path = (out_dir / "checkpoint.json").string();
  art.metrics_path = (out_dir / "metrics.csv").string();
  try {
    TrainResult res = train(policy, ref, data, spec, optim, domain);
    art.metrics = std::move(res.metrics);
  } catch (const TrainAbortError& e) {
    // keep the last-good parameters reachable before re-throwing
    std::copy(e.last_good_params().begin(), e.last_good_params().end(), policy.params().begin());
    save_checkpoint(policy, (out_dir / "checkpoint_last_good.json").string());
    throw;
  }
  save_checkpoint(policy, art.checkpoint_path);
  write_metrics_csv(art.metrics, art.metrics_path);
  if (domain) {
    art.final_eval = evaluate(policy, ref, *domain);
    art.has_eval = true;
  }
  NamedLog log{spec.name(), art.metrics};
  art.summary = compare_runs(std::span<const NamedLog>(&log, 1)).front();
  return art;
}

json train_manifest(const TrainSection& t, const LossSpec& spec, const OptimConfig& optim,
                    const TrainArtifacts& art) {
  json j;
  j["format_version"] = 1;
  j["kind"] = "train-manifest";
  j["loss"] = spec.name();
  j["policy"] = t.policy;
  j["optimizer"] = to_string(optim.optimizer);
  j["schedule"] = to_string(optim.schedule);
  j["warmup_fraction"] = optim.warmup_fraction;
  j["lr"] = optim.lr;
  j["steps"] = optim.steps;
  j["batch_size"] = optim.batch_size;
  j["seed"] = optim.seed;
  j["metrics_every"] = optim.metrics_every;
  j["length_normalize"] = spec.ratio_config.length_normalize;
  if (spec.ratio_config.clamp) j["clamp"] = *spec.ratio_config.clamp;
  if (spec.kind == LossKind::dpo) j["beta"] = spec.beta;
  if (optim.grad_clip) j["grad_clip"] = *optim.grad_clip;
  j["inputs"] = json{{"dataset", t.dataset_path},
                     {"dataset_fnv64", fmt_hex(file_fnv64(t.dataset_path))}};
  if (!t.domain_path.empty()) {
    j["inputs"]["domain"] = t.domain_path;
    j["inputs"]["domain_fnv64"] = fmt_hex(file_fnv64(t.domain_path));
  }
  j["outputs"] = json{{"checkpoint", art.checkpoint_path}, {"metrics", art.metrics_path}};
  return j;
}

void print_train_summary(const LossSpec& spec, const TrainArtifacts& art) {
  std::ostringstream line;
  line << "RESULT command=train loss=" << spec.name()
       << " final_loss=" << fmt_double(art.summary.final_loss)
       << " initial_margin=" << fmt_double(art.summary.initial_margin)
       << " final_margin=" << fmt_double(art.summary.final_margin)
       << " chosen_decline=" << fmt_double(art.summary.chosen_decline);
  if (art.has_eval) {
    line << " reverse_kl_to_chosen=" << fmt_double(art.final_eval.reverse_kl_to_chosen)
         << " forward_kl_to_chosen=" << fmt_double(art.final_eval.forward_kl_to_chosen)
         << " expected_true_reward=" << fmt_double(art.final_eval.expected_true_reward);
  }
  line << " checkpoint=" << art.checkpoint_path << " metrics=" << art.metrics_path;
  std::cout << line.str() << '\n';
}

TrainArtifacts run_train_cell(const RunConfig& rc, const std::string& loss_override,
                              const fs::path& out_dir, const OptimConfig* optim_override = nullptr) {
  const TrainSection& t = *rc.train;
  LossSpec spec = loss_spec_of(t, loss_override);
  OptimConfig optim = optim_override ? *optim_override : t.optim;
  fs::create_directories(out_dir);

  const TabularDomain* domain = nullptr;
  TabularDomain loaded;
  std::string domain_path = rc.eval.domain_path.value_or(t.domain_path);
  if (!domain_path.empty()) {
    loaded = load_domain(domain_path);
    domain = &loaded;
  }
  const int vocab = domain ? loaded.vocab_size : *t.vocab_size;
  PreferenceDataset ds = load_dataset(t.dataset_path, vocab);

  TrainArtifacts art;
  if (t.policy == "tabular") {
    if (!domain) throw ConfigError("tabular policy requires a domain");
    const std::vector<IdTriple> ids = bind_dataset(*domain, ds);
    TabularSoftmaxPolicy policy = TabularSoftmaxPolicy::from_reference(*domain);
    const TabularSoftmaxPolicy ref = clone_frozen(policy);
    art = run_and_save(policy, ref, ids, spec, optim, domain, out_dir);
  } else {
    TinySeqPolicy policy(vocab, derive_seed(optim.seed, 0xA110C), t.embed_dim, t.window);
    const TinySeqPolicy ref = clone_frozen(policy);
    art = run_and_save(policy, ref, ds.triples, spec, optim, domain, out_dir);
  }
  write_json_file(train_manifest(t, spec, optim, art), (out_dir / "manifest.json").string());
  return art;
}

int cmd_train(const std::string& config_path, const std::string& loss_override,
              const std::string& cli_out) {
  RunConfig rc = load_run_config(config_path);
  if (!rc.train) throw ConfigError("config: [train] section required for the train command");
  const fs::path out_dir = resolve_out_dir(cli_out, rc);
  const TrainArtifacts art = run_train_cell(rc, loss_override, out_dir);
  print_train_summary(loss_spec_of(*rc.train, loss_override), art);
  return kExitOk;
}

// ----------------------------- verify -----------------------------

void print_suite(const SuiteResult& s) {
  for (const CheckLine& c : s.checks) {
    std::cout << "check suite=" << s.suite << " name=" << c.name
              << " value=" << fmt_double(c.value) << " threshold=" << fmt_double(c.threshold)
              << " relation=" << c.relation << " pass=" << (c.pass ? 1 : 0) << '\n';
  }
  std::cout << "suite " << s.suite << " pass=" << (s.pass ? 1 : 0) << " checks=" << s.checks.size()
            << " seconds=" << fmt_double(s.seconds) << '\n';
}

int cmd_verify(const std::string& suite, long seed_arg, double tol) {
  const std::uint64_t seed = seed_arg >= 0 ? static_cast<std::uint64_t>(seed_arg) : 1;
  std::vector<SuiteResult> results;
  auto want = [&](const char* name) { return suite == name || suite == "all"; };

  if (want("prop1")) results.push_back(run_suite_prop1(seed, tol > 0 ? tol : 1e-10));
  if (want("dre-recovery")) results.push_back(run_suite_dre_recovery(seed, tol > 0 ? tol : 1e-3));
  if (want("dpo-cpc")) results.push_back(run_suite_dpo_cpc(seed, tol > 0 ? tol : 1e-12));
  if (want("gradients")) {
    results.push_back(tol > 0 ? run_suite_gradients(seed, tol, 10.0 * tol)
                              : run_suite_gradients(seed));
  }
  if (want("self-norm")) results.push_back(run_suite_self_norm(seed, tol > 0 ? tol : 1e-12));
  if (want("bt-stats")) results.push_back(run_suite_bt_stats(seed, tol > 0 ? tol : 0.001));
  if (results.empty()) {
    throw ConfigError("unknown suite '" + suite +
                      "' (valid: prop1, dre-recovery, dpo-cpc, gradients, self-norm, bt-stats, all)");
  }

  bool all_pass = true;
  for (const SuiteResult& s : results) {
    print_suite(s);
    all_pass = all_pass && s.pass;
  }
  return all_pass ? kExitOk : kExitVerifyFail;
}

// ----------------------------- sweep -----------------------------

struct GridSpec {
  std::vector<std::string> losses;
  std::vector<double> lrs;
  std::vector<std::uint64_t> seeds;
};

GridSpec parse_grid(const std::string& text) {
  GridSpec g;
  std::stringstream parts(text);
  std::string part;
  while (std::getline(parts, part, ';')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("grid: expected key=v1,v2 in '" + part + "'");
    const std::string key = part.substr(0, eq);
    std::stringstream vals(part.substr(eq + 1));
    std::string v;
    while (std::getline(vals, v, ',')) {
      if (v.empty()) throw ConfigError("grid: empty value in '" + part + "'");
      try {
        if (key == "loss") {
          make_loss_spec(v, 0.1);
          g.losses.push_back(v);
        } else if (key == "lr") {
          g.lrs.push_back(std::stod(v));
        } else if (key == "seed") {
          g.seeds.push_back(static_cast<std::uint64_t>(std::stoul(v)));
        } else {
          throw ConfigError("grid: unknown axis '" + key + "' (valid: loss, lr, seed)");
        }
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception&) {
        throw ConfigError("grid: bad value '" + v + "' for axis '" + key + "'");
      }
    }
  }
  if (g.losses.empty() || g.lrs.empty() || g.seeds.empty()) {
    throw ConfigError("grid: need all three axes, e.g. loss=dil-lsif,dpo;lr=0.05;seed=1,2,3");
  }
  return g;
}

int cmd_sweep(const std::string& config_path, const std::string& grid_text,
              const std::string& cli_out, int jobs) {
  RunConfig rc = load_run_config(config_path);
  if (!rc.train) throw ConfigError("config: [train] section required for the sweep command");
  const GridSpec grid = parse_grid(grid_text);
  const fs::path out_dir = resolve_out_dir(cli_out, rc);
  fs::create_directories(out_dir / "cells");

  struct Cell {
    std::string loss;
    double lr;
    std::uint64_t seed;
    std::string name;
    fs::path dir;
  };
  std::vector<Cell> cells;
  for (const std::string& loss : grid.losses) {
    for (double lr : grid.lrs) {
      for (std::uint64_t seed : grid.seeds) {
        Cell c;
        c.loss = loss;
        c.lr = lr;
        c.seed = seed;
        c.name = loss + "_lr" + fmt_double(lr) + "_seed" + std::to_string(seed);
        c.dir = out_dir / "cells" / c.name;
        cells.push_back(std::move(c));
      }
    }
  }

  std::vector<NamedLog> logs(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        OptimConfig optim = rc.train->optim;
        optim.lr = cells[i].lr;
        optim.seed = cells[i].seed;
        TrainArtifacts art = run_train_cell(rc, cells[i].loss, cells[i].dir, &optim);
        logs[i] = NamedLog{cells[i].name, std::move(art.metrics)};
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  std::vector<NamedLog> ok_logs;
  int failures = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (errors[i].empty()) {
      ok_logs.push_back(std::move(logs[i]));
    } else {
      ++failures;
      std::cerr << "cell " << cells[i].name << " failed: " << errors[i] << '\n';
    }
  }
  if (!ok_logs.empty()) {
    const auto table = compare_runs(std::span<const NamedLog>(ok_logs));
    write_summary_csv(table, (out_dir / "sweep_summary.csv").string());
  }

  json manifest;
  manifest["format_version"] = 1;
  manifest["kind"] = "sweep-manifest";
  manifest["grid"] = grid_text;
  manifest["cells"] = json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    manifest["cells"].push_back(json{{"name", cells[i].name},
                                     {"status", errors[i].empty() ? "ok" : "failed"},
                                     {"error", errors[i]}});
  }
  write_json_file(manifest, (out_dir / "sweep_manifest.json").string());

  std::cout << "SWEEP cells=" << cells.size() << " failed=" << failures
            << " summary=" << (out_dir / "sweep_summary.csv").string() << '\n';
  return failures == static_cast<int>(cells.size()) ? kExitConfig : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale preference-alignment laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string loss_override;
  std::string suite = "all";
  std::string grid;
  long seed = -1;
  double tol = -1.0;
  int jobs = 1;

  CLI::App* gen = app.add_subcommand("gen", "generate a domain and a preference dataset");
  gen->add_option("--config", config_path, "run config file")->required();
  gen->add_option("--seed", seed, "override [gen] seed");
  gen->add_option("--out", out_dir, "output directory");

  CLI::App* train = app.add_subcommand("train", "train a policy on a generated dataset");
  train->add_option("--config", config_path, "run config file")->required();
  train->add_option("--loss", loss_override, "dil-lsif | dil-ukl | dil-bce | dpo | sft");
  train->add_option("--out", out_dir, "output directory");

  CLI::App* verify = app.add_subcommand("verify", "run verification suites");
  verify->add_option("--suite", suite,
                     "prop1 | dre-recovery | dpo-cpc | gradients | self-norm | bt-stats | all");
  verify->add_option("--seed", seed, "suite seed");
  verify->add_option("--tol", tol, "override the suite's headline tolerance");

  CLI::App* sweep = app.add_subcommand("sweep", "run a loss x lr x seed grid");
  sweep->add_option("--config", config_path, "run config file")->required();
  sweep->add_option("--grid", grid, "e.g. loss=dil-lsif,dpo;lr=0.05;seed=1,2,3")->required();
  sweep->add_option("--out", out_dir, "output directory");
  sweep->add_option("--jobs", jobs, "parallel cells");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen(config_path, seed, out_dir);
    if (train->parsed()) return cmd_train(config_path, loss_override, out_dir);
    if (verify->parsed()) return cmd_verify(suite, seed, tol);
    if (sweep->parsed()) return cmd_sweep(config_path, grid, out_dir, jobs);
  } catch (const TrainAbortError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}
