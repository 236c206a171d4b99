#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dilab/datagen.hpp"
#include "dilab/trainer.hpp"

using namespace dilab;
namespace fs = std::filesystem;

namespace {

bool near(double a, double b, double tol) { return std::fabs(a - b) < tol; }

GroundTruth make_world(std::uint64_t seed, int prompts = 4, int responses = 8) {
  GenConfig cfg;
  cfg.num_prompts = prompts;
  cfg.responses_per_prompt = responses;
  cfg.vocab_size = 16;
  cfg.response_length = 4;
  cfg.seed = seed;
  return build_domain(cfg);
}

std::vector<IdTriple> sample_ids(const TabularDomain& d, int per_prompt, std::uint64_t seed) {
  std::vector<IdTriple> out;
  for (int x = 0; x < d.num_prompts(); ++x) {
    Rng rng(derive_seed(seed, 2000 + x));
    for (int k = 0; k < per_prompt; ++k) out.push_back(bt_sample_pair_ids(d, x, rng));
  }
  return out;
}

OptimConfig quick_config(int steps, double lr, std::uint64_t seed = 3) {
  OptimConfig cfg;
  cfg.optimizer = Optimizer::adaptive_moment;
  cfg.lr = lr;
  cfg.steps = steps;
  cfg.batch_size = 32;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("schedule_lr") {
  OptimConfig cfg;
  cfg.lr = 0.4;
  cfg.steps = 100;
  cfg.schedule = LrSchedule::cosine_with_warmup;
  cfg.warmup_fraction = 0.1;

  SECTION("warmup starts at zero") { REQUIRE(schedule_lr(cfg, 0) == 0.0); }
  SECTION("warmup end hits lr exactly") { REQUIRE(schedule_lr(cfg, 10) == 0.4); }
  SECTION("final step is below 0.01 lr") {
    // cosine at progress 89/90: lr/2 (1 + cos(89 pi/90)) ~ 3e-4 lr
    REQUIRE(schedule_lr(cfg, 99) < 0.01 * cfg.lr);
    REQUIRE(schedule_lr(cfg, 99) > 0.0);
  }
  SECTION("constant schedule returns lr always") {
    cfg.schedule = LrSchedule::constant;
    for (int s : {0, 1, 50, 99}) REQUIRE(schedule_lr(cfg, s) == 0.4);
  }
  SECTION("out-of-range steps error") {
    REQUIRE_THROWS_AS(schedule_lr(cfg, -1), ConfigError);
    REQUIRE_THROWS_AS(schedule_lr(cfg, 100), ConfigError);
  }
  SECTION("zero warmup fraction starts at full lr under cosine") {
    cfg.warmup_fraction = 0.0;
    REQUIRE(schedule_lr(cfg, 0) == 0.4);
  }
}

TEST_CASE("train: null update and determinism") {
  const GroundTruth gt = make_world(71);
  const std::vector<IdTriple> data = sample_ids(gt.domain, 16, 5);
  const LossSpec spec = make_loss_spec("dil-lsif");

  SECTION("lr = 0 leaves parameters bit-identical") {
    TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(gt.domain);
    const TabularSoftmaxPolicy ref = clone_frozen(pol);
    const std::vector<double> before(pol.params().begin(), pol.params().end());
    train(pol, ref, data, spec, quick_config(20, 0.0), &gt.domain);
    REQUIRE(std::equal(pol.params().begin(), pol.params().end(), before.begin()));
  }

  SECTION("same seed twice: byte-identical metrics logs") {
    const fs::path dir = fs::path("scratch_trainer");
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto run_once = [&](const std::string& name) {
      TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(gt.domain);
      const TabularSoftmaxPolicy ref = clone_frozen(pol);
      const TrainResult res = train(pol, ref, data, spec, quick_config(40, 0.05, 9), &gt.domain);
      const std::string p = (dir / name).string();
      write_metrics_csv(res.metrics, p);
      std::ifstream in(p, std::ios::binary);
      return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    REQUIRE(run_once("a.csv") == run_once("b.csv"));
  }

  SECTION("steps = 0 emits only the initial metrics row") {
    TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(gt.domain);
    const TabularSoftmaxPolicy ref = clone_frozen(pol);
    const TrainResult res = train(pol, ref, data, spec, quick_config(0, 0.05), &gt.domain);
    REQUIRE(res.metrics.size() == 1);
    REQUIRE(res.metrics[0].step == 0);
  }
}

TEST_CASE("train: sft non-increase under plain gradient on one prompt") {
  const GroundTruth gt = make_world(73, 1, 6);
  const std::vector<IdTriple> data = sample_ids(gt.domain, 32, 7);
  TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(gt.domain);
  const TabularSoftmaxPolicy ref = clone_frozen(pol);
  OptimConfig cfg = quick_config(100, 0.05);
  cfg.optimizer = Optimizer::plain_gradient;
  cfg.batch_size = static_cast<int>(data.size());  // exact full-batch descent
  const TrainResult res = train(pol, ref, data, make_loss_spec("sft"), cfg, &gt.domain);
  for (std::size_t i = 1; i < res.metrics.size(); ++i) {
    REQUIRE(res.metrics[i].loss <= res.metrics[i - 1].loss + 1e-12);
  }
}

TEST_CASE("train: margin identity holds row-wise") {
  const GroundTruth gt = make_world(79);
  const std::vector<IdTriple> data = sample_ids(gt.domain, 12, 3);
  TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(gt.domain);
  const TabularSoftmaxPolicy ref = clone_frozen(pol);
  const TrainResult res = train(pol, ref, data, make_loss_spec("dpo", 0.5),
                                quick_config(30, 0.05), &gt.domain);
  for (const MetricsRow& r : res.metrics) {
    REQUIRE(near(r.margin, r.mean_chosen_logp - r.mean_rejected_logp, 1e-9));
  }
}

TEST_CASE("train: gradient clipping bounds the plain-gradient update norm") {
  const GroundTruth gt = make_world(83);
  const std::vector<IdTriple> data = sample_ids(gt.domain, 12, 3);
  const LossSpec spec = make_loss_spec("dil-ukl");
  const double clip = 0.05;
  const double lr = 0.5;

  TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(gt.domain);
  const TabularSoftmaxPolicy ref = clone_frozen(pol);
  for (int step = 0; step < 5; ++step) {
    OptimConfig cfg = quick_config(1, lr, 100 + step);
    cfg.optimizer = Optimizer::plain_gradient;
    cfg.grad_clip = clip;
    const std::vector<double> before(pol.params().begin(), pol.params().end());
    train(pol, ref, data, spec, cfg);
    double sq = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) sq += sqr(pol.params()[i] - before[i]);
    REQUIRE(std::sqrt(sq) <= lr * clip + 1e-12);
  }
}

TEST_CASE("train: abort on numerical blow-up keeps the last good parameters") {
  // Log-ratios of normalized policies are bounded, so the blow-up path needs
  // the neural scorer, whose logits are products of parameters: an absurd
  // plain-gradient rate overflows them within a few steps.
  const GroundTruth gt = make_world(89, 2, 4);
  std::vector<PreferenceTriple> data;
  for (const IdTriple& t : sample_ids(gt.domain, 8, 3)) {
    data.push_back(materialize_triple(gt.domain, t));
  }
  LossSpec spec = make_loss_spec("sft");
  TinySeqPolicy pol(gt.domain.vocab_size, 5);
  const TinySeqPolicy ref = clone_frozen(pol);
  OptimConfig cfg = quick_config(200, 1e4);
  cfg.optimizer = Optimizer::plain_gradient;
  try {
    train(pol, ref, data, spec, cfg);
    FAIL("expected TrainAbortError");
  } catch (const TrainAbortError& e) {
    REQUIRE(e.step() >= 0);
    REQUIRE(e.step() < 200);
    for (double v : e.last_good_params()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("evaluate") {
  const GroundTruth gt = make_world(97);
  const TabularDomain& d = gt.domain;
  const TabularSoftmaxPolicy ref = TabularSoftmaxPolicy::from_reference(d);

  SECTION("policy constructed as pi_chosen has zero divergences") {
    std::vector<ProbTable> rows;
    for (const PromptEntry& e : d.prompts) rows.push_back(e.pi_chosen);
    const TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_tables(rows);
    const EvalRecord rec = evaluate(pol, ref, d);
    REQUIRE(near(rec.reverse_kl_to_chosen, 0.0, 1e-10));
    REQUIRE(near(rec.forward_kl_to_chosen, 0.0, 1e-10));
  }
  SECTION("policy = pi_ref: expected reward is the reference dot product") {
    const TabularSoftmaxPolicy pol = clone_frozen(ref);
    const EvalRecord rec = evaluate(pol, ref, d);
    double expect = 0.0;
    for (const PromptEntry& e : d.prompts) {
      for (std::size_t y = 0; y < e.responses.size(); ++y) {
        expect += e.pi_ref[y] * e.reward[y] / d.num_prompts();
      }
    }
    REQUIRE(near(rec.expected_true_reward, expect, 1e-12));
    REQUIRE(near(rec.mean_chosen_log_ratio, 0.0, 1e-12));
  }
  SECTION("dil-lsif training improves reverse KL over the initial policy") {
    const std::vector<IdTriple> data = sample_ids(d, 400, 11);
    TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(d);
    const EvalRecord before = evaluate(pol, ref, d);
    OptimConfig cfg = quick_config(100, 0.02, 7);
    cfg.batch_size = 64;
    train(pol, ref, data, make_loss_spec("dil-lsif"), cfg, &d);
    const EvalRecord after = evaluate(pol, ref, d);
    REQUIRE(after.reverse_kl_to_chosen < before.reverse_kl_to_chosen);
  }
}

TEST_CASE("metrics CSV round trip and missing-domain columns") {
  const GroundTruth gt = make_world(101, 2, 4);
  const std::vector<IdTriple> data = sample_ids(gt.domain, 8, 3);
  TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(gt.domain);
  const TabularSoftmaxPolicy ref = clone_frozen(pol);
  const TrainResult res = train(pol, ref, data, make_loss_spec("dpo", 0.5),
                                quick_config(10, 0.05), nullptr);
  REQUIRE(std::isnan(res.metrics.back().reverse_kl_to_chosen));

  const fs::path dir = fs::path("scratch_trainer_csv");
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string p = (dir / "m.csv").string();
  write_metrics_csv(res.metrics, p);
  const std::vector<MetricsRow> back = read_metrics_csv(p);
  REQUIRE(back.size() == res.metrics.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    REQUIRE(back[i].step == res.metrics[i].step);
    REQUIRE(back[i].loss == res.metrics[i].loss);
    REQUIRE(back[i].margin == res.metrics[i].margin);
    REQUIRE(std::isnan(back[i].reverse_kl_to_chosen));
  }
}

TEST_CASE("compare_runs") {
  const GroundTruth gt = make_world(103, 2, 4);
  const std::vector<IdTriple> data = sample_ids(gt.domain, 8, 3);
  TabularSoftmaxPolicy pol = TabularSoftmaxPolicy::from_reference(gt.domain);
  const TabularSoftmaxPolicy ref = clone_frozen(pol);
  const TrainResult res = train(pol, ref, data, make_loss_spec("dil-bce"),
                                quick_config(20, 0.05), &gt.domain);

  SECTION("a run compared with itself shows zero differences") {
    std::vector<NamedLog> logs = {{"a", res.metrics}, {"b", res.metrics}};
    const auto table = compare_runs(logs);
    REQUIRE(table.size() == 2);
    REQUIRE(table[0].chosen_decline == table[1].chosen_decline);
    REQUIRE(table[0].final_margin == table[1].final_margin);
    REQUIRE(table[0].chosen_decline >= 0.0);
  }
  SECTION("empty log list errors") {
    std::vector<NamedLog> logs;
    REQUIRE_THROWS_AS(compare_runs(logs), ConfigError);
  }
  SECTION("mismatched step grids error") {
    std::vector<MetricsRow> truncated(res.metrics.begin(), res.metrics.end() - 1);
    std::vector<NamedLog> logs = {{"a", res.metrics}, {"b", truncated}};
    REQUIRE_THROWS_AS(compare_runs(logs), ConfigError);
  }
}

TEST_CASE("adam and sgd step behavior") {
  SECTION("sgd moves against the gradient") {
    std::vector<double> p = {1.0, 2.0};
    const std::vector<double> g = {0.5, -1.0};
    sgd_step(p, g, 0.1);
    REQUIRE(near(p[0], 0.95, 1e-15));
    REQUIRE(near(p[1], 2.1, 1e-15));
  }
  SECTION("adam first step size is lr regardless of gradient scale") {
    // up to the eps regularizer, which costs eps/|g| in relative terms
    for (double scale : {1e-4, 1.0, 1e4}) {
      std::vector<double> p = {0.0};
      std::vector<double> g = {scale};
      AdamState st(1);
      adam_step(st, p, g, 0.01);
      REQUIRE(near(p[0], -0.01, 2e-6));
    }
  }
  SECTION("clip_grad_norm caps the norm and reports the original") {
    std::vector<double> g = {3.0, 4.0};
    const double before = clip_grad_norm(g, 1.0);
    REQUIRE(near(before, 5.0, 1e-15));
    REQUIRE(near(std::sqrt(g[0] * g[0] + g[1] * g[1]), 1.0, 1e-12));
    std::vector<double> small = {0.3, 0.4};
    clip_grad_norm(small, 1.0);
    REQUIRE(near(small[0], 0.3, 1e-15));
  }
}
