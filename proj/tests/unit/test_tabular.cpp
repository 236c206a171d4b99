#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "dilab/datagen.hpp"
#include "dilab/tabular.hpp"

using namespace dilab;
namespace fs = std::filesystem;

namespace {

bool near(double a, double b, double tol) { return std::fabs(a - b) < tol; }

ProbTable uniform(int n) {
  return ProbTable{std::vector<double>(n, 1.0 / n)};
}

// Two-response world, uniform reference, reward gap graded by `delta`.
TabularDomain two_response_domain(double delta) {
  const double s = sigmoid(delta);
  return make_table_domain({uniform(2)}, {{delta, 0.0}}, {ProbTable{{s, 1.0 - s}}});
}

TabularDomain random_domain(std::uint64_t seed, int prompts = 4, int responses = 8) {
  GenConfig cfg;
  cfg.num_prompts = prompts;
  cfg.responses_per_prompt = responses;
  cfg.vocab_size = 24;
  cfg.response_length = 4;
  cfg.seed = seed;
  return build_domain(cfg).domain;
}

}  // namespace

TEST_CASE("partition: worked values") {
  TabularDomain d = two_response_domain(0.0);

  SECTION("zero reward gives Z = 1") {
    REQUIRE(near(partition(d, 0, std::vector<double>{0.0, 0.0}, 1.0), 1.0, 1e-15));
  }
  SECTION("uniform ref, reward (1, 0), beta 1: Z = (e+1)/2") {
    REQUIRE(near(partition(d, 0, std::vector<double>{1.0, 0.0}, 1.0), 1.8591409142295225, 1e-12));
  }
  SECTION("adding c to all rewards multiplies Z by exp(c/beta)") {
    const std::vector<double> r = {0.7, -0.3};
    const double c = 2.5, beta = 0.5;
    const std::vector<double> shifted = {r[0] + c, r[1] + c};
    REQUIRE(near(partition(d, 0, shifted, beta),
                 partition(d, 0, r, beta) * std::exp(c / beta), 1e-9));
  }
  SECTION("non-finite reward is rejected") {
    REQUIRE_THROWS_AS(partition(d, 0, std::vector<double>{std::nan(""), 0.0}, 1.0), ConfigError);
    REQUIRE_THROWS_AS(partition(d, 0, std::vector<double>{1.0, 0.0}, 0.0), ConfigError);
  }
}

TEST_CASE("ebm_policy: worked values and invariances") {
  TabularDomain d = two_response_domain(0.0);

  SECTION("zero reward returns pi_ref") {
    const PolicyTable t = ebm_policy(d, {{0.0, 0.0}}, 1.0);
    REQUIRE(near(t.rows[0][0], 0.5, 1e-15));
  }
  SECTION("reward (1, 0) reweights to (e, 1)/(e+1)") {
    const PolicyTable t = ebm_policy(d, {{1.0, 0.0}}, 1.0);
    REQUIRE(near(t.rows[0][0], 0.7310585786300049, 1e-14));
    REQUIRE(near(t.rows[0][1], 0.26894142136999512, 1e-14));
  }
  SECTION("constant reward is invariant") {
    const PolicyTable t = ebm_policy(d, {{3.7, 3.7}}, 1.0);
    REQUIRE(near(t.rows[0][0], 0.5, 1e-13));
  }
  SECTION("rows sum to 1 within 1e-12 on random domains") {
    const TabularDomain rd = random_domain(21, 5, 12);
    Rng rng(4);
    std::vector<std::vector<double>> reward(rd.num_prompts());
    for (int x = 0; x < rd.num_prompts(); ++x) {
      for (int y = 0; y < rd.num_responses(x); ++y) reward[x].push_back(3.0 * rng.normal());
    }
    const PolicyTable t = ebm_policy(rd, reward, 0.7);
    for (const ProbTable& row : t.rows) {
      double sum = 0.0;
      for (double p : row.p) sum += p;
      REQUIRE(near(sum, 1.0, 1e-12));
    }
  }
}

TEST_CASE("forward and reverse KL") {
  SECTION("KL(p || p) = 0 for random tables") {
    Rng rng(5);
    for (int k = 0; k < 50; ++k) {
      std::vector<double> w(3 + rng.uniform_int(6));
      for (double& v : w) v = 0.05 + rng.uniform01();
      const ProbTable p = normalize(w);
      REQUIRE(forward_kl(p, p) == 0.0);
      REQUIRE(reverse_kl(p, p) == 0.0);
    }
  }
  SECTION("worked two-term value") {
    const ProbTable p{{0.5, 0.5}}, q{{0.75, 0.25}};
    // 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25) = 0.5 ln(4/3)
    REQUIRE(near(forward_kl(p, q), 0.14384103622589045, 1e-15));
  }
  SECTION("reverse_kl(p, q) is the hand-rolled sum q ln(q/p) on 3-element tables") {
    const ProbTable p{{0.5, 0.3, 0.2}}, q{{0.2, 0.5, 0.3}};
    double hand = 0.0;
    for (int i = 0; i < 3; ++i) hand += q.p[i] * std::log(q.p[i] / p.p[i]);
    REQUIRE(near(reverse_kl(p, q), hand, 1e-15));
  }
  SECTION("asymmetry at p = (0.9, 0.1), q = (0.5, 0.5)") {
    const ProbTable p{{0.9, 0.1}}, q{{0.5, 0.5}};
    const double fwd = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
    const double rev = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    REQUIRE(near(forward_kl(p, q), fwd, 1e-15));
    REQUIRE(near(reverse_kl(p, q), rev, 1e-15));
    REQUIRE(std::fabs(forward_kl(p, q) - reverse_kl(p, q)) > 0.1);
  }
  SECTION("Gibbs inequality on 1000 random pairs") {
    Rng rng(6);
    for (int k = 0; k < 1000; ++k) {
      std::vector<double> w1(4), w2(4);
      for (double& v : w1) v = 0.01 + rng.uniform01();
      for (double& v : w2) v = 0.01 + rng.uniform01();
      REQUIRE(forward_kl(normalize(w1), normalize(w2)) >= 0.0);
    }
  }
  SECTION("both divergences are zero iff the tables match") {
    Rng rng(14);
    for (int k = 0; k < 100; ++k) {
      std::vector<double> w(5);
      for (double& v : w) v = 0.05 + rng.uniform01();
      const ProbTable p = normalize(w);
      ProbTable q = p;
      q.p[1] += 0.01;
      q.p[2] -= 0.01;
      REQUIRE(forward_kl(p, p) < 1e-12);
      REQUIRE(reverse_kl(p, p) < 1e-12);
      REQUIRE(forward_kl(p, q) > 1e-12);
      REQUIRE(reverse_kl(p, q) > 1e-12);
    }
  }
  SECTION("zero in q under p support is an error") {
    REQUIRE_THROWS_AS(forward_kl(ProbTable{{0.5, 0.5}}, ProbTable{{1.0, 0.0}}), ConfigError);
    REQUIRE_NOTHROW(forward_kl(ProbTable{{1.0, 0.0}}, ProbTable{{0.5, 0.5}}));
  }
}

TEST_CASE("rlhf_optimum: certified by brute force and limits") {
  SECTION("beats 100 random perturbed policies on the distillation objective") {
    const TabularDomain d = make_table_domain({ProbTable{{0.4, 0.3, 0.2, 0.1}}},
                                              {{0.9, -0.2, 0.5, 0.0}},
                                              {ProbTable{{0.25, 0.25, 0.25, 0.25}}});
    const std::vector<std::vector<double>> reward = {{0.9, -0.2, 0.5, 0.0}};
    const double beta = 0.8;
    const PolicyTable star = rlhf_optimum(d, reward, beta);
    const double best = distillation_objective(d, star, reward, beta);
    Rng rng(8);
    for (int k = 0; k < 100; ++k) {
      std::vector<double> w(4);
      for (int y = 0; y < 4; ++y) w[y] = star.rows[0][y] * std::exp(0.2 * rng.normal());
      PolicyTable perturbed;
      perturbed.rows.push_back(normalize(w));
      REQUIRE(distillation_objective(d, perturbed, reward, beta) > best);
    }
  }
  SECTION("huge beta returns pi_ref") {
    const TabularDomain d = random_domain(31, 3, 6);
    std::vector<std::vector<double>> reward;
    for (int x = 0; x < d.num_prompts(); ++x) reward.push_back(d.prompts[x].reward);
    const PolicyTable t = rlhf_optimum(d, reward, 1e6);
    for (int x = 0; x < d.num_prompts(); ++x) {
      REQUIRE(tv_distance(t.rows[x], d.prompts[x].pi_ref) < 1e-5);
    }
  }
  SECTION("beta 1 with the density-ratio reward returns pi_chosen") {
    const TabularDomain d = random_domain(33, 4, 8);
    const PolicyTable t = rlhf_optimum(d, log_ratio_tables(d), 1.0);
    for (int x = 0; x < d.num_prompts(); ++x) {
      REQUIRE(tv_distance(t.rows[x], d.prompts[x].pi_chosen) < 1e-12);
    }
  }
  SECTION("invariant to a per-prompt constant added to the reward") {
    const TabularDomain d = random_domain(35, 3, 7);
    auto reward = log_ratio_tables(d);
    const PolicyTable base = rlhf_optimum(d, reward, 0.6);
    for (auto& row : reward) {
      for (double& v : row) v += 4.2;
    }
    const PolicyTable shifted = rlhf_optimum(d, reward, 0.6);
    for (int x = 0; x < d.num_prompts(); ++x) {
      REQUIRE(tv_distance(base.rows[x], shifted.rows[x]) < 1e-12);
    }
  }
}

TEST_CASE("check_proposition1") {
  SECTION("passes at tol 1e-10 on random full-support domains") {
    for (std::uint64_t seed : {101, 102, 103, 104, 105}) {
      const TabularDomain d = random_domain(seed, 4, 8);
      const Prop1Report rep = check_proposition1(d, 1e-10, seed);
      REQUIRE(rep.pass);
      REQUIRE(rep.upper_level_tv < 1e-10);
      REQUIRE(rep.lower_level_gap > 0.0);
    }
  }
  SECTION("+0.1 on one response strictly increases the exact objective") {
    const TabularDomain d = random_domain(41, 2, 5);
    auto r_star = log_ratio_tables(d);
    const double j_star = il_objective(d, r_star);
    r_star[0][2] += 0.1;
    REQUIRE(il_objective(d, r_star) > j_star);
  }
  SECTION("beta 2 distillation does not return pi_chosen on a skewed domain") {
    const TabularDomain d =
        make_table_domain({uniform(2)}, {{0.0, 0.0}}, {ProbTable{{0.9, 0.1}}});
    const PolicyTable t = rlhf_optimum(d, log_ratio_tables(d), 2.0);
    // geometric mean of ref and chosen, normalized: (0.75, 0.25) by hand
    REQUIRE(near(t.rows[0][0], 0.75, 1e-12));
    REQUIRE(tv_distance(t.rows[0], d.prompts[0].pi_chosen) > 0.01);
  }
}

TEST_CASE("self_normalization_check") {
  SECTION("every generated domain has Z = 1 within 1e-12") {
    for (std::uint64_t seed : {1, 2, 3}) {
      const TabularDomain d = random_domain(seed, 4, 8);
      for (double z : self_normalization_check(d)) REQUIRE(near(z, 1.0, 1e-12));
    }
  }
  SECTION("8x16 random domain") {
    const TabularDomain d = random_domain(55, 8, 16);
    for (double z : self_normalization_check(d)) REQUIRE(near(z, 1.0, 1e-12));
  }
  SECTION("unnormalized table is the negative control") {
    TabularDomain d = two_response_domain(1.0);
    d.prompts[0].pi_chosen = ProbTable{{0.9, 0.3}};  // sums to 1.2
    const auto zs = self_normalization_check(d);
    REQUIRE(std::fabs(zs[0] - 1.0) > 0.1);
  }
}

TEST_CASE("il_reward_loss_equivalence") {
  SECTION("symmetric case gives ln 2") {
    const RewardLossPair p = il_reward_loss_equivalence(0.0, 0.0);
    REQUIRE(near(p.lhs, std::log(2.0), 1e-15));
    REQUIRE(near(p.rhs, std::log(2.0), 1e-15));
  }
  SECTION("worked value at (3, 1)") {
    const RewardLossPair p = il_reward_loss_equivalence(3.0, 1.0);
    REQUIRE(near(p.lhs, std::log1p(std::exp(-2.0)), 1e-14));
    REQUIRE(near(p.rhs, std::log1p(std::exp(-2.0)), 1e-14));
  }
  SECTION("1000 random pairs agree to 1e-12") {
    Rng rng(12);
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
      const double r_w = -20.0 + 40.0 * rng.uniform01();
      const double r_l = -20.0 + 40.0 * rng.uniform01();
      const RewardLossPair p = il_reward_loss_equivalence(r_w, r_l);
      worst = std::max(worst, std::fabs(p.lhs - p.rhs));
    }
    REQUIRE(worst < 1e-12);
  }
}

TEST_CASE("domain serialization round trip") {
  const fs::path dir = fs::path("scratch_tabular");
  fs::remove_all(dir);
  fs::create_directories(dir);
  const TabularDomain d = random_domain(77, 3, 9);
  const std::string p = (dir / "domain.json").string();
  save_domain(d, p);
  const TabularDomain back = load_domain(p);
  REQUIRE(back.num_prompts() == d.num_prompts());
  REQUIRE(back.beta == d.beta);
  REQUIRE(back.vocab_size == d.vocab_size);
  for (int x = 0; x < d.num_prompts(); ++x) {
    REQUIRE(back.prompts[x].prompt == d.prompts[x].prompt);
    REQUIRE(back.prompts[x].responses == d.prompts[x].responses);
    REQUIRE(back.prompts[x].pi_ref.p == d.prompts[x].pi_ref.p);
    REQUIRE(back.prompts[x].reward == d.prompts[x].reward);
    REQUIRE(back.prompts[x].pi_chosen.p == d.prompts[x].pi_chosen.p);
  }
  // a second save of the reloaded domain is byte-identical
  const std::string p2 = (dir / "domain2.json").string();
  save_domain(back, p2);
  std::ifstream f1(p, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);
}

TEST_CASE("domain validation catches bad shapes") {
  TabularDomain d = two_response_domain(0.5);
  REQUIRE_NOTHROW(validate(d));
  d.prompts[0].pi_ref = ProbTable{{1.0, 0.0}};
  REQUIRE_THROWS_AS(validate(d), ConfigError);  // support violation
  d = two_response_domain(0.5);
  d.beta = 0.0;
  REQUIRE_THROWS_AS(validate(d), ConfigError);
}
