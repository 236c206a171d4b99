#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dilab/config.hpp"

using namespace dilab;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static bool cleaned = false;
  const fs::path dir = "scratch_config";
  if (!cleaned) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    cleaned = true;
  }
  return dir;
}

std::string write_config(const std::string& name, const std::string& body) {
  const std::string p = (scratch() / name).string();
  std::ofstream out(p);
  out << body;
  return p;
}

const char* kGoodGen = R"(# comment line
[gen]
num_prompts = 3
responses_per_prompt = 6
vocab_size = 16
response_length = 4
reward_spec = random-gaussian(1.0)
ref_concentration = 0.5
pairs_per_prompt = 10
seed = 5
)";

}  // namespace

TEST_CASE("config: gen section parses") {
  const RunConfig rc = load_run_config(write_config("good.ini", kGoodGen));
  REQUIRE(rc.gen.has_value());
  REQUIRE(rc.gen->num_prompts == 3);
  REQUIRE(rc.gen->responses_per_prompt == 6);
  REQUIRE(std::get<RewardRandomGaussian>(rc.gen->reward_spec).scale == 1.0);
  REQUIRE(rc.gen->ref_concentration == 0.5);
  REQUIRE(rc.gen->beta == 1.0);  // default
  REQUIRE(!rc.train.has_value());
}

TEST_CASE("config: missing required key names the key") {
  const std::string body = R"([gen]
num_prompts = 3
responses_per_prompt = 6
vocab_size = 16
response_length = 4
pairs_per_prompt = 10
seed = 5
)";
  try {
    load_run_config(write_config("missing.ini", body));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("reward_spec") != std::string::npos);
  }
}

TEST_CASE("config: unknown key and unknown section are rejected") {
  try {
    load_run_config(write_config("unknown.ini", std::string(kGoodGen) + "banana = 7\n"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("banana") != std::string::npos);
  }
  REQUIRE_THROWS_AS(load_run_config(write_config("badsec.ini", "[wat]\nx = 1\n")), ConfigError);
  REQUIRE_THROWS_AS(load_run_config(write_config("nosec.ini", "x = 1\n")), ConfigError);
  REQUIRE_THROWS_AS(load_run_config(write_config("dupe.ini",
                                                 "[gen]\nseed = 1\nseed = 2\n")),
                    ConfigError);
}

TEST_CASE("config: train section with defaults and path checks") {
  // referenced files must exist at parse time
  const std::string ds = (scratch() / "ds.jsonl").string();
  std::ofstream(ds).close();
  const std::string body = std::string(kGoodGen) + R"(
[train]
policy = tiny-neural
loss = dil-ukl
lr = 0.01
steps = 50
batch_size = 8
seed = 2
vocab_size = 16
dataset = )" + ds + "\n";
  const RunConfig rc = load_run_config(write_config("train.ini", body));
  REQUIRE(rc.train.has_value());
  REQUIRE(rc.train->policy == "tiny-neural");
  REQUIRE(rc.train->optim.metrics_every == 10);  // neural default
  REQUIRE(rc.train->optim.optimizer == Optimizer::adaptive_moment);
  REQUIRE(rc.train->optim.schedule == LrSchedule::constant);
  const LossSpec spec = loss_spec_of(*rc.train);
  REQUIRE(spec.name() == "dil-ukl");
  REQUIRE(!spec.ratio_config.clamp.has_value());  // only dil-lsif defaults a clamp
  const LossSpec lsif = loss_spec_of(*rc.train, "dil-lsif");
  REQUIRE(lsif.ratio_config.clamp.has_value());
  REQUIRE(*lsif.ratio_config.clamp == 30.0);

  SECTION("missing dataset path fails at parse time") {
    const std::string bad = std::string(kGoodGen) + R"(
[train]
loss = dpo
lr = 0.01
steps = 50
batch_size = 8
seed = 2
dataset = /nonexistent/file.jsonl
domain = /nonexistent/domain.json
)";
    REQUIRE_THROWS_AS(load_run_config(write_config("badpath.ini", bad)), ConfigError);
    REQUIRE_NOTHROW(load_run_config(write_config("badpath2.ini", bad),
                                    /*check_train_paths=*/false));
  }
  SECTION("tabular policy requires a domain") {
    const std::string bad = std::string(kGoodGen) + R"(
[train]
policy = tabular
loss = dpo
lr = 0.01
steps = 50
batch_size = 8
seed = 2
dataset = )" + ds + "\n";
    REQUIRE_THROWS_AS(load_run_config(write_config("nodomain.ini", bad)), ConfigError);
  }
  SECTION("unknown loss name is rejected at parse time") {
    const std::string bad = std::string(kGoodGen) + R"(
[train]
loss = slic
lr = 0.01
steps = 50
batch_size = 8
seed = 2
vocab_size = 16
dataset = )" + ds + "\n";
    REQUIRE_THROWS_AS(load_run_config(write_config("badloss.ini", bad)), ConfigError);
  }
}

TEST_CASE("config: value type errors") {
  REQUIRE_THROWS_AS(load_run_config(write_config("badint.ini",
                                                 "[gen]\nnum_prompts = many\n")),
                    ConfigError);
  const std::string ds = (scratch() / "ds2.jsonl").string();
  std::ofstream(ds).close();
  const std::string body = R"([train]
loss = dpo
lr = 0.01
steps = 50
batch_size = 8
seed = 2
vocab_size = 16
length_normalize = yes
dataset = )" + ds + "\n";
  REQUIRE_THROWS_AS(load_run_config(write_config("badbool.ini", body)), ConfigError);
}

TEST_CASE("config: output section") {
  const RunConfig rc =
      load_run_config(write_config("out.ini", std::string(kGoodGen) + "[output]\ndir = /tmp/x\n"));
  REQUIRE(rc.output_dir.has_value());
  REQUIRE(*rc.output_dir == "/tmp/x");
}
