// SPDX-License-Identifier: Apache-2.0
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "lmleak/harness/scenario.hpp"
#include "lmleak/llm/model.hpp"
#include "oracles.hpp"

using lmleak::Error;
using lmleak::ErrorCode;
using nlohmann::json;
namespace attack = lmleak::attack;
namespace gpu = lmleak::gpu;
namespace harness = lmleak::harness;
namespace llm = lmleak::llm;

namespace {

// Desk-scale fixture: three 8-layer models on disk, the first one the victim.
struct ScenarioFixture {
  oracle::TempDir dir;
  std::vector<llm::ToyModel> zoo;
  std::vector<std::string> paths;

  ScenarioFixture() : zoo(llm::build_zoo(3, 64, 16, 8, 2024)) {
    for (const auto& model : zoo) {
      paths.push_back(dir.file(model.model_id + ".model"));
      llm::save_model(model, paths.back());
    }
  }

  harness::ScenarioConfig config() const {
    harness::ScenarioConfig c;
    c.gpu.num_compute_units = 4;
    c.gpu.local_words_per_cu = 64;
    c.gpu.global_words = 1u << 16;
    c.gpu.residue_policy = gpu::ResiduePolicy::Persist;
    c.victim.model_path = paths[0];
    c.victim.prompt = {3, 1, 4};
    c.victim.n_tokens = 6;
    c.victim.tile = 4;
    c.zoo_paths = paths;
    c.seed = 77;
    return c;
  }

  // Eavesdropped tokens start after the fingerprinting warmup.
  std::vector<std::uint32_t> expected_tokens(std::uint32_t warmup,
                                             std::uint32_t n) const {
    const auto full = oracle::infer(zoo[0], {3, 1, 4}, warmup + n, 4);
    return {full.begin() + warmup, full.end()};
  }
};

json sample_config_json() {
  return json{
      {"gpu",
       {{"compute_units", 4},
        {"local_words_per_cu", 64},
        {"global_words", 65536},
        {"scheduler_seed", 5}}},
      {"policy", "zero-on-alloc"},
      {"victim",
       {{"model", "v.model"},
        {"prompt", {1, 2}},
        {"n_tokens", 3},
        {"tile", 4},
        {"self_zeroing", true}}},
      {"attacker",
       {{"interleave", "probabilistic"},
        {"p", 0.25},
        {"period", 7},
        {"fingerprint_tokens", 2},
        {"fragment_len", 5},
        {"zero_run", 6},
        {"similarity_threshold", 0.75},
        {"min_margin_words", 9},
        {"canary", 42},
        {"probe", false},
        {"double_steal_token", 1},
        {"perturb", {{"candidate", 2}, {"word", 3}, {"delta", 0.5}}}}},
      {"zoo", {"a.model", "b.model"}},
      {"seed", 11},
      {"report", "r.json"},
      {"trace", "t.jsonl"}};
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::ValidationError;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config json parses every field and round-trips") {
  const json j = sample_config_json();
  const harness::ScenarioConfig config = harness::scenario_config_from_json(j);

  CHECK(config.gpu.num_compute_units == 4);
  CHECK(config.gpu.local_words_per_cu == 64);
  CHECK(config.gpu.global_words == 65536);
  CHECK(config.gpu.scheduler_seed == 5);
  CHECK(config.gpu.residue_policy == gpu::ResiduePolicy::ZeroOnAllocate);
  CHECK(config.victim.model_path == "v.model");
  CHECK(config.victim.prompt == std::vector<std::uint32_t>{1, 2});
  CHECK(config.victim.n_tokens == 3);
  CHECK(config.victim.self_zeroing);
  CHECK(config.attacker.interleave.kind ==
        harness::InterleaveKind::Probabilistic);
  CHECK(config.attacker.interleave.p == 0.25);
  CHECK(config.attacker.interleave.period == 7);
  CHECK(config.attacker.fingerprint_tokens == 2u);
  CHECK(config.attacker.fragment_len == 5);
  CHECK(config.attacker.zero_run == 6);
  CHECK(config.attacker.similarity_threshold == 0.75);
  CHECK(config.attacker.min_margin_words == 9);
  CHECK(config.attacker.canary == 42);
  CHECK_FALSE(config.attacker.probe);
  CHECK(config.attacker.double_steal_token == 1u);
  REQUIRE(config.attacker.perturb.has_value());
  CHECK(config.attacker.perturb->candidate == 2);
  CHECK(config.attacker.perturb->word == 3);
  CHECK(config.attacker.perturb->delta == 0.5f);
  CHECK(config.zoo_paths == std::vector<std::string>{"a.model", "b.model"});
  CHECK(config.seed == 11);
  CHECK(config.report_path == "r.json");
  CHECK(config.trace_path == "t.jsonl");

  const json j1 = harness::scenario_config_to_json(config);
  const json j2 = harness::scenario_config_to_json(
      harness::scenario_config_from_json(j1));
  CHECK(j1 == j2);
}

TEST_CASE("unknown config keys are rejected at every level") {
  auto rejects = [](json j) {
    CHECK(code_of([&] { harness::scenario_config_from_json(j); }) ==
          ErrorCode::ValidationError);
  };
  json j = sample_config_json();
  j["typo"] = 1;
  rejects(j);
  j = sample_config_json();
  j["gpu"]["cores"] = 2;
  rejects(j);
  j = sample_config_json();
  j["victim"]["temperature"] = 0.7;
  rejects(j);
  j = sample_config_json();
  j["attacker"]["stealth"] = true;
  rejects(j);
  j = sample_config_json();
  j["attacker"]["perturb"]["sign"] = -1;
  rejects(j);
}

TEST_CASE("config validation rejects out-of-range values") {
  auto rejects = [](json j) {
    CHECK(code_of([&] { harness::scenario_config_from_json(j); }) ==
          ErrorCode::ValidationError);
  };
  json j = sample_config_json();
  j.erase("victim");
  rejects(j);
  j = sample_config_json();
  j["victim"].erase("model");
  rejects(j);
  j = sample_config_json();
  j["victim"]["prompt"] = json::array();
  rejects(j);
  j = sample_config_json();
  j["victim"]["n_tokens"] = 0;
  rejects(j);
  j = sample_config_json();
  j["victim"]["tile"] = 0;
  rejects(j);
  j = sample_config_json();
  j["gpu"]["compute_units"] = 0;
  rejects(j);
  j = sample_config_json();
  j["zoo"] = json::array();
  rejects(j);
  j = sample_config_json();
  j["policy"] = "shred-twice";
  rejects(j);
  j = sample_config_json();
  j["attacker"]["interleave"] = "sometimes";
  rejects(j);
  j = sample_config_json();
  j["attacker"]["p"] = 1.5;
  rejects(j);
  j = sample_config_json();
  j["attacker"]["interleave"] = "periodic";
  j["attacker"]["period"] = 0;
  rejects(j);
  j = sample_config_json();
  j["attacker"]["fragment_len"] = 3;
  rejects(j);
  j = sample_config_json();
  j["attacker"]["zero_run"] = 0;
  rejects(j);
  j = sample_config_json();
  j["attacker"]["similarity_threshold"] = 0.0;
  rejects(j);
  j = sample_config_json();
  j["attacker"]["similarity_threshold"] = 1.0;
  rejects(j);
}

TEST_CASE("config files load with format errors surfaced") {
  oracle::TempDir dir;
  CHECK(code_of([&] {
          harness::load_scenario_config(dir.file("missing.json"));
        }) == ErrorCode::FormatError);
  {
    std::ofstream out(dir.file("broken.json"));
    out << "{ not json";
  }
  CHECK(code_of([&] {
          harness::load_scenario_config(dir.file("broken.json"));
        }) == ErrorCode::FormatError);
}

TEST_CASE("an eavesdropped run reconstructs the whole transcript") {
  ScenarioFixture fx;
  const harness::ScenarioConfig config = fx.config();
  const harness::ScenarioReport report = harness::run_scenario(config);

  REQUIRE(report.probe.has_value());
  CHECK(report.probe->vulnerable);
  CHECK(report.probe->leak_fraction == 1.0);

  REQUIRE(report.fingerprint.has_value());
  CHECK(report.fingerprint->best_model_id == "m0");
  CHECK(report.fingerprint->confident);
  CHECK_FALSE(report.fingerprint_insufficient);
  CHECK(report.replay_model_id == "m0");
  CHECK(report.victim_model_id == "m0");

  // Warmup defaults to the layer count; the scored transcript follows it.
  CHECK(report.victim_tokens == fx.expected_tokens(8, 6));
  CHECK(report.reconstruction.fidelity == 1.0);
  CHECK(report.reconstruction.exact == 6);
  CHECK(report.reconstruction.duplicate == 0);
  CHECK(report.reconstruction.missing == 0);
  CHECK(report.reconstruction.similar == 0);
  CHECK(report.reconstruction.incorrect == 0);
  CHECK(report.reconstruction.recovered == report.victim_tokens);
  CHECK(report.reconstruction.alignment.size() == 6);

  CHECK(report.schedule.output_layer_dispatches == 6);
  CHECK(report.schedule.output_layer_steals == 6);
  CHECK(report.vocab == fx.zoo[0].vocab);
  CHECK_FALSE(report.fingerprint_trace.records.empty());
  CHECK(report.eavesdrop_trace.records.size() == 6);
}

TEST_CASE("identical configs produce byte-identical reports") {
  ScenarioFixture fx;
  const harness::ScenarioConfig config = fx.config();
  const harness::ScenarioReport first = harness::run_scenario(config);
  const harness::ScenarioReport second = harness::run_scenario(config);
  const std::string a = harness::report_to_json(config, first).dump();
  const std::string b = harness::report_to_json(config, second).dump();
  CHECK(a == b);

  const json parsed = json::parse(a);
  CHECK(parsed.at("schema") == "lmleak-report-v1");
  CHECK(parsed.at("probe").at("vulnerable") == true);
  CHECK(parsed.at("fingerprint").at("best_model_id") == "m0");
  CHECK(parsed.at("reconstruction").at("fidelity") == 1.0);
  CHECK(parsed.at("victim_transcript").at("ids").size() == 6);
  CHECK(parsed.at("recovered").size() == 6);
  CHECK(parsed.at("alignment").size() == 6);
  CHECK(parsed.at("schedule").at("output_layer_steals") == 6);
}

TEST_CASE("interleave policies shape what is recovered") {
  ScenarioFixture fx;

  harness::ScenarioConfig config = fx.config();
  config.attacker.interleave.kind = harness::InterleaveKind::None;
  harness::ScenarioReport report = harness::run_scenario(config);
  CHECK(report.reconstruction.recovered.empty());
  CHECK(report.reconstruction.fidelity == 0.0);
  CHECK(report.reconstruction.missing == 6);
  CHECK(report.schedule.output_layer_dispatches == 6);
  CHECK(report.schedule.output_layer_steals == 0);

  config = fx.config();
  config.attacker.interleave.kind = harness::InterleaveKind::AfterEveryKernel;
  report = harness::run_scenario(config);
  CHECK(report.reconstruction.fidelity == 1.0);
  CHECK(report.reconstruction.exact == 6);
  CHECK(report.schedule.output_layer_steals == 6);

  // Nine dispatches per token step, so period 9 hits exactly the output
  // projections.
  config = fx.config();
  config.attacker.interleave.kind = harness::InterleaveKind::Periodic;
  config.attacker.interleave.period = 9;
  report = harness::run_scenario(config);
  CHECK(report.reconstruction.fidelity == 1.0);
  CHECK(report.eavesdrop_trace.records.size() == 6);
}

TEST_CASE("fidelity is monotone in the steal probability") {
  ScenarioFixture fx;
  double previous = -1.0;
  for (double p : {0.25, 0.5, 0.75, 1.0}) {
    harness::ScenarioConfig config = fx.config();
    config.victim.n_tokens = 12;
    config.attacker.interleave.kind = harness::InterleaveKind::Probabilistic;
    config.attacker.interleave.p = p;
    const harness::ScenarioReport report = harness::run_scenario(config);
    CHECK(report.reconstruction.fidelity >= previous);
    previous = report.reconstruction.fidelity;

    // Partial capture is clean: every steal lands a token, every skipped
    // output layer costs one, and nothing is garbled in between.
    CHECK(report.reconstruction.exact == report.schedule.output_layer_steals);
    CHECK(report.reconstruction.missing ==
          12 - report.schedule.output_layer_steals);
    CHECK(report.reconstruction.duplicate == 0);
    CHECK(report.reconstruction.similar == 0);
    CHECK(report.reconstruction.incorrect == 0);
  }
  CHECK(previous == 1.0);
}

TEST_CASE("a double steal shows up as a duplicate") {
  ScenarioFixture fx;
  harness::ScenarioConfig config = fx.config();
  config.attacker.double_steal_token = 2;
  const harness::ScenarioReport report = harness::run_scenario(config);
  CHECK(report.reconstruction.exact == 6);
  CHECK(report.reconstruction.duplicate == 1);
  CHECK(report.reconstruction.fidelity == 1.0);
  CHECK(report.reconstruction.alignment.size() == 7);
  CHECK(report.eavesdrop_trace.records.size() == 7);
}

TEST_CASE("a perturbed replay degrades exactly one token") {
  ScenarioFixture fx;
  harness::ScenarioConfig config = fx.config();
  config.attacker.perturb = harness::PerturbSpec{1, 0, 1000.0f};
  const harness::ScenarioReport report = harness::run_scenario(config);
  CHECK(report.reconstruction.exact == 5);
  CHECK(report.reconstruction.similar + report.reconstruction.incorrect == 1);
  CHECK(report.reconstruction.fidelity == doctest::Approx(5.0 / 6.0));
}

TEST_CASE("skipping the fingerprint phase leaves the attacker blind") {
  ScenarioFixture fx;
  harness::ScenarioConfig config = fx.config();
  config.attacker.fingerprint_tokens = 0;
  const harness::ScenarioReport report = harness::run_scenario(config);
  CHECK(report.fingerprint_insufficient);
  CHECK_FALSE(report.fingerprint.has_value());
  CHECK(report.replay_model_id.empty());
  CHECK(report.reconstruction.recovered.empty());
  CHECK(report.reconstruction.fidelity == 0.0);
  CHECK(report.victim_tokens == fx.expected_tokens(0, 6));
  CHECK(report.fingerprint_trace.records.empty());
}

TEST_CASE("mitigations stop the reconstruction") {
  ScenarioFixture fx;

  auto run_with = [&](gpu::ResiduePolicy policy, bool self_zeroing) {
    harness::ScenarioConfig config = fx.config();
    config.gpu.residue_policy = policy;
    config.victim.self_zeroing = self_zeroing;
    config.attacker.interleave.kind =
        harness::InterleaveKind::AfterEveryKernel;
    return harness::run_scenario(config);
  };

  harness::ScenarioReport report =
      run_with(gpu::ResiduePolicy::ZeroOnAllocate, false);
  CHECK(report.probe->leak_fraction == 0.0);
  CHECK(report.fingerprint_insufficient);
  CHECK(report.reconstruction.recovered.empty());
  CHECK(report.reconstruction.fidelity == 0.0);

  report = run_with(gpu::ResiduePolicy::AtomicWipe, false);
  CHECK(report.probe->leak_fraction == 0.0);
  CHECK(report.fingerprint_insufficient);
  CHECK(report.reconstruction.fidelity == 0.0);

  // The deferred wipe still loses the probe's pre-queued race, but every
  // in-scenario steal happens after the wipe already hit the queue.
  report = run_with(gpu::ResiduePolicy::WipeKernelAfter, false);
  CHECK(report.probe->leak_fraction == 1.0);
  CHECK(report.fingerprint_insufficient);
  CHECK(report.reconstruction.fidelity == 0.0);

  // A self-protecting victim on a leaky platform: the probe still shows the
  // platform flaw, yet nothing of the victim is recoverable.
  report = run_with(gpu::ResiduePolicy::Persist, true);
  CHECK(report.probe->leak_fraction == 1.0);
  CHECK(report.fingerprint_insufficient);
  CHECK(report.reconstruction.recovered.empty());
  CHECK(report.reconstruction.fidelity == 0.0);
}

TEST_CASE("the deferred wipe race leaks at the attacker's win rate") {
  harness::ScenarioConfig config;
  config.gpu.num_compute_units = 4;
  config.gpu.local_words_per_cu = 64;
  config.gpu.residue_policy = gpu::ResiduePolicy::WipeKernelAfter;
  config.seed = 99;

  config.attacker.interleave.p = 0.0;
  harness::RaceReport report = harness::run_wipe_race(config, 50);
  CHECK(report.leaks == 0);
  CHECK(report.leak_rate == 0.0);

  config.attacker.interleave.p = 1.0;
  report = harness::run_wipe_race(config, 50);
  CHECK(report.leaks == 50);
  CHECK(report.leak_rate == 1.0);

  config.attacker.interleave.p = 0.5;
  report = harness::run_wipe_race(config, 200);
  CHECK(report.trials == 200);
  CHECK(report.leak_rate >= 0.4);
  CHECK(report.leak_rate <= 0.6);

  const json j = harness::race_report_to_json(config, 200, report);
  CHECK(j.at("schema") == "lmleak-race-v1");
  CHECK(j.at("leaks") == report.leaks);
  CHECK(j.at("leak_rate") == report.leak_rate);

  config.gpu.residue_policy = gpu::ResiduePolicy::Persist;
  CHECK(code_of([&] { harness::run_wipe_race(config, 10); }) ==
        ErrorCode::ValidationError);
  config.gpu.residue_policy = gpu::ResiduePolicy::WipeKernelAfter;
  CHECK(code_of([&] { harness::run_wipe_race(config, 0); }) ==
        ErrorCode::ValidationError);
}

TEST_CASE("trace and report files mirror the in-memory run") {
  ScenarioFixture fx;
  harness::ScenarioConfig config = fx.config();
  config.trace_path = fx.dir.file("trace.jsonl");
  config.report_path = fx.dir.file("report.json");
  const harness::ScenarioReport report = harness::run_scenario(config);

  const attack::DumpTrace trace = attack::read_trace_jsonl(config.trace_path);
  CHECK(trace.records.size() == report.fingerprint_trace.records.size() +
                                    report.eavesdrop_trace.records.size());
  CHECK(trace.records.back().cu_images ==
        report.eavesdrop_trace.records.back().cu_images);

  std::ifstream in(config.report_path);
  REQUIRE(in.good());
  const json stored = json::parse(in);
  CHECK(stored == harness::report_to_json(config, report));
}

}  // TEST_SUITE
