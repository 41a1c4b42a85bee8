// SPDX-License-Identifier: Apache-2.0
//
// lmleak — local-memory leakage simulator.
//
// Exit codes: 0 success / no leakage observed, 2 leakage observed,
// 1 simulation failure, 64 usage or config error.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lmleak/attack/pipeline.hpp"
#include "lmleak/error.hpp"
#include "lmleak/gpu/machine.hpp"
#include "lmleak/harness/scenario.hpp"
#include "lmleak/llm/model.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitLeak = 2;
constexpr int kExitUsage = 64;

std::string fixed3(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", value);
  return buf;
}

int run_probe(const std::string& policy_name, std::uint32_t cus,
              std::uint32_t bank_words, std::uint32_t canary,
              std::uint64_t seed, bool as_json) {
  lmleak::gpu::GpuConfig config;
  config.num_compute_units = cus;
  config.local_words_per_cu = bank_words;
  config.scheduler_seed = seed;
  bool found = false;
  for (lmleak::gpu::ResiduePolicy policy :
       {lmleak::gpu::ResiduePolicy::Persist,
        lmleak::gpu::ResiduePolicy::ZeroOnAllocate,
        lmleak::gpu::ResiduePolicy::WipeKernelAfter,
        lmleak::gpu::ResiduePolicy::AtomicWipe}) {
    if (policy_name == lmleak::gpu::residue_policy_name(policy)) {
      config.residue_policy = policy;
      found = true;
    }
  }
  if (!found) {
    std::cerr << "unknown policy '" << policy_name << "'\n";
    return kExitUsage;
  }

  lmleak::gpu::GpuMachine machine(config);
  const lmleak::attack::CanaryReport report =
      lmleak::attack::probe_canary(machine, canary);
  if (as_json) {
    json j = {{"schema", "lmleak-probe-v1"},
              {"policy", policy_name},
              {"canary", canary},
              {"total_words", report.total_words},
              {"matching_words", report.matching_words},
              {"leak_fraction", report.leak_fraction},
              {"vulnerable", report.vulnerable}};
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << "policy: " << policy_name << '\n'
              << "canary: " << canary << '\n'
              << "total_words: " << report.total_words << '\n'
              << "matching_words: " << report.matching_words << '\n'
              << "vulnerable: " << (report.vulnerable ? "true" : "false")
              << ", leak_fraction: " << fixed3(report.leak_fraction) << '\n';
  }
  return report.vulnerable ? kExitLeak : kExitOk;
}

// Side-by-side victim/recovered transcript, one alignment event per row.
void print_transcript_diff(std::ostream& out, const json& report) {
  const json& alignment = report.at("alignment");
  const json& victim_text = report.at("victim_transcript").at("text");
  const json& recovered = report.at("recovered");

  std::size_t width = 9;  // fits the "recovered" header
  for (const json& t : victim_text) {
    width = std::max(width, t.get<std::string>().size());
  }
  for (const json& r : recovered) {
    width = std::max(width, r.at("text").get<std::string>().size());
  }

  out << "  " << std::left << std::setw(static_cast<int>(width)) << "victim"
      << "  " << std::setw(static_cast<int>(width)) << "recovered"
      << "  tag\n";
  out << "  " << std::string(width, '-') << "  " << std::string(width, '-')
      << "  ---\n";
  for (const json& event : alignment) {
    std::string left = "·";
    std::string right = "·";
    if (!event.at("victim_index").is_null()) {
      left = victim_text.at(event.at("victim_index").get<std::size_t>())
                 .get<std::string>();
    }
    if (!event.at("recovered_index").is_null()) {
      right = recovered.at(event.at("recovered_index").get<std::size_t>())
                  .at("text")
                  .get<std::string>();
    }
    out << "  " << std::left << std::setw(static_cast<int>(width)) << left
        << "  " << std::setw(static_cast<int>(width)) << right << "  ["
        << event.at("tag").get<std::string>() << "]\n";
  }
}

void print_report_summary(std::ostream& out, const json& report) {
  out << "victim model: " << report.at("victim_model_id").get<std::string>()
      << '\n';
  if (!report.at("probe").is_null()) {
    const json& probe = report.at("probe");
    out << "probe: "
        << (probe.at("vulnerable").get<bool>() ? "vulnerable"
                                               : "not vulnerable")
        << ", leak_fraction "
        << fixed3(probe.at("leak_fraction").get<double>()) << '\n';
  }
  if (!report.at("fingerprint").is_null()) {
    const json& fp = report.at("fingerprint");
    out << "fingerprint: " << fp.at("best_model_id").get<std::string>()
        << " (margin " << fp.at("margin").get<std::uint64_t>() << ", "
        << (fp.at("confident").get<bool>() ? "confident" : "not confident")
        << ")\n";
  } else if (report.at("fingerprint_insufficient").get<bool>()) {
    out << "fingerprint: insufficient data\n";
  }
  const json& rec = report.at("reconstruction");
  out << "fidelity: " << fixed3(rec.at("fidelity").get<double>()) << " (exact "
      << rec.at("exact").get<std::uint32_t>() << ", duplicate "
      << rec.at("duplicate").get<std::uint32_t>() << ", missing "
      << rec.at("missing").get<std::uint32_t>() << ", similar "
      << rec.at("similar").get<std::uint32_t>() << ", incorrect "
      << rec.at("incorrect").get<std::uint32_t>() << ")\n";
  print_transcript_diff(out, report);
}

int run_attack(const std::string& config_path, const std::string& out_path,
               const std::string& trace_path) {
  lmleak::harness::ScenarioConfig config;
  try {
    config = lmleak::harness::load_scenario_config(config_path);
    if (!out_path.empty()) config.report_path = out_path;
    if (!trace_path.empty()) config.trace_path = trace_path;
    namespace fs = std::filesystem;
    if (!fs::exists(config.victim.model_path)) {
      throw lmleak::Error(lmleak::ErrorCode::ValidationError,
                          "victim model not found: " +
                              config.victim.model_path);
    }
    for (const std::string& path : config.zoo_paths) {
      if (!fs::exists(path)) {
        throw lmleak::Error(lmleak::ErrorCode::ValidationError,
                            "zoo model not found: " + path);
      }
    }
  } catch (const lmleak::Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    const lmleak::harness::ScenarioReport report =
        lmleak::harness::run_scenario(config);
    const json j = lmleak::harness::report_to_json(config, report);
    std::cout << j.dump(2) << '\n';
    print_report_summary(std::cerr, j);
    return kExitOk;
  } catch (const lmleak::Error& e) {
    json j = {{"schema", "lmleak-report-v1"},
              {"error", {{"code", lmleak::error_code_name(e.code())},
                         {"message", e.what()}}}};
    std::cout << j.dump(2) << '\n';
    if (!config.report_path.empty()) {
      std::ofstream out(config.report_path, std::ios::trunc);
      if (out) out << j.dump(2) << '\n';
    }
    std::cerr << "simulation failed: " << e.what() << '\n';
    return kExitFailure;
  }
}

int run_race(double p, std::uint32_t trials, std::uint32_t cus,
             std::uint32_t bank_words, std::uint32_t canary,
             std::uint64_t seed, bool as_json) {
  lmleak::harness::ScenarioConfig config;
  config.gpu.num_compute_units = cus;
  config.gpu.local_words_per_cu = bank_words;
  config.gpu.residue_policy = lmleak::gpu::ResiduePolicy::WipeKernelAfter;
  config.attacker.interleave.p = p;
  config.attacker.canary = canary;
  config.seed = seed;

  lmleak::harness::RaceReport report;
  try {
    report = lmleak::harness::run_wipe_race(config, trials);
  } catch (const lmleak::Error& e) {
    std::cerr << "race error: " << e.what() << '\n';
    return kExitUsage;
  }
  if (as_json) {
    std::cout << lmleak::harness::race_report_to_json(config, trials, report)
                     .dump(2)
              << '\n';
  } else {
    std::cout << "policy: wipe-after\n"
              << "p: " << fixed3(p) << '\n'
              << "trials: " << report.trials << '\n'
              << "leaks: " << report.leaks << '\n'
              << "leak_rate: " << fixed3(report.leak_rate) << '\n';
  }
  return report.leaks > 0 ? kExitLeak : kExitOk;
}

int run_zoo_build(std::uint32_t count, const std::string& dir,
                  std::uint32_t vocab, std::uint32_t dim,
                  std::uint32_t layers, std::uint64_t seed,
                  const std::string& emit_config) {
  namespace fs = std::filesystem;
  std::vector<lmleak::llm::ToyModel> zoo;
  try {
    zoo = lmleak::llm::build_zoo(count, vocab, dim, layers, seed);
  } catch (const lmleak::Error& e) {
    std::cerr << "zoo error: " << e.what() << '\n';
    return kExitUsage;
  }
  fs::create_directories(dir);
  std::vector<std::string> paths;
  for (const lmleak::llm::ToyModel& model : zoo) {
    const fs::path path = fs::path(dir) / (model.model_id + ".model");
    lmleak::llm::save_model(model, path);
    paths.push_back(path.string());
    std::cout << "wrote " << path.string() << " (vocab " << vocab << ", dim "
              << dim << ", layers " << layers << ")\n";
  }
  if (!emit_config.empty()) {
    lmleak::harness::ScenarioConfig config;
    config.victim.model_path = paths.front();
    config.victim.prompt = {1, 2, 3};
    config.zoo_paths = paths;
    config.seed = seed;
    std::ofstream out(emit_config, std::ios::trunc);
    if (!out) {
      std::cerr << "cannot open " << emit_config << '\n';
      return kExitUsage;
    }
    out << lmleak::harness::scenario_config_to_json(config).dump(2) << '\n';
    std::cout << "wrote " << emit_config << '\n';
  }
  return kExitOk;
}

int run_report_show(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "cannot open " << path << '\n';
    return kExitUsage;
  }
  const json report = json::parse(in, nullptr, false);
  if (report.is_discarded()) {
    std::cerr << path << " is not valid JSON\n";
    return kExitUsage;
  }
  if (report.contains("error")) {
    std::cout << "failed run: "
              << report.at("error").at("message").get<std::string>() << '\n';
    return kExitOk;
  }
  try {
    print_report_summary(std::cout, report);
  } catch (const json::exception& e) {
    std::cerr << path << " is not a scenario report: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic GPU local-memory leakage simulator"};
  app.require_subcommand(1);

  // probe
  auto* probe = app.add_subcommand(
      "probe", "canary write/listen test for residue leakage");
  std::string probe_policy = "persist";
  std::uint32_t probe_cus = 4, probe_bank = 64, probe_canary = 123;
  std::uint64_t probe_seed = 0;
  bool probe_json = false;
  probe->add_option("--policy", probe_policy,
                    "persist|zero-on-alloc|wipe-after|atomic-wipe");
  probe->add_option("--cus", probe_cus, "compute units");
  probe->add_option("--bank-words", probe_bank, "local words per CU");
  probe->add_option("--canary", probe_canary, "canary word");
  probe->add_option("--seed", probe_seed, "scheduler seed");
  probe->add_flag("--json", probe_json, "emit JSON");

  // attack
  auto* attack =
      app.add_subcommand("attack", "full eavesdropping scenario from config");
  std::string attack_config, attack_out, attack_trace;
  attack->add_option("--config", attack_config, "scenario config JSON")
      ->required();
  attack->add_option("--out", attack_out, "report path (overrides config)");
  attack->add_option("--trace", attack_trace,
                     "dump trace path (overrides config)");

  // race
  auto* race =
      app.add_subcommand("race", "wipe-kernel race under policy wipe-after");
  double race_p = 0.5;
  std::uint32_t race_trials = 1000, race_cus = 4, race_bank = 64,
                race_canary = 123;
  std::uint64_t race_seed = 0;
  bool race_json = false;
  race->add_option("--p", race_p, "listener insertion probability");
  race->add_option("--trials", race_trials, "trial count");
  race->add_option("--cus", race_cus, "compute units");
  race->add_option("--bank-words", race_bank, "local words per CU");
  race->add_option("--canary", race_canary, "canary word");
  race->add_option("--seed", race_seed, "trial seed");
  race->add_flag("--json", race_json, "emit JSON");

  // zoo build
  auto* zoo = app.add_subcommand("zoo", "model zoo utilities");
  zoo->require_subcommand(1);
  auto* zoo_build = zoo->add_subcommand("build", "generate random toy models");
  std::uint32_t zoo_count = 5, zoo_vocab = 64, zoo_dim = 16, zoo_layers = 8;
  std::uint64_t zoo_seed = 0;
  std::string zoo_dir = "zoo", zoo_emit;
  zoo_build->add_option("--count", zoo_count, "models to generate");
  zoo_build->add_option("--dir", zoo_dir, "output directory");
  zoo_build->add_option("--vocab", zoo_vocab, "vocabulary size");
  zoo_build->add_option("--dim", zoo_dim, "hidden dimension");
  zoo_build->add_option("--layers", zoo_layers, "hidden layer count");
  zoo_build->add_option("--seed", zoo_seed, "generation seed");
  zoo_build->add_option("--emit-config", zoo_emit,
                        "also write a ready-to-run scenario config here");

  // report show
  auto* report = app.add_subcommand("report", "report utilities");
  report->require_subcommand(1);
  auto* report_show =
      report->add_subcommand("show", "pretty-print a scenario report");
  std::string report_path;
  report_show->add_option("--report", report_path, "report JSON path")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  if (*probe) {
    return run_probe(probe_policy, probe_cus, probe_bank, probe_canary,
                     probe_seed, probe_json);
  }
  if (*attack) return run_attack(attack_config, attack_out, attack_trace);
  if (*race) {
    return run_race(race_p, race_trials, race_cus, race_bank, race_canary,
                    race_seed, race_json);
  }
  if (*zoo_build) {
    return run_zoo_build(zoo_count, zoo_dir, zoo_vocab, zoo_dim, zoo_layers,
                         zoo_seed, zoo_emit);
  }
  if (*report_show) return run_report_show(report_path);
  return kExitUsage;
}
