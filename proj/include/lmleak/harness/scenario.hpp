// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "lmleak/attack/pipeline.hpp"
#include "lmleak/gpu/machine.hpp"

namespace lmleak::harness {

// Fixed process ids used by scenario runs; they appear in schedule logs.
inline constexpr gpu::ProcessId kVictimProcess = 1;
inline constexpr gpu::ProcessId kAttackerProcess = 2;
inline constexpr gpu::ProcessId kProbeWriterProcess = 3;

// When the attacker's listener runs relative to the victim's dispatches
// during the eavesdropping phase. Decisions are taken at kernel boundaries:
//   AfterEveryKernel     - steal after every victim dispatch
//   AfterOutputLayerOnly - steal only right after the output projection
//   Probabilistic        - steal after each dispatch with probability p
//   Periodic             - steal after every period-th dispatch
//   None                 - never steal
enum class InterleaveKind {
  AfterEveryKernel,
  AfterOutputLayerOnly,
  Probabilistic,
  Periodic,
  None,
};

struct InterleavePolicy {
  InterleaveKind kind = InterleaveKind::AfterOutputLayerOnly;
  double p = 1.0;
  std::uint32_t period = 1;
};

const char* interleave_kind_name(InterleaveKind kind);

// Fault injection: add `delta` to word `word` of stolen vector number
// `candidate` (counting recovered candidates across the eavesdropping phase)
// before it is replayed.
struct PerturbSpec {
  std::uint32_t candidate = 0;
  std::uint32_t word = 0;
  float delta = 0.0f;
};

struct VictimConfig {
  std::string model_path;
  std::vector<std::uint32_t> prompt;
  std::uint32_t n_tokens = 16;
  std::uint32_t tile = 4;
  bool self_zeroing = false;
};

struct AttackerConfig {
  InterleavePolicy interleave;
  // Tokens the victim generates during the fingerprinting phase, which dumps
  // after every kernel. Unset: the victim model's layer count. 0: skip the
  // phase entirely.
  std::optional<std::uint32_t> fingerprint_tokens;
  std::uint32_t fragment_len = 4;
  std::uint32_t zero_run = 4;
  double similarity_threshold = 0.5;
  std::uint64_t min_margin_words = 0;  // 0 -> fragment_len
  std::uint32_t canary = attack::kDefaultCanary;
  bool probe = true;
  // Steal twice at this victim token's output-layer boundary (eavesdropping
  // phase ordinal) instead of following the interleave policy there.
  std::optional<std::uint32_t> double_steal_token;
  std::optional<PerturbSpec> perturb;
};

struct ScenarioConfig {
  gpu::GpuConfig gpu;  // residue policy included
  VictimConfig victim;
  AttackerConfig attacker;
  std::vector<std::string> zoo_paths;
  std::uint64_t seed = 0;
  std::string report_path;  // empty: do not write
  std::string trace_path;   // empty: do not write
};

ScenarioConfig scenario_config_from_json(const nlohmann::json& j);
nlohmann::json scenario_config_to_json(const ScenarioConfig& config);
ScenarioConfig load_scenario_config(const std::filesystem::path& path);

// Shape checks only; file existence is checked by run_scenario.
void validate_config(const ScenarioConfig& config);

struct ScheduleStats {
  std::uint64_t entries = 0;
  std::string digest;
  // Eavesdropping phase only, derived from the schedule log: output-layer
  // dispatches, and how many were immediately followed by an attacker
  // listener (nothing in between, not even a wipe).
  std::uint64_t output_layer_dispatches = 0;
  std::uint64_t output_layer_steals = 0;
};

struct ScenarioReport {
  std::string victim_model_id;
  std::optional<attack::CanaryReport> probe;
  std::optional<attack::FingerprintResult> fingerprint;
  bool fingerprint_insufficient = false;
  std::string replay_model_id;  // empty when no confident fingerprint
  std::vector<std::uint32_t> victim_tokens;  // eavesdropping phase only
  attack::ReconstructionReport reconstruction;
  ScheduleStats schedule;
  // In-memory traces for callers that inspect them; serialized only when
  // the config names a trace path.
  attack::DumpTrace fingerprint_trace;
  attack::DumpTrace eavesdrop_trace;
  std::vector<std::string> vocab;  // for rendering transcripts
};

nlohmann::json report_to_json(const ScenarioConfig& config,
                              const ScenarioReport& report);

// Full deterministic run: optional canary probe, fingerprinting phase
// (listener after every kernel), eavesdropping phase (listener per the
// interleave policy), then detect / replay / classify against the phase-two
// transcript. Writes report/trace files when the config names them.
ScenarioReport run_scenario(const ScenarioConfig& config);

struct RaceReport {
  std::uint32_t trials = 0;
  double p = 0.0;
  std::uint64_t leaks = 0;
  double leak_rate = 0.0;
};

// Deferred-wipe race: per trial the victim writer runs and its wipe is
// enqueued at completion; with probability p the attacker's listener is
// already queued and lands between them. Requires policy WipeKernelAfter.
// p is taken from config.attacker.interleave.p.
RaceReport run_wipe_race(const ScenarioConfig& config, std::uint32_t trials);

nlohmann::json race_report_to_json(const ScenarioConfig& config,
                                   std::uint32_t trials,
                                   const RaceReport& report);

}  // namespace lmleak::harness
