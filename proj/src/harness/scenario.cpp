// SPDX-License-Identifier: Apache-2.0
#include "lmleak/harness/scenario.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "lmleak/error.hpp"
#include "lmleak/hash.hpp"
#include "lmleak/llm/victim.hpp"
#include "lmleak/rng.hpp"

namespace lmleak::harness {

using nlohmann::json;

const char* interleave_kind_name(InterleaveKind kind) {
  switch (kind) {
    case InterleaveKind::AfterEveryKernel: return "after-every-kernel";
    case InterleaveKind::AfterOutputLayerOnly: return "after-output-layer";
    case InterleaveKind::Probabilistic: return "probabilistic";
    case InterleaveKind::Periodic: return "periodic";
    case InterleaveKind::None: return "none";
  }
  return "unknown";
}

namespace {

InterleaveKind interleave_kind_from_name(const std::string& name) {
  for (InterleaveKind kind :
       {InterleaveKind::AfterEveryKernel, InterleaveKind::AfterOutputLayerOnly,
        InterleaveKind::Probabilistic, InterleaveKind::Periodic,
        InterleaveKind::None}) {
    if (name == interleave_kind_name(kind)) return kind;
  }
  throw Error(ErrorCode::ValidationError, "unknown interleave '" + name + "'");
}

gpu::ResiduePolicy policy_from_name(const std::string& name) {
  for (gpu::ResiduePolicy policy :
       {gpu::ResiduePolicy::Persist, gpu::ResiduePolicy::ZeroOnAllocate,
        gpu::ResiduePolicy::WipeKernelAfter, gpu::ResiduePolicy::AtomicWipe}) {
    if (name == gpu::residue_policy_name(policy)) return policy;
  }
  throw Error(ErrorCode::ValidationError, "unknown policy '" + name + "'");
}

void reject_unknown_keys(const json& j, const char* where,
                         std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* key) {
          return item.key() == key;
        }) == allowed.end()) {
      throw Error(ErrorCode::ValidationError,
                  std::string("unknown key '") + item.key() + "' in " + where);
    }
  }
}

}  // namespace

ScenarioConfig scenario_config_from_json(const json& j) {
  reject_unknown_keys(j, "config",
                      {"gpu", "policy", "victim", "attacker", "zoo", "seed",
                       "report", "trace"});
  ScenarioConfig config;

  if (j.contains("gpu")) {
    const json& g = j.at("gpu");
    reject_unknown_keys(g, "gpu",
                        {"compute_units", "local_words_per_cu", "global_words",
                         "scheduler_seed"});
    config.gpu.num_compute_units = g.value("compute_units", 4u);
    config.gpu.local_words_per_cu = g.value("local_words_per_cu", 64u);
    config.gpu.global_words = g.value("global_words", 1u << 16);
    config.gpu.scheduler_seed = g.value("scheduler_seed", std::uint64_t{0});
  }
  config.gpu.residue_policy =
      policy_from_name(j.value("policy", std::string("persist")));

  if (!j.contains("victim")) {
    throw Error(ErrorCode::ValidationError, "config needs a victim section");
  }
  const json& v = j.at("victim");
  reject_unknown_keys(v, "victim",
                      {"model", "prompt", "n_tokens", "tile", "self_zeroing"});
  config.victim.model_path = v.value("model", std::string{});
  config.victim.prompt = v.value("prompt", std::vector<std::uint32_t>{});
  config.victim.n_tokens = v.value("n_tokens", 16u);
  config.victim.tile = v.value("tile", 4u);
  config.victim.self_zeroing = v.value("self_zeroing", false);

  if (j.contains("attacker")) {
    const json& a = j.at("attacker");
    reject_unknown_keys(
        a, "attacker",
        {"interleave", "p", "period", "fingerprint_tokens", "fragment_len",
         "zero_run", "similarity_threshold", "min_margin_words", "canary",
         "probe", "double_steal_token", "perturb"});
    config.attacker.interleave.kind = interleave_kind_from_name(
        a.value("interleave", std::string("after-output-layer")));
    config.attacker.interleave.p = a.value("p", 1.0);
    config.attacker.interleave.period = a.value("period", 1u);
    if (a.contains("fingerprint_tokens") &&
        !a.at("fingerprint_tokens").is_null()) {
      config.attacker.fingerprint_tokens =
          a.at("fingerprint_tokens").get<std::uint32_t>();
    }
    config.attacker.fragment_len = a.value("fragment_len", 4u);
    config.attacker.zero_run = a.value("zero_run", 4u);
    config.attacker.similarity_threshold =
        a.value("similarity_threshold", 0.5);
    config.attacker.min_margin_words =
        a.value("min_margin_words", std::uint64_t{0});
    config.attacker.canary = a.value("canary", attack::kDefaultCanary);
    config.attacker.probe = a.value("probe", true);
    if (a.contains("double_steal_token") &&
        !a.at("double_steal_token").is_null()) {
      config.attacker.double_steal_token =
          a.at("double_steal_token").get<std::uint32_t>();
    }
    if (a.contains("perturb") && !a.at("perturb").is_null()) {
      const json& perturb = a.at("perturb");
      reject_unknown_keys(perturb, "perturb", {"candidate", "word", "delta"});
      config.attacker.perturb =
          PerturbSpec{perturb.value("candidate", 0u), perturb.value("word", 0u),
                      perturb.value("delta", 0.0f)};
    }
  }

  config.zoo_paths = j.value("zoo", std::vector<std::string>{});
  config.seed = j.value("seed", std::uint64_t{0});
  config.report_path = j.value("report", std::string{});
  config.trace_path = j.value("trace", std::string{});
  validate_config(config);
  return config;
}

json scenario_config_to_json(const ScenarioConfig& config) {
  json j;
  j["gpu"] = {{"compute_units", config.gpu.num_compute_units},
              {"local_words_per_cu", config.gpu.local_words_per_cu},
              {"global_words", config.gpu.global_words},
              {"scheduler_seed", config.gpu.scheduler_seed}};
  j["policy"] = gpu::residue_policy_name(config.gpu.residue_policy);
  j["victim"] = {{"model", config.victim.model_path},
                 {"prompt", config.victim.prompt},
                 {"n_tokens", config.victim.n_tokens},
                 {"tile", config.victim.tile},
                 {"self_zeroing", config.victim.self_zeroing}};
  json attacker = {
      {"interleave", interleave_kind_name(config.attacker.interleave.kind)},
      {"p", config.attacker.interleave.p},
      {"period", config.attacker.interleave.period},
      {"fragment_len", config.attacker.fragment_len},
      {"zero_run", config.attacker.zero_run},
      {"similarity_threshold", config.attacker.similarity_threshold},
      {"min_margin_words", config.attacker.min_margin_words},
      {"canary", config.attacker.canary},
      {"probe", config.attacker.probe}};
  if (config.attacker.fingerprint_tokens) {
    attacker["fingerprint_tokens"] = *config.attacker.fingerprint_tokens;
  }
  if (config.attacker.double_steal_token) {
    attacker["double_steal_token"] = *config.attacker.double_steal_token;
  }
  if (config.attacker.perturb) {
    attacker["perturb"] = {{"candidate", config.attacker.perturb->candidate},
                           {"word", config.attacker.perturb->word},
                           {"delta", config.attacker.perturb->delta}};
  }
  j["attacker"] = std::move(attacker);
  j["zoo"] = config.zoo_paths;
  j["seed"] = config.seed;
  if (!config.report_path.empty()) j["report"] = config.report_path;
  if (!config.trace_path.empty()) j["trace"] = config.trace_path;
  return j;
}

ScenarioConfig load_scenario_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::FormatError, "cannot open " + path.string());
  }
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) {
    throw Error(ErrorCode::FormatError, path.string() + " is not valid JSON");
  }
  return scenario_config_from_json(j);
}

void validate_config(const ScenarioConfig& config) {
  if (config.gpu.num_compute_units == 0 || config.gpu.local_words_per_cu == 0 ||
      config.gpu.global_words == 0) {
    throw Error(ErrorCode::ValidationError, "machine extents must be positive");
  }
  if (config.victim.model_path.empty()) {
    throw Error(ErrorCode::ValidationError, "victim model path is required");
  }
  if (config.victim.prompt.empty()) {
    throw Error(ErrorCode::ValidationError, "victim prompt cannot be empty");
  }
  if (config.victim.n_tokens == 0) {
    throw Error(ErrorCode::ValidationError, "victim must generate tokens");
  }
  if (config.victim.tile == 0) {
    throw Error(ErrorCode::ValidationError, "tile width must be positive");
  }
  if (config.zoo_paths.empty()) {
    throw Error(ErrorCode::ValidationError, "zoo cannot be empty");
  }
  const InterleavePolicy& pol = config.attacker.interleave;
  if (pol.p < 0.0 || pol.p > 1.0) {
    throw Error(ErrorCode::ValidationError, "p must lie in [0, 1]");
  }
  if (pol.kind == InterleaveKind::Periodic && pol.period == 0) {
    throw Error(ErrorCode::ValidationError, "period must be positive");
  }
  if (config.attacker.fragment_len < 4) {
    throw Error(ErrorCode::ValidationError, "fragment_len must be at least 4");
  }
  if (config.attacker.zero_run == 0) {
    throw Error(ErrorCode::ValidationError, "zero_run must be positive");
  }
  const double tau = config.attacker.similarity_threshold;
  if (tau <= 0.0 || tau >= 1.0) {
    throw Error(ErrorCode::ValidationError,
                "similarity_threshold must lie in (0, 1)");
  }
}

namespace {

struct LoadedModels {
  llm::ToyModel victim;
  std::vector<llm::ToyModel> zoo;
};

LoadedModels load_models(const ScenarioConfig& config) {
  namespace fs = std::filesystem;
  if (!fs::exists(config.victim.model_path)) {
    throw Error(ErrorCode::ValidationError,
                "victim model not found: " + config.victim.model_path);
  }
  LoadedModels models;
  models.victim = llm::load_model(config.victim.model_path);
  for (const std::string& path : config.zoo_paths) {
    if (!fs::exists(path)) {
      throw Error(ErrorCode::ValidationError, "zoo model not found: " + path);
    }
    models.zoo.push_back(llm::load_model(path));
  }
  return models;
}

ScheduleStats schedule_stats(const gpu::GpuMachine& machine,
                             std::size_t eavesdrop_from_entry) {
  ScheduleStats stats;
  const auto& log = machine.schedule_log();
  stats.entries = log.size();
  stats.digest = hex_digest(machine.schedule_digest());
  for (std::size_t i = eavesdrop_from_entry; i < log.size(); ++i) {
    if (log[i].process != kVictimProcess ||
        log[i].kernel.kind != kernels::KernelKind::MatVecLocal) {
      continue;
    }
    ++stats.output_layer_dispatches;
    if (i + 1 < log.size() && log[i + 1].process == kAttackerProcess &&
        log[i + 1].kernel.kind == kernels::KernelKind::Listener) {
      ++stats.output_layer_steals;
    }
  }
  return stats;
}

}  // namespace

ScenarioReport run_scenario(const ScenarioConfig& config) {
  validate_config(config);
  LoadedModels models = load_models(config);

  gpu::GpuMachine machine(config.gpu);
  ScenarioReport report;
  report.victim_model_id = models.victim.model_id;
  report.vocab = models.victim.vocab;

  if (config.attacker.probe) {
    report.probe = attack::probe_canary(machine, config.attacker.canary,
                                        kProbeWriterProcess,
                                        kAttackerProcess);
  }

  llm::VictimOptions victim_options;
  victim_options.process = kVictimProcess;
  victim_options.tile = config.victim.tile;
  victim_options.self_zeroing = config.victim.self_zeroing;
  victim_options.seed = config.seed;
  llm::VictimSession session(machine, models.victim, config.victim.prompt,
                             victim_options);

  const std::uint32_t bank = config.gpu.local_words_per_cu;
  const gpu::BufferHandle dump = machine.create_buffer(
      kAttackerProcess, config.gpu.num_compute_units * bank);

  // Phase 1: fingerprint. The attacker dumps after every kernel while the
  // victim generates warmup tokens; these tokens are not part of the scored
  // transcript.
  const std::uint32_t fingerprint_tokens =
      config.attacker.fingerprint_tokens.value_or(models.victim.layer_count());
  for (std::uint32_t t = 0; t < fingerprint_tokens; ++t) {
    session.generate_step([&](llm::VictimDispatchKind, std::uint32_t) {
      report.fingerprint_trace.records.push_back(
          attack::steal_dump(machine, kAttackerProcess, dump));
    });
  }
  try {
    report.fingerprint = attack::fingerprint_model(
        report.fingerprint_trace, models.zoo, config.attacker.fragment_len,
        config.victim.tile, config.attacker.min_margin_words);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InsufficientData) throw;
    report.fingerprint_insufficient = true;
  }

  // Phase 2: eavesdrop per the interleave policy.
  const std::size_t eavesdrop_from_entry = machine.schedule_log().size();
  Rng rng(config.seed);
  const InterleavePolicy& policy = config.attacker.interleave;
  std::uint64_t boundary_counter = 0;
  for (std::uint32_t t = 0; t < config.victim.n_tokens; ++t) {
    const std::uint32_t token = session.generate_step(
        [&](llm::VictimDispatchKind kind, std::uint32_t) {
          ++boundary_counter;
          // The probabilistic draw happens at every boundary so that runs
          // with different p but the same seed share one coin sequence.
          const bool coin = rng.next_bool(policy.p);
          bool steal = false;
          switch (policy.kind) {
            case InterleaveKind::AfterEveryKernel: steal = true; break;
            case InterleaveKind::AfterOutputLayerOnly:
              steal = kind == llm::VictimDispatchKind::OutputLayer;
              break;
            case InterleaveKind::Probabilistic: steal = coin; break;
            case InterleaveKind::Periodic:
              steal = boundary_counter % policy.period == 0;
              break;
            case InterleaveKind::None: steal = false; break;
          }
          std::uint32_t times = steal ? 1 : 0;
          if (config.attacker.double_steal_token &&
              *config.attacker.double_steal_token == t &&
              kind == llm::VictimDispatchKind::OutputLayer) {
            times = 2;
          }
          for (std::uint32_t n = 0; n < times; ++n) {
            report.eavesdrop_trace.records.push_back(
                attack::steal_dump(machine, kAttackerProcess, dump));
          }
        });
    report.victim_tokens.push_back(token);
  }

  // Detect, replay, classify. Replaying needs a model; the attacker only has
  // one if fingerprinting was confident.
  const llm::ToyModel* replay_model = nullptr;
  if (report.fingerprint && report.fingerprint->confident) {
    replay_model = &models.zoo[report.fingerprint->best_index];
    report.replay_model_id = replay_model->model_id;
  }
  std::vector<std::uint32_t> recovered;
  std::uint32_t candidate_counter = 0;
  for (const attack::DumpRecord& record : report.eavesdrop_trace.records) {
    for (std::vector<float>& candidate : attack::detect_output_layer(
             record, models.victim.hidden_dim, config.attacker.zero_run)) {
      const std::uint32_t index = candidate_counter++;
      if (replay_model == nullptr) continue;
      if (config.attacker.perturb &&
          config.attacker.perturb->candidate == index &&
          config.attacker.perturb->word < candidate.size()) {
        candidate[config.attacker.perturb->word] +=
            config.attacker.perturb->delta;
      }
      recovered.push_back(attack::replay_output_layer(*replay_model, candidate));
    }
  }
  const llm::ToyModel& scoring_model =
      replay_model ? *replay_model : models.victim;
  report.reconstruction =
      attack::classify_and_score(recovered, report.victim_tokens, scoring_model,
                                 config.attacker.similarity_threshold);

  report.schedule = schedule_stats(machine, eavesdrop_from_entry);

  if (!config.trace_path.empty()) {
    attack::DumpTrace combined = report.fingerprint_trace;
    combined.records.insert(combined.records.end(),
                            report.eavesdrop_trace.records.begin(),
                            report.eavesdrop_trace.records.end());
    attack::write_trace_jsonl(combined, config.trace_path);
  }
  if (!config.report_path.empty()) {
    std::ofstream out(config.report_path, std::ios::trunc);
    if (!out) {
      throw Error(ErrorCode::FormatError,
                  "cannot open " + config.report_path);
    }
    out << report_to_json(config, report).dump(2) << '\n';
  }
  return report;
}

json report_to_json(const ScenarioConfig& config,
                    const ScenarioReport& report) {
  json j;
  j["schema"] = "lmleak-report-v1";
  j["config"] = scenario_config_to_json(config);
  j["victim_model_id"] = report.victim_model_id;

  if (report.probe) {
    j["probe"] = {{"total_words", report.probe->total_words},
                  {"matching_words", report.probe->matching_words},
                  {"leak_fraction", report.probe->leak_fraction},
                  {"vulnerable", report.probe->vulnerable}};
  } else {
    j["probe"] = nullptr;
  }

  if (report.fingerprint) {
    json scores = json::object();
    for (const auto& [id, score] : report.fingerprint->scores) {
      scores[id] = score;
    }
    j["fingerprint"] = {{"best_model_id", report.fingerprint->best_model_id},
                        {"scores", std::move(scores)},
                        {"margin", report.fingerprint->margin},
                        {"confident", report.fingerprint->confident}};
  } else {
    j["fingerprint"] = nullptr;
  }
  j["fingerprint_insufficient"] = report.fingerprint_insufficient;
  j["replay_model_id"] = report.replay_model_id;

  auto token_text = [&](std::uint32_t id) {
    return id < report.vocab.size() ? report.vocab[id]
                                    : "#" + std::to_string(id);
  };
  json victim_text = json::array();
  for (std::uint32_t id : report.victim_tokens) victim_text.push_back(token_text(id));
  j["victim_transcript"] = {{"ids", report.victim_tokens},
                            {"text", std::move(victim_text)}};

  json recovered = json::array();
  for (const attack::AlignmentEvent& event : report.reconstruction.alignment) {
    if (!event.recovered_index) continue;
    const std::uint32_t id =
        report.reconstruction.recovered[*event.recovered_index];
    recovered.push_back({{"id", id},
                         {"text", token_text(id)},
                         {"tag", attack::token_tag_name(event.tag)}});
  }
  j["recovered"] = std::move(recovered);

  json alignment = json::array();
  for (const attack::AlignmentEvent& event : report.reconstruction.alignment) {
    json e;
    e["tag"] = attack::token_tag_name(event.tag);
    e["victim_index"] =
        event.victim_index ? json(*event.victim_index) : json(nullptr);
    e["recovered_index"] =
        event.recovered_index ? json(*event.recovered_index) : json(nullptr);
    alignment.push_back(std::move(e));
  }
  j["alignment"] = std::move(alignment);

  j["reconstruction"] = {{"fidelity", report.reconstruction.fidelity},
                         {"exact", report.reconstruction.exact},
                         {"duplicate", report.reconstruction.duplicate},
                         {"missing", report.reconstruction.missing},
                         {"similar", report.reconstruction.similar},
                         {"incorrect", report.reconstruction.incorrect}};

  j["schedule"] = {
      {"entries", report.schedule.entries},
      {"digest", report.schedule.digest},
      {"output_layer_dispatches", report.schedule.output_layer_dispatches},
      {"output_layer_steals", report.schedule.output_layer_steals}};
  return j;
}

RaceReport run_wipe_race(const ScenarioConfig& config, std::uint32_t trials) {
  if (config.gpu.residue_policy != gpu::ResiduePolicy::WipeKernelAfter) {
    throw Error(ErrorCode::ValidationError,
                "the wipe race needs policy wipe-after");
  }
  if (trials == 0) {
    throw Error(ErrorCode::ValidationError, "need at least one trial");
  }
  const double p = config.attacker.interleave.p;
  if (p < 0.0 || p > 1.0) {
    throw Error(ErrorCode::ValidationError, "p must lie in [0, 1]");
  }

  Rng rng(config.seed);
  RaceReport report;
  report.trials = trials;
  report.p = p;
  for (std::uint32_t trial = 0; trial < trials; ++trial) {
    gpu::GpuMachine machine(config.gpu);
    const std::uint32_t bank = config.gpu.local_words_per_cu;
    const std::uint32_t cus = config.gpu.num_compute_units;

    const gpu::BufferHandle canary_buf =
        machine.create_buffer(kVictimProcess, bank);
    machine.write_buffer(
        kVictimProcess, canary_buf, 0,
        std::vector<std::uint32_t>(bank, config.attacker.canary));
    const gpu::BufferHandle dump =
        machine.create_buffer(kAttackerProcess, cus * bank);

    gpu::KernelDispatch writer;
    writer.kernel = {kernels::KernelKind::Writer, false};
    writer.num_workgroups = cus;
    writer.workgroup_size = 16;
    writer.local_alloc_words = bank;
    writer.bindings = {canary_buf};
    machine.submit(kVictimProcess, writer);

    gpu::KernelDispatch listener;
    listener.kernel = {kernels::KernelKind::Listener, false};
    listener.num_workgroups = cus;
    listener.workgroup_size = 16;
    listener.local_alloc_words = bank;
    listener.bindings = {dump};

    // The coin decides whether the listener is queued before the writer
    // executes (and therefore before the wipe the writer's completion
    // enqueues) or only afterwards.
    const bool wins_race = rng.next_bool(p);
    if (wins_race) {
      machine.submit(kAttackerProcess, listener);
      machine.run_all();
    } else {
      machine.run_all();
      machine.submit(kAttackerProcess, listener);
      machine.run_all();
    }

    const std::vector<std::uint32_t> words =
        machine.read_buffer(kAttackerProcess, dump);
    if (std::find(words.begin(), words.end(), config.attacker.canary) !=
        words.end()) {
      ++report.leaks;
    }
  }
  report.leak_rate = static_cast<double>(report.leaks) / trials;
  return report;
}

json race_report_to_json(const ScenarioConfig& config, std::uint32_t trials,
                         const RaceReport& report) {
  json j;
  j["schema"] = "lmleak-race-v1";
  j["policy"] = gpu::residue_policy_name(config.gpu.residue_policy);
  j["gpu"] = {{"compute_units", config.gpu.num_compute_units},
              {"local_words_per_cu", config.gpu.local_words_per_cu}};
  j["seed"] = config.seed;
  j["trials"] = trials;
  j["p"] = report.p;
  j["leaks"] = report.leaks;
  j["leak_rate"] = report.leak_rate;
  return j;
}

}  // namespace lmleak::harness
