// SPDX-License-Identifier: Apache-2.0
#include "lmleak/attack/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "lmleak/error.hpp"

namespace lmleak::attack {

using nlohmann::json;

CanaryReport probe_canary(gpu::GpuMachine& machine, std::uint32_t canary_word,
                          gpu::ProcessId writer_process,
                          gpu::ProcessId listener_process) {
  const std::uint32_t bank = machine.config().local_words_per_cu;
  const std::uint32_t cus = machine.config().num_compute_units;

  const gpu::BufferHandle canary_buf =
      machine.create_buffer(writer_process, bank);
  machine.write_buffer(writer_process, canary_buf, 0,
                       std::vector<std::uint32_t>(bank, canary_word));
  const gpu::BufferHandle dump =
      machine.create_buffer(listener_process, cus * bank);

  gpu::KernelDispatch writer;
  writer.kernel = {kernels::KernelKind::Writer, false};
  writer.num_workgroups = cus;
  writer.workgroup_size = 16;
  writer.local_alloc_words = bank;
  writer.bindings = {canary_buf};
  machine.submit(writer_process, writer);

  gpu::KernelDispatch listener;
  listener.kernel = {kernels::KernelKind::Listener, false};
  listener.num_workgroups = cus;
  listener.workgroup_size = 16;
  listener.local_alloc_words = bank;
  listener.bindings = {dump};
  const gpu::DispatchTicket ticket =
      machine.submit(listener_process, listener);
  machine.run_until(ticket);

  const std::vector<std::uint32_t> words =
      machine.read_buffer(listener_process, dump);
  CanaryReport report;
  report.total_words = words.size();
  for (std::uint32_t w : words) {
    if (w == canary_word) ++report.matching_words;
  }
  report.leak_fraction = report.total_words == 0
                             ? 0.0
                             : static_cast<double>(report.matching_words) /
                                   static_cast<double>(report.total_words);
  report.vulnerable = report.leak_fraction >= kVulnerableThreshold;
  return report;
}

DumpRecord steal_dump(gpu::GpuMachine& machine, gpu::ProcessId attacker,
                      gpu::BufferHandle dump) {
  const std::uint32_t bank = machine.config().local_words_per_cu;
  const std::uint32_t cus = machine.config().num_compute_units;
  if (machine.buffer_length(dump) < std::uint64_t{bank} * cus) {
    throw Error(ErrorCode::ValidationError,
                "dump buffer smaller than the machine's local memory");
  }

  gpu::KernelDispatch listener;
  listener.kernel = {kernels::KernelKind::Listener, false};
  listener.num_workgroups = cus;
  listener.workgroup_size = 16;
  listener.local_alloc_words = bank;
  listener.bindings = {dump};
  const gpu::DispatchTicket ticket = machine.submit(attacker, listener);
  machine.run_until(ticket);

  const std::vector<std::uint32_t> words = machine.read_buffer(attacker, dump);
  DumpRecord record;
  record.step = machine.schedule_log().back().step;
  record.cu_images.reserve(cus);
  for (std::uint32_t cu = 0; cu < cus; ++cu) {
    record.cu_images.emplace_back(words.begin() + std::size_t{cu} * bank,
                                  words.begin() + std::size_t{cu + 1} * bank);
  }
  return record;
}

void write_trace_jsonl(const DumpTrace& trace,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::FormatError, "cannot open " + path.string());
  }
  for (const DumpRecord& record : trace.records) {
    json line;
    line["step"] = record.step;
    line["cu_images"] = record.cu_images;
    out << line.dump() << '\n';
  }
  out.flush();
  if (!out) {
    throw Error(ErrorCode::FormatError, "short write to " + path.string());
  }
}

DumpTrace read_trace_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::FormatError, "cannot open " + path.string());
  }
  DumpTrace trace;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json parsed = json::parse(line, nullptr, false);
    if (parsed.is_discarded() || !parsed.contains("step") ||
        !parsed.contains("cu_images")) {
      throw Error(ErrorCode::FormatError,
                  path.string() + ":" + std::to_string(line_no) +
                      ": not a dump record");
    }
    DumpRecord record;
    record.step = parsed.at("step").get<std::uint64_t>();
    record.cu_images =
        parsed.at("cu_images").get<std::vector<std::vector<std::uint32_t>>>();
    trace.records.push_back(std::move(record));
  }
  return trace;
}

std::vector<std::vector<std::uint32_t>> extract_weight_fragments(
    const DumpTrace& trace, std::uint32_t fragment_len,
    std::uint32_t tile_edge) {
  std::vector<std::vector<std::uint32_t>> fragments;
  const std::uint32_t region = tile_edge * tile_edge;
  for (const DumpRecord& record : trace.records) {
    for (const auto& image : record.cu_images) {
      const std::uint32_t limit =
          static_cast<std::uint32_t>(std::min<std::size_t>(image.size(), region));
      for (std::uint32_t row = 0; row + tile_edge <= limit; row += tile_edge) {
        // Maximal nonzero runs within one tile row. Runs never span rows:
        // adjacent tile rows are not adjacent in the source matrix.
        std::uint32_t start = row;
        for (std::uint32_t i = row; i <= row + tile_edge; ++i) {
          const bool boundary = (i == row + tile_edge) || image[i] == 0u;
          if (boundary) {
            if (i - start >= fragment_len) {
              fragments.emplace_back(image.begin() + start, image.begin() + i);
            }
            start = i + 1;
          }
        }
      }
    }
  }
  return fragments;
}

FingerprintResult fingerprint_model(const DumpTrace& trace,
                                    std::span<const llm::ToyModel> zoo,
                                    std::uint32_t fragment_len,
                                    std::uint32_t tile_edge,
                                    std::uint64_t min_margin_words) {
  if (zoo.empty()) {
    throw Error(ErrorCode::ValidationError, "zoo cannot be empty");
  }
  if (fragment_len < 4) {
    throw Error(ErrorCode::ValidationError,
                "fragments shorter than 4 words are not discriminative");
  }
  if (tile_edge == 0) {
    throw Error(ErrorCode::ValidationError, "tile edge must be positive");
  }
  if (min_margin_words == 0) min_margin_words = fragment_len;

  const auto fragments =
      extract_weight_fragments(trace, fragment_len, tile_edge);
  if (fragments.empty()) {
    throw Error(ErrorCode::InsufficientData,
                "no candidate weight fragments in the trace");
  }

  // Hidden weights as word sequences, one per layer, per model.
  std::vector<std::vector<std::vector<std::uint32_t>>> corpora;
  corpora.reserve(zoo.size());
  for (const llm::ToyModel& model : zoo) {
    std::vector<std::vector<std::uint32_t>> matrices;
    matrices.reserve(model.hidden_weights.size());
    for (const auto& layer : model.hidden_weights) {
      std::vector<std::uint32_t> words(layer.size());
      for (std::size_t i = 0; i < layer.size(); ++i) {
        words[i] = std::bit_cast<std::uint32_t>(layer[i]);
      }
      matrices.push_back(std::move(words));
    }
    corpora.push_back(std::move(matrices));
  }

  FingerprintResult result;
  result.scores.reserve(zoo.size());
  for (const llm::ToyModel& model : zoo) {
    result.scores.emplace_back(model.model_id, 0ull);
  }
  for (const auto& fragment : fragments) {
    for (std::size_t m = 0; m < corpora.size(); ++m) {
      bool found = false;
      for (const auto& matrix : corpora[m]) {
        if (std::search(matrix.begin(), matrix.end(), fragment.begin(),
                        fragment.end()) != matrix.end()) {
          found = true;
          break;
        }
      }
      if (found) result.scores[m].second += fragment.size();
    }
  }

  std::size_t best = 0;
  for (std::size_t m = 1; m < result.scores.size(); ++m) {
    if (result.scores[m].second > result.scores[best].second) best = m;
  }
  std::uint64_t runner_up = 0;
  for (std::size_t m = 0; m < result.scores.size(); ++m) {
    if (m != best) runner_up = std::max(runner_up, result.scores[m].second);
  }
  result.best_index = best;
  result.best_model_id = result.scores[best].first;
  result.margin = result.scores.size() == 1
                      ? result.scores[best].second
                      : result.scores[best].second - runner_up;
  result.confident = result.margin >= min_margin_words;
  return result;
}

std::vector<std::vector<float>> detect_output_layer(const DumpRecord& record,
                                                    std::uint32_t dim,
                                                    std::uint32_t zero_run) {
  if (dim == 0 || zero_run == 0) {
    throw Error(ErrorCode::ValidationError,
                "dimension and zero run must be positive");
  }
  std::vector<std::vector<float>> candidates;
  for (const auto& image : record.cu_images) {
    if (image.size() < std::uint64_t{dim} + zero_run) continue;
    bool nonzero = false;
    bool all_finite = true;
    for (std::uint32_t i = 0; i < dim; ++i) {
      if (image[i] != 0u) nonzero = true;
      if (!std::isfinite(std::bit_cast<float>(image[i]))) {
        all_finite = false;
        break;
      }
    }
    if (!nonzero || !all_finite) continue;
    bool clean_tail = true;
    for (std::uint32_t i = dim; i < dim + zero_run; ++i) {
      if (image[i] != 0u) {
        clean_tail = false;
        break;
      }
    }
    if (!clean_tail) continue;

    std::vector<float> candidate(dim);
    for (std::uint32_t i = 0; i < dim; ++i) {
      candidate[i] = std::bit_cast<float>(image[i]);
    }
    if (std::find_if(candidates.begin(), candidates.end(),
                     [&](const std::vector<float>& existing) {
                       return std::equal(
                           existing.begin(), existing.end(), candidate.begin(),
                           candidate.end(), [](float a, float b) {
                             return std::bit_cast<std::uint32_t>(a) ==
                                    std::bit_cast<std::uint32_t>(b);
                           });
                     }) == candidates.end()) {
      candidates.push_back(std::move(candidate));
    }
  }
  return candidates;
}

std::uint32_t replay_output_layer(const llm::ToyModel& model,
                                  std::span<const float> v) {
  if (v.size() != model.hidden_dim) {
    throw Error(ErrorCode::ShapeError,
                "vector has " + std::to_string(v.size()) + " entries, model " +
                    "expects " + std::to_string(model.hidden_dim));
  }
  const std::uint32_t d = model.hidden_dim;
  std::uint32_t best = 0;
  float best_value = -std::numeric_limits<float>::infinity();
  for (std::uint32_t r = 0; r < model.vocab_size(); ++r) {
    float sum = 0.0f;
    for (std::uint32_t k = 0; k < d; ++k) {
      sum += model.output_weights[std::size_t{r} * d + k] * v[k];
    }
    if (sum > best_value) {
      best_value = sum;
      best = r;
    }
  }
  return best;
}

const char* token_tag_name(TokenTag tag) {
  switch (tag) {
    case TokenTag::Exact: return "exact";
    case TokenTag::Duplicate: return "duplicate";
    case TokenTag::Missing: return "missing";
    case TokenTag::Similar: return "similar";
    case TokenTag::Incorrect: return "incorrect";
  }
  return "unknown";
}

namespace {

double embedding_cosine(const llm::ToyModel& model, std::uint32_t a,
                        std::uint32_t b) {
  const std::uint32_t d = model.hidden_dim;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::uint32_t i = 0; i < d; ++i) {
    const double x = model.embed[std::size_t{a} * d + i];
    const double y = model.embed[std::size_t{b} * d + i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

ReconstructionReport classify_and_score(std::span<const std::uint32_t> recovered,
                                        std::span<const std::uint32_t> victim,
                                        const llm::ToyModel& model,
                                        double similarity_threshold) {
  for (std::uint32_t id : recovered) {
    if (id >= model.vocab_size()) {
      throw Error(ErrorCode::ValidationError, "recovered token outside vocabulary");
    }
  }
  for (std::uint32_t id : victim) {
    if (id >= model.vocab_size()) {
      throw Error(ErrorCode::ValidationError, "victim token outside vocabulary");
    }
  }

  const std::size_t nr = recovered.size();
  const std::size_t nv = victim.size();

  // dist[i][j] = edit distance between recovered[i..] and victim[j..].
  std::vector<std::vector<std::uint32_t>> dist(
      nr + 1, std::vector<std::uint32_t>(nv + 1, 0));
  for (std::size_t j = 0; j <= nv; ++j) {
    dist[nr][j] = static_cast<std::uint32_t>(nv - j);
  }
  for (std::size_t i = 0; i <= nr; ++i) {
    dist[i][nv] = static_cast<std::uint32_t>(nr - i);
  }
  for (std::size_t i = nr; i-- > 0;) {
    for (std::size_t j = nv; j-- > 0;) {
      const std::uint32_t diag = dist[i + 1][j + 1];
      std::uint32_t best = (recovered[i] == victim[j]) ? diag : diag + 1;
      best = std::min(best, dist[i + 1][j] + 1);  // insert recovered[i]
      best = std::min(best, dist[i][j + 1] + 1);  // drop victim[j]
      dist[i][j] = best;
    }
  }

  ReconstructionReport report;
  report.recovered.assign(recovered.begin(), recovered.end());

  // Walk one optimal path front to back. Preference on ties: match, then
  // substitute, then insert, then delete. Taking matches as early as possible
  // keeps a repeated token aligned to its first occurrence, so the repeat
  // shows up as the inserted (Duplicate) one.
  std::size_t i = 0, j = 0;
  while (i < nr || j < nv) {
    if (i < nr && j < nv && recovered[i] == victim[j] &&
        dist[i][j] == dist[i + 1][j + 1]) {
      report.alignment.push_back({TokenTag::Exact,
                                  static_cast<std::uint32_t>(j),
                                  static_cast<std::uint32_t>(i)});
      ++report.exact;
      ++i;
      ++j;
      continue;
    }
    if (i < nr && j < nv && recovered[i] != victim[j] &&
        dist[i][j] == dist[i + 1][j + 1] + 1) {
      const bool similar = embedding_cosine(model, recovered[i], victim[j]) >=
                           similarity_threshold;
      report.alignment.push_back({similar ? TokenTag::Similar
                                          : TokenTag::Incorrect,
                                  static_cast<std::uint32_t>(j),
                                  static_cast<std::uint32_t>(i)});
      similar ? ++report.similar : ++report.incorrect;
      ++i;
      ++j;
      continue;
    }
    if (i < nr && dist[i][j] == dist[i + 1][j] + 1) {
      // Extra recovered token. A repeat of the victim token just consumed is
      // the double-steal signature; anything else is junk.
      const bool duplicate = j > 0 && recovered[i] == victim[j - 1];
      report.alignment.push_back({duplicate ? TokenTag::Duplicate
                                            : TokenTag::Incorrect,
                                  std::nullopt,
                                  static_cast<std::uint32_t>(i)});
      duplicate ? ++report.duplicate : ++report.incorrect;
      ++i;
      continue;
    }
    report.alignment.push_back(
        {TokenTag::Missing, static_cast<std::uint32_t>(j), std::nullopt});
    ++report.missing;
    ++j;
  }

  report.fidelity = nv == 0 ? 0.0
                            : static_cast<double>(report.exact) /
                                  static_cast<double>(nv);
  return report;
}

}  // namespace lmleak::attack
