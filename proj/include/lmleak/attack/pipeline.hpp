// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lmleak/gpu/machine.hpp"
#include "lmleak/llm/model.hpp"

namespace lmleak::attack {

// --- canary probe -----------------------------------------------------------

struct CanaryReport {
  std::uint64_t total_words = 0;
  std::uint64_t matching_words = 0;
  double leak_fraction = 0.0;
  bool vulnerable = false;  // leak_fraction >= kVulnerableThreshold
};

inline constexpr double kVulnerableThreshold = 0.99;
inline constexpr std::uint32_t kDefaultCanary = 123;

// Fills every local bank from one process, dumps every bank from another, and
// counts how many of the dumped words still carry the canary. Both dispatches
// are queued before the machine runs, so a deferred-wipe policy races them
// exactly like co-resident clients would.
CanaryReport probe_canary(gpu::GpuMachine& machine,
                          std::uint32_t canary_word = kDefaultCanary,
                          gpu::ProcessId writer_process = 900,
                          gpu::ProcessId listener_process = 901);

// --- stolen dumps -----------------------------------------------------------

struct DumpRecord {
  std::uint64_t step = 0;  // schedule-log step of the listener dispatch
  std::vector<std::vector<std::uint32_t>> cu_images;  // one image per CU
};

struct DumpTrace {
  std::vector<DumpRecord> records;
};

// Runs one full-machine listener dispatch (every compute unit, whole bank)
// and returns the captured images. `dump` must be owned by `attacker` and
// hold at least num_compute_units * local_words_per_cu words.
DumpRecord steal_dump(gpu::GpuMachine& machine, gpu::ProcessId attacker,
                      gpu::BufferHandle dump);

// One JSON object per line: {"step": N, "cu_images": [[...], ...]}.
void write_trace_jsonl(const DumpTrace& trace,
                       const std::filesystem::path& path);
DumpTrace read_trace_jsonl(const std::filesystem::path& path);

// --- model fingerprinting ---------------------------------------------------

struct FingerprintResult {
  std::string best_model_id;
  std::size_t best_index = 0;
  // One entry per zoo model, in zoo order: total words of matched fragments.
  std::vector<std::pair<std::string, std::uint64_t>> scores;
  std::uint64_t margin = 0;  // best score minus runner-up (score itself if
                             // the zoo has a single model)
  bool confident = false;    // margin >= min_margin_words
};

// Candidate weight fragments from the stolen images: the first tile_edge^2
// words of each image are where the matmul kernel stages its operand-A tile,
// row-major in rows of tile_edge words. Each tile row holds consecutive
// elements of one weight-matrix row, so rows are scanned independently for
// maximal nonzero runs of at least fragment_len words.
std::vector<std::vector<std::uint32_t>> extract_weight_fragments(
    const DumpTrace& trace, std::uint32_t fragment_len,
    std::uint32_t tile_edge);

// Scores every zoo model by the words of extracted fragments that occur
// bitwise as contiguous row-major subsequences of any of its hidden-weight
// matrices. min_margin_words == 0 means "one minimal fragment", i.e.
// fragment_len. Throws InsufficientData when the trace yields no fragments
// (empty trace, or nothing but zeroes).
FingerprintResult fingerprint_model(const DumpTrace& trace,
                                    std::span<const llm::ToyModel> zoo,
                                    std::uint32_t fragment_len = 4,
                                    std::uint32_t tile_edge = 4,
                                    std::uint64_t min_margin_words = 0);

// --- output-layer detection and replay ---------------------------------------

// Scans one stolen record for the cached-input-vector signature: words [0, d)
// all finite floats with at least one nonzero, immediately followed by
// zero_run zero words. Identical candidates within the record are reported
// once, in compute-unit order.
std::vector<std::vector<float>> detect_output_layer(const DumpRecord& record,
                                                    std::uint32_t dim,
                                                    std::uint32_t zero_run);

// Re-runs the decode the victim would have performed on hidden state v:
// output logits, greedy argmax, ties to the lowest token id. Throws
// ShapeError unless v has exactly hidden_dim entries.
std::uint32_t replay_output_layer(const llm::ToyModel& model,
                                  std::span<const float> v);

// --- transcript scoring -------------------------------------------------------

enum class TokenTag { Exact, Duplicate, Missing, Similar, Incorrect };

const char* token_tag_name(TokenTag tag);

struct AlignmentEvent {
  TokenTag tag = TokenTag::Exact;
  std::optional<std::uint32_t> victim_index;
  std::optional<std::uint32_t> recovered_index;
};

struct ReconstructionReport {
  std::vector<std::uint32_t> recovered;
  std::vector<AlignmentEvent> alignment;
  std::uint64_t exact = 0;
  std::uint64_t duplicate = 0;
  std::uint64_t missing = 0;
  std::uint64_t similar = 0;
  std::uint64_t incorrect = 0;
  double fidelity = 0.0;  // exact / victim length
};

// Aligns the recovered stream against the victim transcript by minimal edit
// distance (match 0; substitute, insert, delete 1; ties prefer match, then
// substitute, then insert). Tags: aligned equal tokens are Exact; an inserted
// token equal to the victim token just before it is Duplicate (checked before
// any similarity); victim tokens with no partner are Missing; substitutions
// are Similar when the embedding cosine reaches similarity_threshold, else
// Incorrect, as are non-duplicate insertions.
ReconstructionReport classify_and_score(std::span<const std::uint32_t> recovered,
                                        std::span<const std::uint32_t> victim,
                                        const llm::ToyModel& model,
                                        double similarity_threshold = 0.5);

}  // namespace lmleak::attack
