// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <exception>
#include <string>

#include "lmleak/error.hpp"

namespace lmleak::gpu {

using ProcessId = std::uint32_t;
using BufferHandle = std::uint32_t;

struct DispatchTicket {
  std::uint64_t id = 0;
};

// What happens to local memory between kernels.
//   Persist        - nothing; residue survives across dispatches (vulnerable).
//   ZeroOnAllocate - the allocated words are zeroed before each workgroup body.
//   WipeKernelAfter- a separate wipe dispatch is enqueued after every non-wipe
//                    kernel; foreign dispatches already in the queue run first.
//   AtomicWipe     - all banks are zeroed in the same scheduling step as the
//                    kernel completion; nothing can run in between.
enum class ResiduePolicy : std::uint8_t {
  Persist,
  ZeroOnAllocate,
  WipeKernelAfter,
  AtomicWipe,
};

const char* residue_policy_name(ResiduePolicy policy);

struct GpuConfig {
  std::uint32_t num_compute_units = 4;
  std::uint32_t local_words_per_cu = 64;
  std::uint32_t global_words = 1u << 16;
  ResiduePolicy residue_policy = ResiduePolicy::Persist;
  std::uint64_t scheduler_seed = 0;
};

// Per-invocation coordinates; global_id == group_id * local_size + local_id.
struct InvocationContext {
  std::uint32_t global_id = 0;
  std::uint32_t local_id = 0;
  std::uint32_t group_id = 0;
  std::uint32_t local_size = 1;
  std::uint32_t group_count = 1;
};

// Thrown by kernel bodies on an out-of-bounds access; caught by the machine,
// which aborts the dispatch, keeps partial writes, and records the fault in
// the schedule log. Never escapes GpuMachine::step().
struct KernelFault : std::exception {
  explicit KernelFault(ErrorCode c) : code(c) {}
  const char* what() const noexcept override { return error_code_name(code); }
  ErrorCode code;
};

// Bounds-checked window over one compute unit's local bank. The window covers
// exactly the dispatch's local_alloc_words: a kernel that allocates k words
// cannot reach residue beyond k, but that residue still survives the dispatch.
class LocalView {
 public:
  LocalView(std::uint32_t* words, std::uint32_t alloc_words)
      : words_(words), alloc_(alloc_words) {}

  std::uint32_t size() const { return alloc_; }

  std::uint32_t load(std::uint32_t i) const {
    check(i);
    return words_[i];
  }
  void store(std::uint32_t i, std::uint32_t v) {
    check(i);
    words_[i] = v;
  }
  float load_f32(std::uint32_t i) const {
    return std::bit_cast<float>(load(i));
  }
  void store_f32(std::uint32_t i, float v) {
    store(i, std::bit_cast<std::uint32_t>(v));
  }

 private:
  void check(std::uint32_t i) const {
    if (i >= alloc_) throw KernelFault(ErrorCode::LocalOutOfBounds);
  }

  std::uint32_t* words_;
  std::uint32_t alloc_;
};

// Bounds-checked window over one bound global buffer.
class GlobalView {
 public:
  GlobalView(std::uint32_t* words, std::uint32_t length)
      : words_(words), length_(length) {}

  std::uint32_t size() const { return length_; }

  std::uint32_t load(std::uint32_t i) const {
    check(i);
    return words_[i];
  }
  void store(std::uint32_t i, std::uint32_t v) {
    check(i);
    words_[i] = v;
  }
  float load_f32(std::uint32_t i) const {
    return std::bit_cast<float>(load(i));
  }
  void store_f32(std::uint32_t i, float v) {
    store(i, std::bit_cast<std::uint32_t>(v));
  }

 private:
  void check(std::uint32_t i) const {
    if (i >= length_) throw KernelFault(ErrorCode::GlobalOutOfBounds);
  }

  std::uint32_t* words_;
  std::uint32_t length_;
};

inline const char* residue_policy_name(ResiduePolicy policy) {
  switch (policy) {
    case ResiduePolicy::Persist: return "persist";
    case ResiduePolicy::ZeroOnAllocate: return "zero-on-alloc";
    case ResiduePolicy::WipeKernelAfter: return "wipe-after";
    case ResiduePolicy::AtomicWipe: return "atomic-wipe";
  }
  return "unknown";
}

}  // namespace lmleak::gpu
