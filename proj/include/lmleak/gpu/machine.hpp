// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "lmleak/error.hpp"
#include "lmleak/gpu/kernels.hpp"
#include "lmleak/gpu/types.hpp"

namespace lmleak::gpu {

struct KernelDispatch {
  ProcessId owner = 0;  // filled in by submit()
  kernels::KernelId kernel;
  kernels::KernelParams params;
  std::uint32_t num_workgroups = 1;
  std::uint32_t workgroup_size = 1;
  std::uint32_t local_alloc_words = 0;
  std::vector<BufferHandle> bindings;
};

struct ScheduleEntry {
  std::uint64_t step = 0;    // execution ordinal, from 0
  std::uint64_t ticket = 0;  // matches the DispatchTicket returned by submit
  ProcessId process = 0;
  kernels::KernelId kernel;
  std::optional<ErrorCode> fault;  // set when the dispatch aborted mid-body
  std::vector<std::uint64_t> bank_hashes;  // per CU, after the step finished
};

// Deterministic single-queue machine. Dispatches run strictly in arrival
// order and each one runs to completion before the next is considered; there
// is no preemption and no concurrency. Workgroup g lands on compute unit
// g % num_compute_units, and each compute unit owns one persistent local
// bank whose handling between kernels is governed by the residue policy.
//
// Global memory is one zero-initialized arena carved into process-owned
// buffers; inter-process isolation is enforced there. Local banks are the
// deliberate exception: nothing scrubs them unless the policy says so.
class GpuMachine {
 public:
  explicit GpuMachine(const GpuConfig& config);

  const GpuConfig& config() const { return config_; }

  std::uint64_t total_local_words() const;
  std::uint64_t total_local_bytes() const;

  // --- global buffers ---
  BufferHandle create_buffer(ProcessId process, std::uint32_t length_words);
  void write_buffer(ProcessId process, BufferHandle handle,
                    std::uint32_t offset_words,
                    std::span<const std::uint32_t> words);
  std::vector<std::uint32_t> read_buffer(ProcessId process,
                                         BufferHandle handle) const;
  std::uint32_t buffer_length(BufferHandle handle) const;

  // --- dispatch ---
  DispatchTicket submit(ProcessId process, KernelDispatch dispatch);
  const ScheduleEntry& step();
  void run_until(DispatchTicket ticket);
  void run_all();
  bool queue_empty() const { return queue_.empty(); }
  std::size_t queue_depth() const { return queue_.size(); }

  // --- introspection ---
  const std::vector<ScheduleEntry>& schedule_log() const { return log_; }
  std::uint64_t schedule_digest() const;
  std::span<const std::uint32_t> bank_words(std::uint32_t cu) const;

 private:
  struct Buffer {
    ProcessId owner = 0;
    std::uint32_t offset = 0;  // into arena_
    std::uint32_t length = 0;  // words
  };

  struct Pending {
    std::uint64_t ticket = 0;
    KernelDispatch dispatch;
  };

  void validate_dispatch(const KernelDispatch& dispatch) const;
  const Buffer& resolve(BufferHandle handle) const;
  void enqueue_wipe(ProcessId owner);
  std::vector<std::uint64_t> hash_banks() const;

  GpuConfig config_;
  std::vector<std::vector<std::uint32_t>> banks_;  // one per compute unit
  std::vector<std::uint32_t> arena_;               // global memory
  std::vector<Buffer> buffers_;
  std::uint32_t arena_used_ = 0;
  std::deque<Pending> queue_;
  std::vector<ScheduleEntry> log_;
  std::uint64_t next_ticket_ = 0;
  std::uint64_t steps_executed_ = 0;
};

}  // namespace lmleak::gpu
