// SPDX-License-Identifier: Apache-2.0
#include "lmleak/gpu/machine.hpp"

#include <algorithm>

#include "lmleak/hash.hpp"

namespace lmleak::gpu {

GpuMachine::GpuMachine(const GpuConfig& config) : config_(config) {
  if (config.num_compute_units == 0) {
    throw Error(ErrorCode::InvalidConfig, "need at least one compute unit");
  }
  if (config.local_words_per_cu == 0) {
    throw Error(ErrorCode::InvalidConfig, "local bank cannot be empty");
  }
  if (config.global_words == 0) {
    throw Error(ErrorCode::InvalidConfig, "global memory cannot be empty");
  }
  banks_.assign(config.num_compute_units,
                std::vector<std::uint32_t>(config.local_words_per_cu, 0u));
  arena_.assign(config.global_words, 0u);
}

std::uint64_t GpuMachine::total_local_words() const {
  return std::uint64_t{config_.num_compute_units} * config_.local_words_per_cu;
}

std::uint64_t GpuMachine::total_local_bytes() const {
  return total_local_words() * sizeof(std::uint32_t);
}

BufferHandle GpuMachine::create_buffer(ProcessId process,
                                       std::uint32_t length_words) {
  if (length_words == 0) {
    throw Error(ErrorCode::ValidationError, "buffer cannot be empty");
  }
  if (std::uint64_t{arena_used_} + length_words > config_.global_words) {
    throw Error(ErrorCode::OutOfGlobalMemory,
                "global arena exhausted at " + std::to_string(arena_used_) +
                    " of " + std::to_string(config_.global_words) + " words");
  }
  buffers_.push_back(Buffer{process, arena_used_, length_words});
  arena_used_ += length_words;
  return static_cast<BufferHandle>(buffers_.size() - 1);
}

const GpuMachine::Buffer& GpuMachine::resolve(BufferHandle handle) const {
  if (handle >= buffers_.size()) {
    throw Error(ErrorCode::UnknownHandle,
                "no buffer #" + std::to_string(handle));
  }
  return buffers_[handle];
}

void GpuMachine::write_buffer(ProcessId process, BufferHandle handle,
                              std::uint32_t offset_words,
                              std::span<const std::uint32_t> words) {
  const Buffer& buf = resolve(handle);
  if (buf.owner != process) {
    throw Error(ErrorCode::OwnershipViolation,
                "buffer #" + std::to_string(handle) + " belongs to process " +
                    std::to_string(buf.owner));
  }
  if (std::uint64_t{offset_words} + words.size() > buf.length) {
    throw Error(ErrorCode::GlobalOutOfBounds,
                "write past end of buffer #" + std::to_string(handle));
  }
  std::copy(words.begin(), words.end(),
            arena_.begin() + buf.offset + offset_words);
}

std::vector<std::uint32_t> GpuMachine::read_buffer(ProcessId process,
                                                   BufferHandle handle) const {
  const Buffer& buf = resolve(handle);
  if (buf.owner != process) {
    throw Error(ErrorCode::OwnershipViolation,
                "buffer #" + std::to_string(handle) + " belongs to process " +
                    std::to_string(buf.owner));
  }
  return std::vector<std::uint32_t>(arena_.begin() + buf.offset,
                                    arena_.begin() + buf.offset + buf.length);
}

std::uint32_t GpuMachine::buffer_length(BufferHandle handle) const {
  return resolve(handle).length;
}

void GpuMachine::validate_dispatch(const KernelDispatch& d) const {
  if (d.num_workgroups == 0 || d.workgroup_size == 0) {
    throw Error(ErrorCode::ValidationError,
                "dispatch needs at least one workgroup and one invocation");
  }
  if (d.local_alloc_words > config_.local_words_per_cu) {
    throw Error(ErrorCode::AllocationTooLarge,
                std::to_string(d.local_alloc_words) + " words requested, bank holds " +
                    std::to_string(config_.local_words_per_cu));
  }
  if (d.kernel.self_zeroing && d.kernel.kind == kernels::KernelKind::Wipe) {
    throw Error(ErrorCode::ValidationError, "wipe kernels cannot be wrapped");
  }
  const std::uint32_t expected =
      kernels::expected_binding_count(d.kernel.kind);
  if (d.bindings.size() != expected) {
    throw Error(ErrorCode::ValidationError,
                kernels::kernel_name(d.kernel) + " takes " +
                    std::to_string(expected) + " bindings, got " +
                    std::to_string(d.bindings.size()));
  }

  switch (d.kernel.kind) {
    case kernels::KernelKind::TiledMatMul: {
      const auto* p = std::get_if<kernels::MatMulParams>(&d.params);
      if (p == nullptr) {
        throw Error(ErrorCode::ValidationError,
                    "tiled-matmul requires MatMulParams");
      }
      if (p->tile == 0 || p->rows_a == 0 || p->cols_a == 0 || p->cols_b == 0) {
        throw Error(ErrorCode::ValidationError, "matmul extents must be positive");
      }
      if (p->rows_a % p->tile != 0 || p->cols_a % p->tile != 0 ||
          p->cols_b % p->tile != 0) {
        throw Error(ErrorCode::ValidationError,
                    "tile must divide every matmul extent (pad on the host)");
      }
      if (2ull * p->tile * p->tile > d.local_alloc_words) {
        throw Error(ErrorCode::AllocationTooLarge,
                    "two " + std::to_string(p->tile) + "x" +
                        std::to_string(p->tile) +
                        " tiles do not fit the local allocation");
      }
      break;
    }
    case kernels::KernelKind::MatVecLocal: {
      const auto* p = std::get_if<kernels::MatVecParams>(&d.params);
      if (p == nullptr) {
        throw Error(ErrorCode::ValidationError,
                    "matvec-local requires MatVecParams");
      }
      if (p->rows == 0 || p->cols == 0) {
        throw Error(ErrorCode::ValidationError, "matvec extents must be positive");
      }
      if (p->cols > d.local_alloc_words) {
        throw Error(ErrorCode::AllocationTooLarge,
                    "input vector does not fit the local allocation");
      }
      break;
    }
    default:
      break;
  }
}

DispatchTicket GpuMachine::submit(ProcessId process, KernelDispatch dispatch) {
  dispatch.owner = process;
  validate_dispatch(dispatch);
  for (BufferHandle h : dispatch.bindings) {
    const Buffer& buf = resolve(h);
    if (buf.owner != process) {
      throw Error(ErrorCode::OwnershipViolation,
                  "binding #" + std::to_string(h) + " belongs to process " +
                      std::to_string(buf.owner));
    }
  }
  const std::uint64_t ticket = next_ticket_++;
  queue_.push_back(Pending{ticket, std::move(dispatch)});
  return DispatchTicket{ticket};
}

void GpuMachine::enqueue_wipe(ProcessId owner) {
  // Enqueued at the tail at completion time: any foreign dispatch already in
  // the queue runs before this wipe does. That window is the whole point of
  // modeling this policy separately from AtomicWipe.
  KernelDispatch wipe;
  wipe.owner = owner;
  wipe.kernel = kernels::KernelId{kernels::KernelKind::Wipe, false};
  wipe.params = std::monostate{};
  wipe.num_workgroups = config_.num_compute_units;
  wipe.workgroup_size = 1;
  wipe.local_alloc_words = config_.local_words_per_cu;
  queue_.push_back(Pending{next_ticket_++, std::move(wipe)});
}

std::vector<std::uint64_t> GpuMachine::hash_banks() const {
  std::vector<std::uint64_t> hashes;
  hashes.reserve(banks_.size());
  for (const auto& bank : banks_) {
    hashes.push_back(fnv1a64(bank));
  }
  return hashes;
}

const ScheduleEntry& GpuMachine::step() {
  if (queue_.empty()) {
    throw Error(ErrorCode::NothingToRun, "dispatch queue is empty");
  }
  Pending pending = std::move(queue_.front());
  queue_.pop_front();
  const KernelDispatch& d = pending.dispatch;

  ScheduleEntry entry;
  entry.step = steps_executed_;
  entry.ticket = pending.ticket;
  entry.process = d.owner;
  entry.kernel = d.kernel;

  std::vector<GlobalView> views;
  views.reserve(d.bindings.size());
  for (BufferHandle h : d.bindings) {
    const Buffer& buf = resolve(h);
    views.emplace_back(arena_.data() + buf.offset, buf.length);
  }

  try {
    for (std::uint32_t g = 0; g < d.num_workgroups; ++g) {
      const std::uint32_t cu = g % config_.num_compute_units;
      std::uint32_t* bank = banks_[cu].data();
      if (config_.residue_policy == ResiduePolicy::ZeroOnAllocate) {
        std::fill_n(bank, d.local_alloc_words, 0u);
      }
      LocalView lm(bank, d.local_alloc_words);
      for (std::uint32_t l = 0; l < d.workgroup_size; ++l) {
        InvocationContext ctx;
        ctx.group_id = g;
        ctx.local_id = l;
        ctx.local_size = d.workgroup_size;
        ctx.group_count = d.num_workgroups;
        ctx.global_id = g * d.workgroup_size + l;
        kernels::run_invocation(d.kernel, d.params, ctx, lm, views);
      }
      kernels::end_workgroup(d.kernel, lm);
    }
  } catch (const KernelFault& fault) {
    // Abort the dispatch but keep whatever it already wrote; the machine
    // stays usable and the fault is visible in the log.
    entry.fault = fault.code;
  }

  if (config_.residue_policy == ResiduePolicy::AtomicWipe) {
    for (auto& bank : banks_) {
      std::fill(bank.begin(), bank.end(), 0u);
    }
  }
  if (config_.residue_policy == ResiduePolicy::WipeKernelAfter &&
      d.kernel.kind != kernels::KernelKind::Wipe) {
    enqueue_wipe(d.owner);
  }

  entry.bank_hashes = hash_banks();
  ++steps_executed_;
  log_.push_back(std::move(entry));
  return log_.back();
}

void GpuMachine::run_until(DispatchTicket ticket) {
  // Tickets are assigned in enqueue order and the queue is FIFO, so executed
  // ticket ids are strictly ascending.
  while (log_.empty() || log_.back().ticket < ticket.id) {
    step();
  }
}

void GpuMachine::run_all() {
  while (!queue_.empty()) {
    step();
  }
}

std::uint64_t GpuMachine::schedule_digest() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const ScheduleEntry& e : log_) {
    h = fnv1a64_mix(h, e.step);
    h = fnv1a64_mix(h, e.ticket);
    h = fnv1a64_mix(h, e.process);
    h = fnv1a64_mix(h, static_cast<std::uint64_t>(e.kernel.kind) |
                           (e.kernel.self_zeroing ? 0x100u : 0u));
    h = fnv1a64_mix(h, e.fault ? 1u + static_cast<std::uint64_t>(*e.fault) : 0u);
    for (std::uint64_t bh : e.bank_hashes) {
      h = fnv1a64_mix(h, bh);
    }
  }
  return h;
}

std::span<const std::uint32_t> GpuMachine::bank_words(std::uint32_t cu) const {
  if (cu >= banks_.size()) {
    throw Error(ErrorCode::ValidationError,
                "no compute unit #" + std::to_string(cu));
  }
  return banks_[cu];
}

}  // namespace lmleak::gpu
