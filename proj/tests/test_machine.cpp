// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <functional>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "lmleak/gpu/machine.hpp"

using lmleak::Error;
using lmleak::ErrorCode;
namespace gpu = lmleak::gpu;
namespace kernels = lmleak::kernels;

namespace {

gpu::GpuConfig small_config(gpu::ResiduePolicy policy = gpu::ResiduePolicy::Persist) {
  gpu::GpuConfig config;
  config.num_compute_units = 2;
  config.local_words_per_cu = 8;
  config.global_words = 4096;
  config.residue_policy = policy;
  return config;
}

// Writer dispatch filling `alloc` words of every bank from `canary_buf`.
gpu::KernelDispatch writer_dispatch(gpu::BufferHandle canary_buf,
                                    std::uint32_t groups,
                                    std::uint32_t alloc) {
  gpu::KernelDispatch d;
  d.kernel = {kernels::KernelKind::Writer, false};
  d.num_workgroups = groups;
  d.workgroup_size = 4;
  d.local_alloc_words = alloc;
  d.bindings = {canary_buf};
  return d;
}

gpu::KernelDispatch listener_dispatch(gpu::BufferHandle dump,
                                      std::uint32_t groups,
                                      std::uint32_t alloc) {
  gpu::KernelDispatch d;
  d.kernel = {kernels::KernelKind::Listener, false};
  d.num_workgroups = groups;
  d.workgroup_size = 4;
  d.local_alloc_words = alloc;
  d.bindings = {dump};
  return d;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::ValidationError;
}

}  // namespace

TEST_SUITE("machine") {

TEST_CASE("local memory capacity is exact") {
  gpu::GpuConfig config;
  config.num_compute_units = 84;
  config.local_words_per_cu = 16384;
  gpu::GpuMachine machine(config);
  CHECK(machine.total_local_words() == 1376256u);
  CHECK(machine.total_local_bytes() == 5505024u);

  gpu::GpuMachine desk(small_config());
  CHECK(desk.total_local_bytes() == 2u * 8u * 4u);
}

TEST_CASE("constructor rejects empty extents") {
  gpu::GpuConfig config = small_config();
  config.num_compute_units = 0;
  CHECK(code_of([&] { gpu::GpuMachine m(config); }) == ErrorCode::InvalidConfig);
  config = small_config();
  config.local_words_per_cu = 0;
  CHECK(code_of([&] { gpu::GpuMachine m(config); }) == ErrorCode::InvalidConfig);
  config = small_config();
  config.global_words = 0;
  CHECK(code_of([&] { gpu::GpuMachine m(config); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("buffers are carved sequentially and owned") {
  gpu::GpuMachine machine(small_config());
  const gpu::BufferHandle a = machine.create_buffer(1, 16);
  const gpu::BufferHandle b = machine.create_buffer(2, 16);
  CHECK(a != b);
  CHECK(machine.buffer_length(a) == 16);

  std::vector<std::uint32_t> payload(16);
  std::iota(payload.begin(), payload.end(), 1u);
  machine.write_buffer(1, a, 0, payload);
  CHECK(machine.read_buffer(1, a) == payload);

  CHECK(code_of([&] { machine.write_buffer(2, a, 0, payload); }) ==
        ErrorCode::OwnershipViolation);
  CHECK(code_of([&] { (void)machine.read_buffer(1, b); }) ==
        ErrorCode::OwnershipViolation);
  CHECK(code_of([&] { (void)machine.read_buffer(1, 99); }) ==
        ErrorCode::UnknownHandle);
  CHECK(code_of([&] { machine.write_buffer(1, a, 8, payload); }) ==
        ErrorCode::GlobalOutOfBounds);
  CHECK(code_of([&] { machine.create_buffer(1, 0); }) ==
        ErrorCode::ValidationError);
}

TEST_CASE("global arena exhausts exactly at capacity") {
  gpu::GpuConfig config = small_config();
  config.global_words = 100;
  gpu::GpuMachine machine(config);
  machine.create_buffer(1, 60);
  machine.create_buffer(1, 40);  // exact fill is fine
  CHECK(code_of([&] { machine.create_buffer(1, 1); }) ==
        ErrorCode::OutOfGlobalMemory);
}

TEST_CASE("dispatch validation") {
  gpu::GpuMachine machine(small_config());
  const gpu::BufferHandle buf = machine.create_buffer(1, 64);

  gpu::KernelDispatch d = writer_dispatch(buf, 1, 8);
  d.num_workgroups = 0;
  CHECK(code_of([&] { machine.submit(1, d); }) == ErrorCode::ValidationError);

  d = writer_dispatch(buf, 1, 9);  // bank holds 8
  CHECK(code_of([&] { machine.submit(1, d); }) ==
        ErrorCode::AllocationTooLarge);

  d = writer_dispatch(buf, 1, 8);
  d.bindings = {};
  CHECK(code_of([&] { machine.submit(1, d); }) == ErrorCode::ValidationError);

  // matmul needs its params and tiles that fit and divide.
  gpu::KernelDispatch mm;
  mm.kernel = {kernels::KernelKind::TiledMatMul, false};
  mm.num_workgroups = 1;
  mm.workgroup_size = 4;
  mm.local_alloc_words = 8;
  mm.bindings = {buf, buf, buf};
  CHECK(code_of([&] { machine.submit(1, mm); }) == ErrorCode::ValidationError);
  mm.params = kernels::MatMulParams{4, 4, 4, 3};
  CHECK(code_of([&] { machine.submit(1, mm); }) == ErrorCode::ValidationError);
  mm.params = kernels::MatMulParams{4, 4, 4, 2};  // 2 tiles = 8 words, fits
  machine.submit(1, mm);
  mm.params = kernels::MatMulParams{8, 8, 8, 4};  // 32 words in an 8-word bank
  CHECK(code_of([&] { machine.submit(1, mm); }) ==
        ErrorCode::AllocationTooLarge);

  gpu::KernelDispatch mv;
  mv.kernel = {kernels::KernelKind::MatVecLocal, false};
  mv.num_workgroups = 1;
  mv.workgroup_size = 4;
  mv.local_alloc_words = 8;
  mv.bindings = {buf, buf, buf};
  mv.params = kernels::MatVecParams{4, 9};  // vector larger than allocation
  CHECK(code_of([&] { machine.submit(1, mv); }) ==
        ErrorCode::AllocationTooLarge);

  // bindings must belong to the submitting process.
  const gpu::BufferHandle foreign = machine.create_buffer(2, 8);
  d = writer_dispatch(foreign, 1, 8);
  CHECK(code_of([&] { machine.submit(1, d); }) ==
        ErrorCode::OwnershipViolation);
}

TEST_CASE("stepping an empty queue fails") {
  gpu::GpuMachine machine(small_config());
  CHECK(code_of([&] { machine.step(); }) == ErrorCode::NothingToRun);
}

TEST_CASE("queue is strictly first-in first-out with ascending tickets") {
  gpu::GpuMachine machine(small_config());
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 7u));
  const gpu::BufferHandle dump = machine.create_buffer(2, 16);

  const gpu::DispatchTicket t0 = machine.submit(1, writer_dispatch(canary, 2, 8));
  const gpu::DispatchTicket t1 = machine.submit(2, listener_dispatch(dump, 2, 8));
  CHECK(t0.id < t1.id);
  CHECK(machine.queue_depth() == 2);

  machine.run_until(t0);
  CHECK(machine.schedule_log().size() == 1);
  CHECK(machine.schedule_log()[0].ticket == t0.id);
  CHECK(machine.schedule_log()[0].process == 1);
  CHECK_FALSE(machine.queue_empty());

  machine.run_all();
  CHECK(machine.queue_empty());
  REQUIRE(machine.schedule_log().size() == 2);
  CHECK(machine.schedule_log()[1].ticket == t1.id);
  CHECK(machine.schedule_log()[1].process == 2);
  CHECK(machine.schedule_log()[1].step == 1);

  // Running up to an already-executed ticket is a no-op.
  machine.run_until(t0);
  CHECK(machine.schedule_log().size() == 2);
}

TEST_CASE("residue crosses process boundaries under persist") {
  gpu::GpuMachine machine(small_config());
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 123u));
  const gpu::BufferHandle dump = machine.create_buffer(2, 16);

  machine.submit(1, writer_dispatch(canary, 2, 8));
  machine.submit(2, listener_dispatch(dump, 2, 8));
  machine.run_all();

  const std::vector<std::uint32_t> leaked = machine.read_buffer(2, dump);
  CHECK(leaked == std::vector<std::uint32_t>(16, 123u));
}

TEST_CASE("zero-on-allocate hands every kernel a scrubbed allocation") {
  gpu::GpuMachine machine(small_config(gpu::ResiduePolicy::ZeroOnAllocate));
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 123u));
  const gpu::BufferHandle dump = machine.create_buffer(2, 16);

  machine.submit(1, writer_dispatch(canary, 2, 8));
  machine.submit(2, listener_dispatch(dump, 2, 8));
  machine.run_all();

  CHECK(machine.read_buffer(2, dump) == std::vector<std::uint32_t>(16, 0u));
}

TEST_CASE("a smaller follow-up allocation still sees residue under persist") {
  gpu::GpuMachine machine(small_config());
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 9u));
  const gpu::BufferHandle dump = machine.create_buffer(2, 8);

  machine.submit(1, writer_dispatch(canary, 2, 8));
  // The listener allocates only 4 words; it can reach exactly that window.
  machine.submit(2, listener_dispatch(dump, 2, 4));
  machine.run_all();

  const std::vector<std::uint32_t> leaked = machine.read_buffer(2, dump);
  CHECK(leaked == std::vector<std::uint32_t>(8, 9u));
  // Words beyond the window survive in the bank itself.
  const auto bank = machine.bank_words(0);
  CHECK(bank[7] == 9u);
}

TEST_CASE("atomic wipe clears every bank in the same step") {
  gpu::GpuMachine machine(small_config(gpu::ResiduePolicy::AtomicWipe));
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 5u));

  machine.submit(1, writer_dispatch(canary, 2, 8));
  machine.run_all();
  CHECK(machine.queue_empty());  // no trailing wipe dispatch
  for (std::uint32_t cu = 0; cu < 2; ++cu) {
    const auto bank = machine.bank_words(cu);
    for (std::uint32_t w : bank) CHECK(w == 0u);
  }
}

TEST_CASE("deferred wipe runs as its own later dispatch") {
  gpu::GpuMachine machine(small_config(gpu::ResiduePolicy::WipeKernelAfter));
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 5u));

  machine.submit(1, writer_dispatch(canary, 2, 8));
  machine.step();  // the writer itself
  CHECK(machine.bank_words(0)[0] == 5u);  // residue still there
  CHECK(machine.queue_depth() == 1);      // the wipe is queued, not run

  machine.run_all();
  REQUIRE(machine.schedule_log().size() == 2);
  CHECK(machine.schedule_log()[1].kernel.kind == kernels::KernelKind::Wipe);
  CHECK(machine.bank_words(0)[0] == 0u);
  CHECK(machine.queue_empty());  // wipes do not enqueue more wipes
}

TEST_CASE("a foreign dispatch already queued beats the deferred wipe") {
  gpu::GpuMachine machine(small_config(gpu::ResiduePolicy::WipeKernelAfter));
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 123u));
  const gpu::BufferHandle dump = machine.create_buffer(2, 16);

  machine.submit(1, writer_dispatch(canary, 2, 8));
  machine.submit(2, listener_dispatch(dump, 2, 8));  // queued before the wipe exists
  machine.run_all();

  CHECK(machine.read_buffer(2, dump) == std::vector<std::uint32_t>(16, 123u));
  // writer, listener, wipe(writer), wipe(listener)
  CHECK(machine.schedule_log().size() == 4);
}

TEST_CASE("listeners do not modify the banks they read") {
  gpu::GpuMachine machine(small_config());
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 42u));
  const gpu::BufferHandle dump = machine.create_buffer(2, 16);

  machine.submit(1, writer_dispatch(canary, 2, 8));
  machine.run_all();
  const std::vector<std::uint32_t> before(machine.bank_words(0).begin(),
                                          machine.bank_words(0).end());

  machine.submit(2, listener_dispatch(dump, 2, 8));
  machine.run_all();
  const std::vector<std::uint32_t> after(machine.bank_words(0).begin(),
                                         machine.bank_words(0).end());
  CHECK(before == after);

  // The log's bank hashes agree: reading changed nothing.
  const auto& log = machine.schedule_log();
  CHECK(log[0].bank_hashes == log[1].bank_hashes);
}

TEST_CASE("identical submissions produce identical schedule digests") {
  auto run = [](std::uint32_t fill) {
    gpu::GpuMachine machine(small_config());
    const gpu::BufferHandle canary = machine.create_buffer(1, 8);
    machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, fill));
    const gpu::BufferHandle dump = machine.create_buffer(2, 16);
    machine.submit(1, writer_dispatch(canary, 2, 8));
    machine.submit(2, listener_dispatch(dump, 2, 8));
    machine.run_all();
    return machine.schedule_digest();
  };
  CHECK(run(7) == run(7));
  // The digest covers bank contents, so different data means a different run.
  CHECK(run(7) != run(8));
}

TEST_CASE("scheduler seed does not perturb the FIFO order") {
  auto run = [](std::uint64_t seed) {
    gpu::GpuConfig config = small_config();
    config.scheduler_seed = seed;
    gpu::GpuMachine machine(config);
    const gpu::BufferHandle canary = machine.create_buffer(1, 8);
    machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 3u));
    machine.submit(1, writer_dispatch(canary, 2, 8));
    machine.run_all();
    return machine.schedule_digest();
  };
  CHECK(run(0) == run(12345));
}

TEST_CASE("an out-of-bounds kernel faults without poisoning the machine") {
  gpu::GpuMachine machine(small_config());
  const gpu::BufferHandle canary = machine.create_buffer(1, 8);
  machine.write_buffer(1, canary, 0, std::vector<std::uint32_t>(8, 1u));
  // Dump buffer sized for one workgroup, but two will write: group 1 faults.
  const gpu::BufferHandle dump = machine.create_buffer(2, 8);

  machine.submit(1, writer_dispatch(canary, 2, 8));
  machine.submit(2, listener_dispatch(dump, 2, 8));
  machine.run_all();

  const auto& log = machine.schedule_log();
  REQUIRE(log.size() == 2);
  CHECK_FALSE(log[0].fault.has_value());
  REQUIRE(log[1].fault.has_value());
  CHECK(*log[1].fault == ErrorCode::GlobalOutOfBounds);
  // Group 0 finished before the fault; its words were kept.
  CHECK(machine.read_buffer(2, dump) == std::vector<std::uint32_t>(8, 1u));

  // The machine still runs subsequent work.
  const gpu::BufferHandle dump2 = machine.create_buffer(2, 16);
  machine.submit(2, listener_dispatch(dump2, 2, 8));
  machine.run_all();
  CHECK_FALSE(machine.schedule_log().back().fault.has_value());
}

TEST_CASE("bank introspection rejects bad compute units") {
  gpu::GpuMachine machine(small_config());
  CHECK(code_of([&] { (void)machine.bank_words(2); }) ==
        ErrorCode::ValidationError);
}

}  // TEST_SUITE
