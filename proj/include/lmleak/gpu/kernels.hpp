// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>

#include "lmleak/gpu/types.hpp"

namespace lmleak::kernels {

enum class KernelKind : std::uint8_t {
  Listener,     // dumps its whole local allocation to a global buffer
  Writer,       // fills its local allocation from a canary buffer
  TiledMatMul,  // C = A x B with both operand tiles staged in local memory
  MatVecLocal,  // out = W x v with v cached in local memory, zero padded
  Wipe,         // zeroes the local allocation
};

// A kernel identity is a kind plus an optional self-zeroing wrapper: the
// wrapped kernel runs its inner body, then zeroes its local allocation before
// the workgroup leaves the compute unit. Wipe cannot be wrapped.
struct KernelId {
  KernelKind kind = KernelKind::Listener;
  bool self_zeroing = false;

  bool operator==(const KernelId&) const = default;
};

KernelId self_zeroing_wrap(KernelId inner);

std::string kernel_name(const KernelId& id);

struct MatMulParams {
  std::uint32_t rows_a = 0;  // rows of A and C
  std::uint32_t cols_a = 0;  // columns of A, rows of B
  std::uint32_t cols_b = 0;  // columns of B and C
  std::uint32_t tile = 1;    // tile edge; must divide all three extents
};

struct MatVecParams {
  std::uint32_t rows = 0;  // rows of W and length of out
  std::uint32_t cols = 0;  // columns of W and length of v
};

using KernelParams = std::variant<std::monostate, MatMulParams, MatVecParams>;

// Bindings expected by each kind, in order:
//   Listener:    {dump},  dump length >= group_count * local_alloc_words
//   Writer:      {canary}, canary length >= local_alloc_words
//   TiledMatMul: {A, B, C}
//   MatVecLocal: {W, v, out}
//   Wipe:        {}
std::uint32_t expected_binding_count(KernelKind kind);

// --- kernel bodies ---------------------------------------------------------
// Invocations of one workgroup run sequentially to completion in ascending
// local_id order; there are no barriers. Bodies that need a fully staged tile
// therefore restage it themselves instead of splitting the load cooperatively.

void listener_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                   gpu::GlobalView& dump);

void writer_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                 gpu::GlobalView& canary);

void tiled_matmul_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                       gpu::GlobalView& a, gpu::GlobalView& b,
                       gpu::GlobalView& c, const MatMulParams& p);

void matvec_local_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                       gpu::GlobalView& w, gpu::GlobalView& v,
                       gpu::GlobalView& out, const MatVecParams& p);

void wipe_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm);

// Dispatcher used by the machine: runs one invocation of `id` against the
// given views. Bindings must match expected_binding_count(id.kind).
void run_invocation(const KernelId& id, const KernelParams& params,
                    const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                    std::span<gpu::GlobalView> bindings);

// Called once per workgroup after its last invocation; performs the
// self-zeroing pass for wrapped kernels, otherwise a no-op.
void end_workgroup(const KernelId& id, gpu::LocalView& lm);

}  // namespace lmleak::kernels
