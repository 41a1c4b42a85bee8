// SPDX-License-Identifier: Apache-2.0
#include "lmleak/gpu/kernels.hpp"

#include <vector>

#include "lmleak/error.hpp"

namespace lmleak::kernels {

KernelId self_zeroing_wrap(KernelId inner) {
  if (inner.kind == KernelKind::Wipe) {
    throw Error(ErrorCode::ValidationError, "wipe kernels cannot be wrapped");
  }
  if (inner.self_zeroing) {
    throw Error(ErrorCode::ValidationError, "kernel is already self-zeroing");
  }
  inner.self_zeroing = true;
  return inner;
}

std::string kernel_name(const KernelId& id) {
  const char* base = "unknown";
  switch (id.kind) {
    case KernelKind::Listener: base = "listener"; break;
    case KernelKind::Writer: base = "writer"; break;
    case KernelKind::TiledMatMul: base = "tiled-matmul"; break;
    case KernelKind::MatVecLocal: base = "matvec-local"; break;
    case KernelKind::Wipe: base = "wipe"; break;
  }
  return id.self_zeroing ? std::string("self-zeroing(") + base + ")" : base;
}

std::uint32_t expected_binding_count(KernelKind kind) {
  switch (kind) {
    case KernelKind::Listener: return 1;
    case KernelKind::Writer: return 1;
    case KernelKind::TiledMatMul: return 3;
    case KernelKind::MatVecLocal: return 3;
    case KernelKind::Wipe: return 0;
  }
  return 0;
}

void listener_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                   gpu::GlobalView& dump) {
  const std::uint32_t alloc = lm.size();
  for (std::uint32_t i = ctx.local_id; i < alloc; i += ctx.local_size) {
    dump.store(alloc * ctx.group_id + i, lm.load(i));
  }
}

void writer_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                 gpu::GlobalView& canary) {
  const std::uint32_t alloc = lm.size();
  for (std::uint32_t i = ctx.local_id; i < alloc; i += ctx.local_size) {
    lm.store(i, canary.load(i));
  }
}

void tiled_matmul_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                       gpu::GlobalView& a, gpu::GlobalView& b,
                       gpu::GlobalView& c, const MatMulParams& p) {
  const std::uint32_t t = p.tile;
  const std::uint32_t tile_words = t * t;
  const std::uint32_t tiles_n = p.cols_b / t;
  const std::uint32_t phases = p.cols_a / t;

  // One workgroup owns one t x t tile of C, in row-major tile order.
  const std::uint32_t ti = ctx.group_id / tiles_n;
  const std::uint32_t tj = ctx.group_id % tiles_n;
  const std::uint32_t row0 = ti * t;
  const std::uint32_t col0 = tj * t;

  // Register accumulators for this invocation's strided share of the C tile.
  // Accumulation must walk k in ascending order so the float rounding matches
  // a plain triple loop bit for bit.
  std::vector<float> acc(tile_words, 0.0f);

  for (std::uint32_t kt = 0; kt < phases; ++kt) {
    const std::uint32_t k0 = kt * t;
    // Stage both tiles: A tile at words [0, t^2), B tile at [t^2, 2 t^2),
    // both row-major. Every invocation restages the full pair; invocations
    // run sequentially, so a cooperative split would leave later reads of
    // this invocation uncovered.
    for (std::uint32_t idx = 0; idx < tile_words; ++idx) {
      const std::uint32_t r = idx / t;
      const std::uint32_t col = idx % t;
      lm.store(idx, a.load((row0 + r) * p.cols_a + k0 + col));
    }
    for (std::uint32_t idx = 0; idx < tile_words; ++idx) {
      const std::uint32_t r = idx / t;
      const std::uint32_t col = idx % t;
      lm.store(tile_words + idx, b.load((k0 + r) * p.cols_b + col0 + col));
    }
    for (std::uint32_t idx = ctx.local_id; idx < tile_words;
         idx += ctx.local_size) {
      const std::uint32_t r = idx / t;
      const std::uint32_t col = idx % t;
      float sum = acc[idx];
      for (std::uint32_t k = 0; k < t; ++k) {
        sum += lm.load_f32(r * t + k) * lm.load_f32(tile_words + k * t + col);
      }
      acc[idx] = sum;
    }
  }

  for (std::uint32_t idx = ctx.local_id; idx < tile_words;
       idx += ctx.local_size) {
    const std::uint32_t r = idx / t;
    const std::uint32_t col = idx % t;
    c.store_f32((row0 + r) * p.cols_b + col0 + col, acc[idx]);
  }
}

void matvec_local_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                       gpu::GlobalView& w, gpu::GlobalView& v,
                       gpu::GlobalView& out, const MatVecParams& p) {
  // Cache the whole input vector at the start of the bank and explicitly zero
  // the rest of the allocation. The zero tail is load-bearing: it is what
  // distinguishes a cached vector from other residue when the bank leaks.
  const std::uint32_t alloc = lm.size();
  for (std::uint32_t i = 0; i < alloc; ++i) {
    lm.store(i, i < p.cols ? v.load(i) : 0u);
  }

  const std::uint32_t total = ctx.group_count * ctx.local_size;
  for (std::uint32_t r = ctx.global_id; r < p.rows; r += total) {
    float sum = 0.0f;
    for (std::uint32_t k = 0; k < p.cols; ++k) {
      sum += w.load_f32(r * p.cols + k) * lm.load_f32(k);
    }
    out.store_f32(r, sum);
  }
}

void wipe_body(const gpu::InvocationContext& ctx, gpu::LocalView& lm) {
  const std::uint32_t alloc = lm.size();
  for (std::uint32_t i = ctx.local_id; i < alloc; i += ctx.local_size) {
    lm.store(i, 0u);
  }
}

void run_invocation(const KernelId& id, const KernelParams& params,
                    const gpu::InvocationContext& ctx, gpu::LocalView& lm,
                    std::span<gpu::GlobalView> bindings) {
  switch (id.kind) {
    case KernelKind::Listener:
      listener_body(ctx, lm, bindings[0]);
      return;
    case KernelKind::Writer:
      writer_body(ctx, lm, bindings[0]);
      return;
    case KernelKind::TiledMatMul:
      tiled_matmul_body(ctx, lm, bindings[0], bindings[1], bindings[2],
                        std::get<MatMulParams>(params));
      return;
    case KernelKind::MatVecLocal:
      matvec_local_body(ctx, lm, bindings[0], bindings[1], bindings[2],
                        std::get<MatVecParams>(params));
      return;
    case KernelKind::Wipe:
      wipe_body(ctx, lm);
      return;
  }
}

void end_workgroup(const KernelId& id, gpu::LocalView& lm) {
  if (!id.self_zeroing) return;
  for (std::uint32_t i = 0; i < lm.size(); ++i) {
    lm.store(i, 0u);
  }
}

}  // namespace lmleak::kernels
