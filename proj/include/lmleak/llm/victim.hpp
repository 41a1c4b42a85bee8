// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lmleak/gpu/machine.hpp"
#include "lmleak/llm/model.hpp"

namespace lmleak::llm {

enum class VictimDispatchKind { HiddenLayer, OutputLayer };

// Invoked after each victim dispatch has executed, before the next one is
// submitted. `index` is the dispatch ordinal within the current token step:
// 0..L-1 for the hidden layers, L for the output projection. This is the
// interleaving point other processes get scheduled at.
using KernelBoundaryHook =
    std::function<void(VictimDispatchKind, std::uint32_t index)>;

struct VictimOptions {
  gpu::ProcessId process = 1;
  std::uint32_t tile = 4;
  // Wrap every kernel so it scrubs its own local allocation before exit.
  bool self_zeroing = false;
  std::uint64_t seed = 0;
};

// One generation session pinned to one machine. Each token step submits
// exactly L TiledMatMul dispatches (one per hidden layer, with the running
// state as a d x 1 block padded to the tile width) followed by one
// MatVecLocal dispatch for the output projection, which deliberately claims
// the whole local bank. The squashing nonlinearity runs host-side between
// dispatches, as does greedy argmax decoding (ties to the lowest token id).
class VictimSession {
 public:
  VictimSession(gpu::GpuMachine& machine, ToyModel model,
                std::vector<std::uint32_t> prompt, VictimOptions options = {});

  std::uint32_t generate_step(const KernelBoundaryHook& hook = {});
  std::vector<std::uint32_t> generate(std::size_t n_tokens,
                                      const KernelBoundaryHook& hook = {});

  const ToyModel& model() const { return model_; }
  const std::vector<std::uint32_t>& generated() const { return generated_; }
  const std::vector<float>& hidden_state() const { return state_; }
  std::uint32_t dispatches_per_step() const {
    return model_.layer_count() + 1;
  }

 private:
  void upload_weights();
  void upload_state_block();

  gpu::GpuMachine* machine_;
  ToyModel model_;
  VictimOptions options_;
  std::uint32_t padded_dim_ = 0;  // hidden_dim rounded up to the tile width

  std::vector<gpu::BufferHandle> layer_weights_;
  gpu::BufferHandle state_block_ = 0;   // padded_dim x tile operand
  gpu::BufferHandle layer_out_ = 0;     // padded_dim x tile result
  gpu::BufferHandle output_weights_ = 0;
  gpu::BufferHandle state_vec_ = 0;     // hidden_dim words
  gpu::BufferHandle logits_ = 0;        // vocab_size words

  std::vector<float> state_;  // current hidden state, length hidden_dim
  std::vector<std::uint32_t> generated_;
};

}  // namespace lmleak::llm
