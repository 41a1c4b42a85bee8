// SPDX-License-Identifier: Apache-2.0
#include "lmleak/llm/victim.hpp"

#include <bit>
#include <cmath>

#include "lmleak/error.hpp"

namespace lmleak::llm {

namespace {

std::vector<std::uint32_t> to_words(const std::vector<float>& floats) {
  std::vector<std::uint32_t> words(floats.size());
  for (std::size_t i = 0; i < floats.size(); ++i) {
    words[i] = std::bit_cast<std::uint32_t>(floats[i]);
  }
  return words;
}

}  // namespace

VictimSession::VictimSession(gpu::GpuMachine& machine, ToyModel model,
                             std::vector<std::uint32_t> prompt,
                             VictimOptions options)
    : machine_(&machine), model_(std::move(model)), options_(options) {
  validate_model(model_);
  if (options_.tile == 0) {
    throw Error(ErrorCode::ValidationError, "tile width must be positive");
  }
  if (prompt.empty()) {
    throw Error(ErrorCode::ValidationError, "prompt cannot be empty");
  }
  for (std::uint32_t id : prompt) {
    if (id >= model_.vocab_size()) {
      throw Error(ErrorCode::ValidationError,
                  "prompt token " + std::to_string(id) + " outside vocabulary");
    }
  }
  const std::uint32_t bank = machine.config().local_words_per_cu;
  if (model_.hidden_dim > bank) {
    throw Error(ErrorCode::AllocationTooLarge,
                "hidden state does not fit a local bank");
  }
  if (2u * options_.tile * options_.tile > bank) {
    throw Error(ErrorCode::AllocationTooLarge,
                "two weight tiles do not fit a local bank");
  }

  const std::uint32_t d = model_.hidden_dim;
  padded_dim_ = (d + options_.tile - 1) / options_.tile * options_.tile;

  const gpu::ProcessId pid = options_.process;
  for (std::uint32_t l = 0; l < model_.layer_count(); ++l) {
    layer_weights_.push_back(
        machine.create_buffer(pid, padded_dim_ * padded_dim_));
  }
  state_block_ = machine.create_buffer(pid, padded_dim_ * options_.tile);
  layer_out_ = machine.create_buffer(pid, padded_dim_ * options_.tile);
  output_weights_ = machine.create_buffer(pid, model_.vocab_size() * d);
  state_vec_ = machine.create_buffer(pid, d);
  logits_ = machine.create_buffer(pid, model_.vocab_size());
  upload_weights();

  // Initial hidden state: mean of the prompt token embeddings, accumulated
  // in prompt order.
  state_.assign(d, 0.0f);
  for (std::uint32_t id : prompt) {
    for (std::uint32_t i = 0; i < d; ++i) {
      state_[i] += model_.embed[std::size_t{id} * d + i];
    }
  }
  const float denom = static_cast<float>(prompt.size());
  for (float& f : state_) f /= denom;
}

void VictimSession::upload_weights() {
  const std::uint32_t d = model_.hidden_dim;
  // Hidden weights go up zero-padded to padded_dim x padded_dim so the tile
  // width always divides the operand extents.
  std::vector<float> padded(std::size_t{padded_dim_} * padded_dim_, 0.0f);
  for (std::uint32_t l = 0; l < model_.layer_count(); ++l) {
    std::fill(padded.begin(), padded.end(), 0.0f);
    const auto& layer = model_.hidden_weights[l];
    for (std::uint32_t r = 0; r < d; ++r) {
      for (std::uint32_t c = 0; c < d; ++c) {
        padded[std::size_t{r} * padded_dim_ + c] = layer[std::size_t{r} * d + c];
      }
    }
    machine_->write_buffer(options_.process, layer_weights_[l], 0,
                           to_words(padded));
  }
  machine_->write_buffer(options_.process, output_weights_, 0,
                         to_words(model_.output_weights));
}

void VictimSession::upload_state_block() {
  // The state vector as a padded_dim x tile block: column 0 carries the
  // state, the remaining columns are zero padding.
  std::vector<std::uint32_t> block(std::size_t{padded_dim_} * options_.tile,
                                   0u);
  for (std::uint32_t i = 0; i < model_.hidden_dim; ++i) {
    block[std::size_t{i} * options_.tile] = std::bit_cast<std::uint32_t>(state_[i]);
  }
  machine_->write_buffer(options_.process, state_block_, 0, block);
}

std::uint32_t VictimSession::generate_step(const KernelBoundaryHook& hook) {
  const std::uint32_t d = model_.hidden_dim;
  const std::uint32_t tile = options_.tile;
  kernels::KernelId matmul{kernels::KernelKind::TiledMatMul, false};
  kernels::KernelId matvec{kernels::KernelKind::MatVecLocal, false};
  if (options_.self_zeroing) {
    matmul = kernels::self_zeroing_wrap(matmul);
    matvec = kernels::self_zeroing_wrap(matvec);
  }

  for (std::uint32_t l = 0; l < model_.layer_count(); ++l) {
    upload_state_block();
    gpu::KernelDispatch dispatch;
    dispatch.kernel = matmul;
    dispatch.params =
        kernels::MatMulParams{padded_dim_, padded_dim_, tile, tile};
    dispatch.num_workgroups = padded_dim_ / tile;
    dispatch.workgroup_size = tile * tile;
    dispatch.local_alloc_words = 2 * tile * tile;
    dispatch.bindings = {layer_weights_[l], state_block_, layer_out_};
    machine_->run_until(machine_->submit(options_.process, dispatch));
    if (hook) hook(VictimDispatchKind::HiddenLayer, l);

    const std::vector<std::uint32_t> out =
        machine_->read_buffer(options_.process, layer_out_);
    for (std::uint32_t i = 0; i < d; ++i) {
      state_[i] = std::tanh(std::bit_cast<float>(out[std::size_t{i} * tile]));
    }
  }

  machine_->write_buffer(options_.process, state_vec_, 0,
                         to_words(state_));
  gpu::KernelDispatch dispatch;
  dispatch.kernel = matvec;
  dispatch.params = kernels::MatVecParams{model_.vocab_size(), d};
  dispatch.num_workgroups =
      std::min(machine_->config().num_compute_units,
               std::max(1u, (model_.vocab_size() + 15) / 16));
  dispatch.workgroup_size = 16;
  // The output projection claims the whole bank: the cached vector sits at
  // offset 0 and the explicit zero padding runs to the end of the bank.
  dispatch.local_alloc_words = machine_->config().local_words_per_cu;
  dispatch.bindings = {output_weights_, state_vec_, logits_};
  machine_->run_until(machine_->submit(options_.process, dispatch));
  if (hook) hook(VictimDispatchKind::OutputLayer, model_.layer_count());

  const std::vector<std::uint32_t> logit_words =
      machine_->read_buffer(options_.process, logits_);
  std::uint32_t best = 0;
  float best_value = std::bit_cast<float>(logit_words[0]);
  for (std::uint32_t i = 1; i < logit_words.size(); ++i) {
    const float value = std::bit_cast<float>(logit_words[i]);
    if (value > best_value) {
      best_value = value;
      best = i;
    }
  }

  generated_.push_back(best);
  for (std::uint32_t i = 0; i < d; ++i) {
    state_[i] = model_.embed[std::size_t{best} * d + i];
  }
  return best;
}

std::vector<std::uint32_t> VictimSession::generate(
    std::size_t n_tokens, const KernelBoundaryHook& hook) {
  std::vector<std::uint32_t> tokens;
  tokens.reserve(n_tokens);
  for (std::size_t i = 0; i < n_tokens; ++i) {
    tokens.push_back(generate_step(hook));
  }
  return tokens;
}

}  // namespace lmleak::llm
