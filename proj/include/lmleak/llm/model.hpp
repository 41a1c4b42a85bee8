// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace lmleak::llm {

// A linear toy language model, small enough that a whole zoo of them fits in
// memory: token embeddings, a stack of square hidden layers, and an output
// projection back to vocabulary logits. Decoding is greedy argmax with ties
// resolved to the lowest token id, so generation is fully deterministic.
struct ToyModel {
  std::string model_id;               // not serialized; taken from the file stem
  std::vector<std::string> vocab;     // size V
  std::uint32_t hidden_dim = 0;       // d
  std::vector<float> embed;           // V x d, row-major
  std::vector<std::vector<float>> hidden_weights;  // L matrices, each d x d
  std::vector<float> output_weights;  // V x d, row-major

  std::uint32_t vocab_size() const {
    return static_cast<std::uint32_t>(vocab.size());
  }
  std::uint32_t layer_count() const {
    return static_cast<std::uint32_t>(hidden_weights.size());
  }
};

// Rejects inconsistent shapes and non-finite weights (ValidationError).
void validate_model(const ToyModel& model);

// Binary model format, little-endian throughout:
//   "LLLM" magic, u32 version,
//   u32 V, u32 d, u32 L,
//   V x (u32 byte length, UTF-8 bytes) vocab entries,
//   embed (V*d f32), hidden layers (L * d*d f32), output (V*d f32).
// Floats are stored bit-exactly; save followed by load is an identity.
void save_model(const ToyModel& model, const std::filesystem::path& path);
ToyModel load_model(const std::filesystem::path& path);

// Deterministically builds `count` random models that share (V, d, L) but
// have independent weights. Any pair of models must differ in at least 1% of
// hidden-weight entries; with independent random draws that holds trivially,
// but it is enforced rather than assumed.
std::vector<ToyModel> build_zoo(std::uint32_t count, std::uint32_t vocab_size,
                                std::uint32_t hidden_dim,
                                std::uint32_t layer_count, std::uint64_t seed);

// Fraction of hidden-weight entries (bitwise) in which the two models differ.
double hidden_weight_difference(const ToyModel& a, const ToyModel& b);

// Built-in word list used for generated vocabularies; ids past the list get a
// numeric suffix.
std::string default_vocab_word(std::uint32_t index);

}  // namespace lmleak::llm
