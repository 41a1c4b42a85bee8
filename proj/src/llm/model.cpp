// SPDX-License-Identifier: Apache-2.0
#include "lmleak/llm/model.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "lmleak/error.hpp"
#include "lmleak/rng.hpp"

namespace lmleak::llm {

namespace {

constexpr std::array<char, 4> kMagic = {'L', 'L', 'L', 'M'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> bytes{static_cast<char>(v & 0xff),
                            static_cast<char>((v >> 8) & 0xff),
                            static_cast<char>((v >> 16) & 0xff),
                            static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes.data(), bytes.size());
}

void put_f32(std::ostream& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  std::array<unsigned char, 4> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) {
    throw Error(ErrorCode::FormatError,
                std::string("truncated while reading ") + what);
  }
  return std::uint32_t{bytes[0]} | (std::uint32_t{bytes[1]} << 8) |
         (std::uint32_t{bytes[2]} << 16) | (std::uint32_t{bytes[3]} << 24);
}

float get_f32(std::istream& in, const char* what) {
  return std::bit_cast<float>(get_u32(in, what));
}

constexpr const char* kWords[] = {
    "the",   "of",    "and",   "to",     "in",    "is",     "was",   "for",
    "on",    "as",    "with",  "by",     "at",    "from",   "that",  "this",
    "it",    "are",   "be",    "or",     "an",    "not",    "can",   "has",
    "had",   "you",   "we",    "they",   "will",  "one",    "all",   "new",
    "more",  "time",  "data",  "work",   "first", "may",    "use",   "only",
    "over",  "her",   "his",   "their",  "its",   "about",  "out",   "up",
    "two",   "other", "into",  "than",   "some",  "could",  "them",  "these",
    "model", "token", "state", "layer",  "value", "memory", "query", "reply",
};
constexpr std::uint32_t kWordCount = sizeof(kWords) / sizeof(kWords[0]);

}  // namespace

std::string default_vocab_word(std::uint32_t index) {
  if (index < kWordCount) return kWords[index];
  return std::string(kWords[index % kWordCount]) + "_" +
         std::to_string(index / kWordCount);
}

void validate_model(const ToyModel& model) {
  const std::uint64_t v = model.vocab.size();
  const std::uint64_t d = model.hidden_dim;
  if (v == 0 || d == 0 || model.hidden_weights.empty()) {
    throw Error(ErrorCode::ValidationError,
                "model needs a vocabulary, a hidden dimension, and layers");
  }
  if (model.embed.size() != v * d) {
    throw Error(ErrorCode::ValidationError, "embedding matrix is not V x d");
  }
  if (model.output_weights.size() != v * d) {
    throw Error(ErrorCode::ValidationError, "output matrix is not V x d");
  }
  for (const auto& layer : model.hidden_weights) {
    if (layer.size() != d * d) {
      throw Error(ErrorCode::ValidationError, "hidden layer is not d x d");
    }
  }
  auto all_finite = [](const std::vector<float>& values) {
    for (float f : values) {
      if (!std::isfinite(f)) return false;
    }
    return true;
  };
  if (!all_finite(model.embed) || !all_finite(model.output_weights)) {
    throw Error(ErrorCode::ValidationError, "non-finite weight value");
  }
  for (const auto& layer : model.hidden_weights) {
    if (!all_finite(layer)) {
      throw Error(ErrorCode::ValidationError, "non-finite weight value");
    }
  }
}

void save_model(const ToyModel& model, const std::filesystem::path& path) {
  validate_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::FormatError, "cannot open " + path.string());
  }
  out.write(kMagic.data(), kMagic.size());
  put_u32(out, kVersion);
  put_u32(out, model.vocab_size());
  put_u32(out, model.hidden_dim);
  put_u32(out, model.layer_count());
  for (const std::string& word : model.vocab) {
    put_u32(out, static_cast<std::uint32_t>(word.size()));
    out.write(word.data(), static_cast<std::streamsize>(word.size()));
  }
  for (float f : model.embed) put_f32(out, f);
  for (const auto& layer : model.hidden_weights) {
    for (float f : layer) put_f32(out, f);
  }
  for (float f : model.output_weights) put_f32(out, f);
  out.flush();
  if (!out) {
    throw Error(ErrorCode::FormatError, "short write to " + path.string());
  }
}

ToyModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::FormatError, "cannot open " + path.string());
  }
  std::array<char, 4> magic;
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) {
    throw Error(ErrorCode::FormatError, "bad magic in " + path.string());
  }
  const std::uint32_t version = get_u32(in, "version");
  if (version != kVersion) {
    throw Error(ErrorCode::FormatError,
                "unsupported version " + std::to_string(version));
  }
  ToyModel model;
  model.model_id = path.stem().string();
  const std::uint32_t v = get_u32(in, "vocab size");
  model.hidden_dim = get_u32(in, "hidden dim");
  const std::uint32_t layers = get_u32(in, "layer count");
  if (v == 0 || model.hidden_dim == 0 || layers == 0) {
    throw Error(ErrorCode::FormatError, "degenerate shape in header");
  }
  // Guard against absurd headers before allocating.
  if (std::uint64_t{v} * model.hidden_dim > (1u << 26)) {
    throw Error(ErrorCode::FormatError, "header shape implausibly large");
  }
  model.vocab.reserve(v);
  for (std::uint32_t i = 0; i < v; ++i) {
    const std::uint32_t len = get_u32(in, "vocab entry length");
    if (len > 4096) {
      throw Error(ErrorCode::FormatError, "vocab entry implausibly long");
    }
    std::string word(len, '\0');
    in.read(word.data(), len);
    if (!in) {
      throw Error(ErrorCode::FormatError, "truncated vocab entry");
    }
    model.vocab.push_back(std::move(word));
  }
  const std::uint64_t d = model.hidden_dim;
  model.embed.resize(v * d);
  for (float& f : model.embed) f = get_f32(in, "embedding");
  model.hidden_weights.assign(layers, std::vector<float>(d * d));
  for (auto& layer : model.hidden_weights) {
    for (float& f : layer) f = get_f32(in, "hidden weight");
  }
  model.output_weights.resize(v * d);
  for (float& f : model.output_weights) f = get_f32(in, "output weight");
  in.peek();
  if (!in.eof()) {
    throw Error(ErrorCode::FormatError, "trailing bytes in " + path.string());
  }
  validate_model(model);
  return model;
}

double hidden_weight_difference(const ToyModel& a, const ToyModel& b) {
  std::uint64_t total = 0;
  std::uint64_t differing = 0;
  const std::size_t layers =
      std::min(a.hidden_weights.size(), b.hidden_weights.size());
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& la = a.hidden_weights[l];
    const auto& lb = b.hidden_weights[l];
    const std::size_t n = std::min(la.size(), lb.size());
    for (std::size_t i = 0; i < n; ++i) {
      ++total;
      if (std::bit_cast<std::uint32_t>(la[i]) !=
          std::bit_cast<std::uint32_t>(lb[i])) {
        ++differing;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(differing) / total;
}

namespace {

// Uniform nonzero float in [-scale, scale); exact zeros are resampled so that
// a weight word is never mistaken for padding.
float random_weight(Rng& rng, float scale) {
  for (;;) {
    const float f = rng.next_float(-scale, scale);
    if (f != 0.0f) return f;
  }
}

ToyModel random_model(std::uint32_t vocab_size, std::uint32_t hidden_dim,
                      std::uint32_t layer_count, Rng& rng) {
  ToyModel model;
  model.hidden_dim = hidden_dim;
  model.vocab.reserve(vocab_size);
  for (std::uint32_t i = 0; i < vocab_size; ++i) {
    model.vocab.push_back(default_vocab_word(i));
  }
  const std::uint64_t d = hidden_dim;
  // Hidden weights are scaled so repeated tanh layers neither die out nor
  // saturate at the desk-scale dimensions.
  const float hidden_scale = 1.5f / std::sqrt(static_cast<float>(hidden_dim));
  model.embed.resize(std::uint64_t{vocab_size} * d);
  for (float& f : model.embed) f = random_weight(rng, 1.0f);
  model.hidden_weights.assign(layer_count, std::vector<float>(d * d));
  for (auto& layer : model.hidden_weights) {
    for (float& f : layer) f = random_weight(rng, hidden_scale);
  }
  model.output_weights.resize(std::uint64_t{vocab_size} * d);
  for (float& f : model.output_weights) f = random_weight(rng, 1.0f);
  return model;
}

}  // namespace

std::vector<ToyModel> build_zoo(std::uint32_t count, std::uint32_t vocab_size,
                                std::uint32_t hidden_dim,
                                std::uint32_t layer_count,
                                std::uint64_t seed) {
  if (count == 0 || vocab_size == 0 || hidden_dim == 0 || layer_count == 0) {
    throw Error(ErrorCode::ValidationError, "zoo parameters must be positive");
  }
  Rng rng(seed);
  std::vector<ToyModel> zoo;
  zoo.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    for (int attempt = 0;; ++attempt) {
      ToyModel candidate =
          random_model(vocab_size, hidden_dim, layer_count, rng);
      bool distinct = true;
      for (const ToyModel& existing : zoo) {
        if (hidden_weight_difference(candidate, existing) < 0.01) {
          distinct = false;
          break;
        }
      }
      if (distinct) {
        candidate.model_id = "m" + std::to_string(i);
        zoo.push_back(std::move(candidate));
        break;
      }
      if (attempt > 16) {
        throw Error(ErrorCode::ValidationError,
                    "could not draw a sufficiently distinct model");
      }
    }
  }
  return zoo;
}

}  // namespace lmleak::llm
