#pragma once

#include "r2d2/config.hpp"
#include "r2d2/model.hpp"

#include <random>
#include <vector>

namespace r2d2::testing {

/// d=8, two layers everywhere, vocab 32, 8×8 images in 4×4 patches.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.text_layers = 2;
  c.image_layers = 2;
  c.cross_layers = 2;
  c.ffn_multiplier = 2;
  c.image_patch_size = 4;
  c.image_resolution = 8;
  c.vocab_size = 32;
  c.max_text_len = 10;
  c.queue_capacity = 8;
  c.init_std = 0.3;
  return c;
}

inline std::vector<ImageInput> random_images(const ModelConfig& c, size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<ImageInput> out(n);
  for (auto& im : out) {
    im.channels = c.image_channels;
    im.height = im.width = c.image_resolution;
    im.pixels.resize(static_cast<size_t>(im.channels * im.height * im.width));
    for (auto& p : im.pixels) p = u(rng);
  }
  return out;
}

/// [CLS] followed by `min_words`..`max_words` random word ids.
inline std::vector<TokenSequence> random_texts(const ModelConfig& c, size_t n, uint64_t seed, int min_words = 3,
                                               int max_words = 6) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(min_words, max_words);
  std::uniform_int_distribution<int32_t> word(kFirstWordId, c.vocab_size - 1);
  std::vector<TokenSequence> out;
  for (size_t i = 0; i < n; ++i) {
    std::vector<int32_t> ids{kClsId};
    const int w = len(rng);
    for (int j = 0; j < w; ++j) ids.push_back(word(rng));
    out.push_back(TokenSequence::from_ids(ids));
  }
  return out;
}

template <class T>
std::vector<const T*> pointers(const std::vector<T>& v) {
  std::vector<const T*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

}  // namespace r2d2::testing
