// Copyright 2026 The mhred Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Toy configurations and random examples shared by the model-level tests.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "mhred/data.hpp"
#include "mhred/model.hpp"

namespace mhred::testing {

/// emb = hid = 8, img_dim = 12, K = 2, vocab = 11, cxt = 2.
inline ModelConfig toy_config(bool multimodal = true, bool attention = true) {
  ModelConfig c;
  c.vocab_size = 11;
  c.emb_dim = 8;
  c.hid_dim = 8;
  c.img_dim = 12;
  c.image_slots = 2;
  c.context_size = 2;
  c.multimodal = multimodal;
  c.use_attention = attention;
  c.max_decode_len = 8;
  return c;
}

struct RandomData {
  std::vector<EncodedExample> examples;
  FeatureStore features;
};

/// `n` random examples. Context turns hold 0..max_len tokens and 0..K+1 images (so both
/// empty turns and truncation occur); targets hold 1..max_len tokens.
inline RandomData random_examples(const ModelConfig& cfg, std::size_t n, std::mt19937_64& rng,
                                  std::size_t max_len = 4) {
  RandomData d{{}, FeatureStore(cfg.img_dim)};
  std::uniform_int_distribution<std::size_t> word(tok::kReserved, cfg.vocab_size - 1);
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<std::size_t> imgs(0, cfg.image_slots + 1);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::size_t next_image = 0;
  for (std::size_t i = 0; i < n; ++i) {
    EncodedExample e;
    for (std::size_t t = 0; t < cfg.context_size; ++t) {
      std::vector<std::size_t> ids(len(rng));
      for (auto& id : ids) id = word(rng);
      e.turn_tokens.push_back(ids);
      std::vector<std::string> images(imgs(rng));
      for (auto& im : images) {
        im = "img" + std::to_string(next_image++);
        std::vector<double> f(cfg.img_dim);
        for (double& x : f) x = gauss(rng);
        d.features.add(im, std::move(f));
      }
      e.turn_images.push_back(images);
    }
    e.target.push_back(tok::kBos);
    const std::size_t tl = 1 + len(rng) % max_len;
    for (std::size_t k = 0; k < tl; ++k) e.target.push_back(word(rng));
    e.target.push_back(tok::kEos);
    d.examples.push_back(std::move(e));
  }
  return d;
}

inline Batch batch_of(const RandomData& d, const ModelConfig& cfg) {
  std::vector<std::size_t> idx(d.examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(d.examples, idx, d.features, cfg);
}

/// Loss of `batch` under `params`, as a differentiable scalar.
inline Tensor batch_loss(const Batch& batch, const ModelParams& params, const ModelConfig& cfg) {
  return decode_teacher_forced(encode_context(batch, params, cfg), batch, params, cfg).loss;
}

}  // namespace mhred::testing
