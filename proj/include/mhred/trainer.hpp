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

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhred/data.hpp"
#include "mhred/error.hpp"
#include "mhred/model.hpp"

namespace mhred {

struct TrainConfig {
  double learning_rate = 0.0004;
  double clip_norm = 5.0;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 20;
  std::size_t patience = 3;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Optimizer step budget across epochs; 0 means unlimited.
  std::size_t max_steps = 0;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (max_epochs < 1) throw ConfigError("max epochs must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"clip_norm", c.clip_norm},
       {"batch_size", c.batch_size},       {"max_epochs", c.max_epochs},
       {"patience", c.patience},           {"seed", c.seed},
       {"beta1", c.beta1},                 {"beta2", c.beta2},
       {"epsilon", c.epsilon},             {"max_steps", c.max_steps}};
}

/// Global L2 norm over every gradient entry.
inline double grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const Tensor& p : params)
    for (double g : p.grad()) sq += g * g;
  return std::sqrt(sq);
}

/// Rescales all gradients by clip_norm / norm when the global norm exceeds clip_norm.
/// Returns the factor applied (1 when unclipped).
inline double clip_gradients(const std::vector<Tensor>& params, double clip_norm) {
  const double norm = grad_norm(params);
  if (!(norm > clip_norm)) return 1.0;
  const double factor = clip_norm / norm;
  for (Tensor p : params)
    for (double& g : p.mutable_grad()) g *= factor;
  return factor;
}

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;

  static AdamState for_params(const std::vector<Tensor>& params) {
    AdamState s;
    for (const Tensor& p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
    return s;
  }
};

/// Bias-corrected Adam update; gradients are zeroed afterwards.
inline void adam_step(const std::vector<Tensor>& params, AdamState& state, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match parameters");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto value = p.mutable_data();
    auto grad = p.mutable_grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      value[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
      grad[i] = 0.0;
    }
  }
}

/// Consecutive batches of at most `batch_size` indices, in the given order.
inline std::vector<std::vector<std::size_t>> chunk_indices(const std::vector<std::size_t>& order,
                                                           std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  return out;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Fisher-Yates with engine() % (i + 1), so the order depends only on the engine stream.
inline void seeded_shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

/// Token-weighted mean cross-entropy over a split.
inline double mean_loss(const ModelParams& params, const ModelConfig& cfg,
                        const std::vector<EncodedExample>& examples, const FeatureStore& features,
                        std::size_t batch_size = 32) {
  if (examples.empty()) throw ContractError("mean_loss: empty split");
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& idx : chunk_indices(iota_indices(examples.size()), batch_size)) {
    Batch batch = make_batch(examples, idx, features, cfg);
    DecodeOutput out = decode_teacher_forced(encode_context(batch, params, cfg), batch, params, cfg);
    total += out.loss.item() * double(out.token_count);
    tokens += out.token_count;
  }
  return tokens ? total / double(tokens) : 0.0;
}

/// Fraction of gold target tokens (EOS included) that are the teacher-forced argmax.
inline double token_accuracy(const ModelParams& params, const ModelConfig& cfg,
                             const std::vector<EncodedExample>& examples,
                             const FeatureStore& features, std::size_t batch_size = 32) {
  NoGradGuard no_grad;
  std::size_t correct = 0, total = 0;
  for (const auto& idx : chunk_indices(iota_indices(examples.size()), batch_size)) {
    Batch batch = make_batch(examples, idx, features, cfg);
    DecodeOutput out = decode_teacher_forced(encode_context(batch, params, cfg), batch, params, cfg);
    const std::size_t len = batch.target_len;
    for (std::size_t t = 0; t < out.logits.size(); ++t) {
      const Tensor& lg = out.logits[t];
      const std::size_t v = lg.dim(1);
      for (std::size_t b = 0; b < batch.size; ++b) {
        if (batch.target_mask[b * len + t + 1] == 0.0) continue;
        auto row = lg.data().subspan(b * v, v);
        std::size_t best = 0;
        for (std::size_t j = 1; j < v; ++j)
          if (row[j] > row[best]) best = j;
        correct += best == batch.target[b * len + t + 1];
        ++total;
      }
    }
  }
  return total ? double(correct) / double(total) : 0.0;
}

/// One generated token list per example, in order.
inline std::vector<std::vector<std::size_t>> generate_responses(
    const ModelParams& params, const ModelConfig& cfg, const std::vector<EncodedExample>& examples,
    const FeatureStore& features, const GenerateOptions& opts = {}, std::size_t batch_size = 32) {
  NoGradGuard no_grad;
  std::vector<std::vector<std::size_t>> out;
  for (const auto& idx : chunk_indices(iota_indices(examples.size()), batch_size)) {
    Batch batch = make_batch(examples, idx, features, cfg);
    for (auto& r : generate(encode_context(batch, params, cfg), params, cfg, opts))
      out.push_back(std::move(r));
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double learning_rate = 0.0;
  double clipped_fraction = 0.0;
  std::size_t steps = 0;  // cumulative optimizer steps
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"valid_loss", r.valid_loss},
          {"lr", r.learning_rate},
          {"clipped_fraction", r.clipped_fraction},
          {"steps", r.steps}};
}

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  std::size_t steps = 0;
  bool early_stopped = false;
};

/// Mini-batch training with clipping and Adam. On return `params` holds the values from
/// the epoch with the lowest validation loss.
inline FitResult fit(ModelParams& params, const ModelConfig& cfg,
                     const std::vector<EncodedExample>& train,
                     const std::vector<EncodedExample>& valid, const FeatureStore& features,
                     const TrainConfig& tc,
                     const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  tc.validate();
  if (train.empty() || valid.empty()) throw ContractError("fit: train and valid splits must be nonempty");
  const std::vector<Tensor> tensors = params.tensors();
  AdamState adam = AdamState::for_params(tensors);
  ModelParams best = params.clone(cfg);
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order = iota_indices(train.size());
  FitResult result;
  std::size_t since_best = 0;
  params.zero_grad();

  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    seeded_shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t token_sum = 0, clipped = 0, batches = 0;
    const auto chunks = chunk_indices(order, tc.batch_size);
    for (std::size_t bi = 0; bi < chunks.size(); ++bi) {
      if (tc.max_steps && result.steps >= tc.max_steps) break;
      Batch batch = make_batch(train, chunks[bi], features, cfg);
      DecodeOutput out = decode_teacher_forced(encode_context(batch, params, cfg), batch, params, cfg);
      const double loss = out.loss.item();
      if (!std::isfinite(loss))
        throw TrainingError("non-finite loss " + std::to_string(loss) + " at epoch " +
                            std::to_string(epoch) + ", batch " + std::to_string(bi));
      if (out.token_count) backward(out.loss);
      if (clip_gradients(tensors, tc.clip_norm) < 1.0) ++clipped;
      adam_step(tensors, adam, tc);
      ++result.steps;
      ++batches;
      loss_sum += loss * double(out.token_count);
      token_sum += out.token_count;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = token_sum ? loss_sum / double(token_sum) : 0.0;
    rec.valid_loss = mean_loss(params, cfg, valid, features, tc.batch_size);
    rec.learning_rate = tc.learning_rate;
    rec.clipped_fraction = batches ? double(clipped) / double(batches) : 0.0;
    rec.steps = result.steps;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (!std::isfinite(rec.valid_loss))
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    if (rec.valid_loss < result.best_valid_loss) {
      result.best_valid_loss = rec.valid_loss;
      result.best_epoch = epoch;
      params.copy_values_to(best);
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      result.early_stopped = true;
      break;
    }
    if (tc.max_steps && result.steps >= tc.max_steps) break;
  }
  best.copy_values_to(params);
  return result;
}

}  // namespace mhred
