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

// Multimodal hierarchical encoder-decoder.
//
// Each context turn is read by an utterance encoder (uni- or bidirectional GRU)
// starting from a zero state. In multimodal mode the turn's image slots are
// concatenated and passed through one linear layer, and the text and image
// encodings are concatenated as the input of a turn-level context GRU that also
// starts from zero. The decoder GRU starts from the final context state and,
// when attention is enabled, attends over the token states of the context
// window with input feeding.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhred/error.hpp"
#include "mhred/rnn.hpp"
#include "mhred/tensor.hpp"

namespace mhred {

/// Reserved vocabulary ids.
namespace tok {
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kEos = 2;
inline constexpr std::size_t kUnk = 3;
inline constexpr std::size_t kReserved = 4;
}  // namespace tok

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t emb_dim = 512;
  std::size_t hid_dim = 512;
  std::size_t img_dim = 4096;
  std::size_t image_slots = 5;  // K
  std::size_t context_size = 2;
  bool multimodal = true;
  bool use_attention = true;
  bool bidirectional_encoder = true;
  bool tied_embeddings = true;
  // Attend over every context turn's tokens, or only the last turn's.
  bool attend_all_turns = true;
  // Output length limit, counting the terminating EOS.
  std::size_t max_decode_len = 30;
  // Longest teacher-forced target (BOS and EOS included).
  std::size_t max_target_len = 256;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(emb_dim, "emb_dim");
    positive(hid_dim, "hid_dim");
    positive(img_dim, "img_dim");
    positive(image_slots, "image_slots");
    positive(context_size, "context_size");
    positive(max_decode_len, "max_decode_len");
    positive(max_target_len, "max_target_len");
    if (vocab_size <= tok::kReserved)
      throw ConfigError("model config: vocab_size must exceed the reserved ids");
  }

  /// Table-style label, e.g. "M-HRED-attn".
  std::string variant_name() const {
    return std::string(multimodal ? "M" : "T") + "-HRED" + (use_attention ? "-attn" : "");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},
                     {"emb_dim", c.emb_dim},
                     {"hid_dim", c.hid_dim},
                     {"img_dim", c.img_dim},
                     {"image_slots", c.image_slots},
                     {"context_size", c.context_size},
                     {"multimodal", c.multimodal},
                     {"use_attention", c.use_attention},
                     {"bidirectional_encoder", c.bidirectional_encoder},
                     {"tied_embeddings", c.tied_embeddings},
                     {"attend_all_turns", c.attend_all_turns},
                     {"max_decode_len", c.max_decode_len},
                     {"max_target_len", c.max_target_len}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("emb_dim").get_to(c.emb_dim);
  j.at("hid_dim").get_to(c.hid_dim);
  j.at("img_dim").get_to(c.img_dim);
  j.at("image_slots").get_to(c.image_slots);
  j.at("context_size").get_to(c.context_size);
  j.at("multimodal").get_to(c.multimodal);
  j.at("use_attention").get_to(c.use_attention);
  j.at("bidirectional_encoder").get_to(c.bidirectional_encoder);
  j.at("tied_embeddings").get_to(c.tied_embeddings);
  j.at("attend_all_turns").get_to(c.attend_all_turns);
  j.at("max_decode_len").get_to(c.max_decode_len);
  j.at("max_target_len").get_to(c.max_target_len);
}

/// Every learnable tensor of the model. Optional groups are left undefined when the
/// configuration does not use them.
struct ModelParams {
  Tensor embedding;         // [vocab, emb], encoder (and decoder when tied)
  Tensor dec_embedding;     // [vocab, emb], only when embeddings are untied
  GruParams enc_fwd;        // utterance encoder
  GruParams enc_bwd;        // reverse direction, bidirectional only
  Tensor enc_proj;          // [2*hid, hid], bidirectional only
  Tensor img_weight;        // l_img: [K*img_dim, hid], multimodal only
  Tensor img_bias;          // [1, hid]
  GruParams context;        // input 2*hid (multimodal) or hid
  GruParams decoder;        // input emb (+hid with input feeding)
  AttentionParams attention;
  Tensor out_weight;        // [hid, vocab]
  Tensor out_bias;          // [1, vocab]

  /// All-zero parameters with the shapes implied by `cfg`.
  static ModelParams zeros(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t h = cfg.hid_dim, e = cfg.emb_dim, v = cfg.vocab_size;
    ModelParams p;
    p.embedding = Tensor::zeros({v, e}, true);
    if (!cfg.tied_embeddings) p.dec_embedding = Tensor::zeros({v, e}, true);
    p.enc_fwd = GruParams::zeros(e, h);
    if (cfg.bidirectional_encoder) {
      p.enc_bwd = GruParams::zeros(e, h);
      p.enc_proj = Tensor::zeros({2 * h, h}, true);
    }
    if (cfg.multimodal) {
      p.img_weight = Tensor::zeros({cfg.image_slots * cfg.img_dim, h}, true);
      p.img_bias = Tensor::zeros({1, h}, true);
    }
    p.context = GruParams::zeros(cfg.multimodal ? 2 * h : h, h);
    p.decoder = GruParams::zeros(cfg.use_attention ? e + h : e, h);
    if (cfg.use_attention) p.attention = AttentionParams::zeros(h);
    p.out_weight = Tensor::zeros({h, v}, true);
    p.out_bias = Tensor::zeros({1, v}, true);
    return p;
  }

  /// Uniform(-scale, scale) initialization from `seed`, visiting parameters in named() order.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.08) {
    ModelParams p = zeros(cfg);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (auto& [name, t] : p.named())
      for (double& x : t.mutable_data()) x = dist(rng);
    return p;
  }

  /// Stable name -> tensor list; the tensors share storage with this object.
  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto push = [&out](std::vector<std::pair<std::string, Tensor>> group) {
      for (auto& g : group)
        if (g.second.defined()) out.push_back(std::move(g));
    };
    push({{"embedding", embedding}, {"dec_embedding", dec_embedding}});
    push(enc_fwd.named("encoder.fwd"));
    if (enc_bwd.w_z.defined()) push(enc_bwd.named("encoder.bwd"));
    push({{"encoder.proj", enc_proj}, {"image.weight", img_weight}, {"image.bias", img_bias}});
    push(context.named("context"));
    push(decoder.named("decoder"));
    if (attention.w_a.defined()) push(attention.named("attention"));
    push({{"output.weight", out_weight}, {"output.bias", out_bias}});
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (Tensor t : tensors()) t.zero_grad();
  }

  /// Deep copy of values; the copy requires grad like the original.
  ModelParams clone(const ModelConfig& cfg) const {
    ModelParams p = zeros(cfg);
    copy_values_to(p);
    return p;
  }

  void copy_values_to(ModelParams& dst) const {
    auto src = named();
    auto out = dst.named();
    if (src.size() != out.size()) throw ContractError("copy_values_to: parameter sets differ");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].first != out[i].first || src[i].second.shape() != out[i].second.shape())
        throw ContractError("copy_values_to: mismatch at " + src[i].first);
      auto s = src[i].second.data();
      std::copy(s.begin(), s.end(), out[i].second.mutable_data().begin());
    }
  }

  const Tensor& decoder_embedding() const {
    return dec_embedding.defined() ? dec_embedding : embedding;
  }
};

/// One context turn of a batch: right-padded token ids plus the slot-padded image row.
struct TurnBatch {
  std::vector<std::size_t> tokens;  // [batch * length], row-major
  std::size_t length = 0;
  Tensor mask;    // [batch, length], 1 on real tokens
  Tensor images;  // [batch, K*img_dim]; undefined in text-only batches
};

struct Batch {
  std::size_t size = 0;
  std::vector<TurnBatch> turns;        // oldest first, exactly context_size
  std::vector<std::size_t> target;     // [size * target_len]: BOS w1 .. wn EOS PAD..
  std::size_t target_len = 0;
  std::vector<double> target_mask;     // [size * target_len], 1 up to and including EOS
};

/// Packs up to K feature vectors into one zero-padded [K*img_dim] row. Extra vectors
/// beyond K are dropped; the return flag reports the truncation.
inline std::pair<std::vector<double>, bool> pack_image_slots(
    const std::vector<std::vector<double>>& features, std::size_t slots, std::size_t img_dim) {
  std::vector<double> row(slots * img_dim, 0.0);
  const std::size_t used = std::min(features.size(), slots);
  for (std::size_t k = 0; k < used; ++k) {
    if (features[k].size() != img_dim)
      throw DimensionError("image feature " + std::to_string(k) + " has length " +
                           std::to_string(features[k].size()) + ", expected " +
                           std::to_string(img_dim));
    std::copy(features[k].begin(), features[k].end(), row.begin() + k * img_dim);
  }
  return {std::move(row), features.size() > slots};
}

/// h_img for a batch of slot-packed image rows [batch, K*img_dim].
inline Tensor image_encoding(const Tensor& packed, const ModelParams& params) {
  return add_bias(matmul(packed, params.img_weight), params.img_bias);
}

/// Aggregated image encoding of one turn's features, [1, hid].
inline Tensor aggregate_images(const std::vector<std::vector<double>>& features,
                               const ModelParams& params, const ModelConfig& cfg) {
  auto [row, truncated] = pack_image_slots(features, cfg.image_slots, cfg.img_dim);
  if (truncated)
    std::clog << "warning: " << features.size() << " images in one turn, keeping the first "
              << cfg.image_slots << "\n";
  const std::size_t width = row.size();
  return image_encoding(Tensor::from({1, width}, std::move(row)), params);
}

struct UtteranceEncoding {
  Tensor states;   // [batch, T, hid]
  Tensor final;    // [batch, hid]
  Tensor initial;  // the zero state the encoder starts from
  Tensor mask;     // [batch, T]; empty rows expose their single step
};

/// Encodes one right-padded utterance batch. Rows with no unmasked token are empty
/// utterances: they take one step on the padding token, whose embedding is zero.
inline UtteranceEncoding encode_utterance(std::span<const std::size_t> tokens,
                                          const Tensor& mask, const ModelParams& params,
                                          const ModelConfig& cfg) {
  if (mask.ndim() != 2 || tokens.size() != mask.size())
    throw DimensionError("encode_utterance: " + std::to_string(tokens.size()) +
                         " tokens for mask " + shape_str(mask.shape()));
  const std::size_t batch = mask.dim(0), len = mask.dim(1);
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  std::vector<double> eff(mask.data().begin(), mask.data().end());
  for (std::size_t b = 0; b < batch; ++b) {
    bool empty = true;
    for (std::size_t t = 0; t < len; ++t) empty = empty && eff[b * len + t] == 0.0;
    if (empty) {
      eff[b * len] = 1.0;
      ids[b * len] = tok::kPad;
    }
  }
  for (std::size_t id : ids)
    if (id >= cfg.vocab_size)
      throw IndexError("encode_utterance: token id " + std::to_string(id) + " >= vocab " +
                       std::to_string(cfg.vocab_size));
  Tensor eff_mask = Tensor::from({batch, len}, std::move(eff));
  Tensor xs = reshape(embedding_lookup(params.embedding, ids, tok::kPad), {batch, len, cfg.emb_dim});
  Tensor h0 = Tensor::zeros({batch, cfg.hid_dim});
  SequenceOutput out =
      cfg.bidirectional_encoder
          ? bigru_encode(xs, eff_mask, params.enc_fwd, params.enc_bwd, params.enc_proj)
          : run_sequence(xs, h0, eff_mask, params.enc_fwd);
  return {out.states, out.final, h0, eff_mask};
}

struct EncodedContext {
  std::size_t batch = 0;
  std::vector<Tensor> text_initial;    // per turn, the encoder's starting state
  std::vector<Tensor> text_final;      // per turn h_text [batch, hid]
  std::vector<Tensor> image_enc;       // per turn h_img; empty in text-only mode
  std::vector<Tensor> token_states;    // per turn [batch, T_n, hid]
  std::vector<Tensor> token_masks;     // per turn [batch, T_n]
  Tensor context_initial;              // h_cxt before the first turn
  std::vector<Tensor> context_states;  // h_cxt after each turn
  Tensor context_final;                // h_cxt after the last turn
  Tensor memory;                       // attention keys [batch, S, hid]
  Tensor memory_mask;                  // [batch, S]
};

inline EncodedContext encode_context(const Batch& batch, const ModelParams& params,
                                     const ModelConfig& cfg) {
  if (batch.turns.size() != cfg.context_size)
    throw ContractError("encode_context: " + std::to_string(batch.turns.size()) +
                        " turns for context size " + std::to_string(cfg.context_size));
  EncodedContext enc;
  enc.batch = batch.size;
  enc.context_initial = Tensor::zeros({batch.size, cfg.hid_dim});
  Tensor h = enc.context_initial;
  for (const TurnBatch& turn : batch.turns) {
    UtteranceEncoding u = encode_utterance(turn.tokens, turn.mask, params, cfg);
    Tensor input = u.final;
    if (cfg.multimodal) {
      if (!turn.images.defined() || turn.images.dim(0) != batch.size ||
          turn.images.dim(1) != cfg.image_slots * cfg.img_dim)
        throw DimensionError("encode_context: multimodal turn needs images [" +
                             std::to_string(batch.size) + "," +
                             std::to_string(cfg.image_slots * cfg.img_dim) + "]");
      Tensor h_img = image_encoding(turn.images, params);
      enc.image_enc.push_back(h_img);
      input = concat({u.final, h_img}, 1);
    }
    h = gru_step(input, h, params.context);
    enc.text_initial.push_back(u.initial);
    enc.text_final.push_back(u.final);
    enc.token_states.push_back(u.states);
    enc.token_masks.push_back(u.mask);
    enc.context_states.push_back(h);
  }
  enc.context_final = h;
  if (cfg.attend_all_turns) {
    enc.memory = concat(enc.token_states, 1);
    enc.memory_mask = concat(enc.token_masks, 1);
  } else {
    enc.memory = enc.token_states.back();
    enc.memory_mask = enc.token_masks.back();
  }
  return enc;
}

struct DecoderState {
  Tensor hidden;  // [batch, hid]
  Tensor feed;    // previous attentional output [batch, hid]; undefined without attention
};

inline DecoderState initial_decoder_state(const EncodedContext& enc, const ModelConfig& cfg) {
  DecoderState s{enc.context_final, Tensor()};
  if (cfg.use_attention) s.feed = Tensor::zeros({enc.batch, cfg.hid_dim});
  return s;
}

/// Advances the decoder by one token per row and returns vocabulary logits.
inline Tensor decoder_step(std::span<const std::size_t> prev_ids, DecoderState& state,
                           const Tensor& memory, const Tensor& memory_mask,
                           const ModelParams& params, const ModelConfig& cfg) {
  Tensor x = embedding_lookup(params.decoder_embedding(), prev_ids, tok::kPad);
  if (cfg.use_attention) x = concat({x, state.feed}, 1);
  state.hidden = gru_step(x, state.hidden, params.decoder);
  Tensor out = state.hidden;
  if (cfg.use_attention) {
    out = luong_attend(state.hidden, memory, memory_mask, params.attention).attn_h;
    state.feed = out;
  }
  return add_bias(matmul(out, params.out_weight), params.out_bias);
}

struct DecodeOutput {
  Tensor loss;                 // masked mean token cross-entropy
  std::vector<Tensor> logits;  // one [batch, vocab] per predicted position
  Tensor decoder_initial;      // hidden state before the first step
  std::size_t token_count = 0;
};

inline void check_target(const Batch& batch, const ModelConfig& cfg) {
  if (batch.target_len < 2)
    throw ContractError("decode: target needs at least BOS and EOS");
  if (batch.target_len > cfg.max_target_len)
    throw ContractError("decode: target length " + std::to_string(batch.target_len) +
                        " exceeds limit " + std::to_string(cfg.max_target_len));
  if (batch.target.size() != batch.size * batch.target_len ||
      batch.target_mask.size() != batch.target.size())
    throw DimensionError("decode: target buffers do not match batch shape");
}

/// Teacher-forced decoding: step t reads gold token t and predicts gold token t+1.
inline DecodeOutput decode_teacher_forced(const EncodedContext& enc, const Batch& batch,
                                          const ModelParams& params, const ModelConfig& cfg) {
  check_target(batch, cfg);
  const std::size_t b = batch.size, len = batch.target_len, steps = len - 1;
  DecodeOutput out;
  DecoderState state = initial_decoder_state(enc, cfg);
  out.decoder_initial = state.hidden;
  std::vector<std::size_t> prev(b), gold(steps * b);
  std::vector<double> gold_mask(steps * b);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < b; ++i) {
      prev[i] = batch.target[i * len + t];
      gold[t * b + i] = batch.target[i * len + t + 1];
      gold_mask[t * b + i] = batch.target_mask[i * len + t + 1];
      if (gold_mask[t * b + i] != 0.0) ++out.token_count;
    }
    out.logits.push_back(decoder_step(prev, state, enc.memory, enc.memory_mask, params, cfg));
  }
  out.loss = softmax_cross_entropy(concat(out.logits, 0), gold, gold_mask);
  return out;
}

/// log softmax of one logits row.
inline std::vector<double> log_softmax_row(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j] - lse;
  return out;
}

/// Per-row log P(target | context): summed log-probabilities of the gold tokens after BOS,
/// through EOS.
inline std::vector<double> sequence_log_prob(const EncodedContext& enc, const Batch& batch,
                                             const ModelParams& params, const ModelConfig& cfg) {
  check_target(batch, cfg);
  NoGradGuard no_grad;
  const std::size_t b = batch.size, len = batch.target_len;
  DecoderState state = initial_decoder_state(enc, cfg);
  std::vector<double> total(b, 0.0);
  std::vector<std::size_t> prev(b);
  for (std::size_t t = 0; t + 1 < len; ++t) {
    for (std::size_t i = 0; i < b; ++i) prev[i] = batch.target[i * len + t];
    Tensor logits = decoder_step(prev, state, enc.memory, enc.memory_mask, params, cfg);
    const std::size_t v = logits.dim(1);
    for (std::size_t i = 0; i < b; ++i) {
      if (batch.target_mask[i * len + t + 1] == 0.0) continue;
      auto lp = log_softmax_row(logits.data().subspan(i * v, v));
      total[i] += lp[batch.target[i * len + t + 1]];
    }
  }
  return total;
}

enum class DecodeMode { greedy, beam };

struct GenerateOptions {
  DecodeMode mode = DecodeMode::greedy;
  std::size_t beam_width = 1;
};

namespace detail {

// Highest log-probability token; ties go to the lowest id.
inline std::size_t argmax_token(const std::vector<double>& lp) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < lp.size(); ++j)
    if (lp[j] > lp[best]) best = j;
  return best;
}

// Copies batch row `row` of t, `times` times, into a graph-free tensor.
inline Tensor repeat_row(const Tensor& t, std::size_t row, std::size_t times) {
  Shape s = t.shape();
  const std::size_t stride = t.size() / s[0];
  std::vector<double> v;
  v.reserve(times * stride);
  for (std::size_t k = 0; k < times; ++k)
    v.insert(v.end(), t.data().begin() + row * stride, t.data().begin() + (row + 1) * stride);
  s[0] = times;
  return Tensor::from(std::move(s), std::move(v));
}

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  Shape s = t.shape();
  const std::size_t stride = t.size() / s[0];
  std::vector<double> v;
  v.reserve(rows.size() * stride);
  for (std::size_t r : rows)
    v.insert(v.end(), t.data().begin() + r * stride, t.data().begin() + (r + 1) * stride);
  s[0] = rows.size();
  return Tensor::from(std::move(s), std::move(v));
}

inline std::vector<std::vector<std::size_t>> greedy_decode(const EncodedContext& enc,
                                                           const ModelParams& params,
                                                           const ModelConfig& cfg) {
  const std::size_t b = enc.batch;
  std::vector<std::vector<std::size_t>> out(b);
  std::vector<char> done(b, 0);
  std::vector<std::size_t> prev(b, tok::kBos);
  DecoderState state = initial_decoder_state(enc, cfg);
  for (std::size_t step = 0; step + 1 < cfg.max_decode_len; ++step) {
    Tensor logits = decoder_step(prev, state, enc.memory, enc.memory_mask, params, cfg);
    const std::size_t v = logits.dim(1);
    bool all_done = true;
    for (std::size_t i = 0; i < b; ++i) {
      if (done[i]) {
        prev[i] = tok::kPad;
        continue;
      }
      const std::size_t next = argmax_token(log_softmax_row(logits.data().subspan(i * v, v)));
      if (next == tok::kEos) {
        done[i] = 1;
        prev[i] = tok::kPad;
      } else {
        out[i].push_back(next);
        prev[i] = next;
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return out;
}

struct Hypothesis {
  std::vector<std::size_t> tokens;
  double score = 0.0;
};

inline std::vector<std::size_t> beam_decode_row(const EncodedContext& enc, std::size_t row,
                                                std::size_t width, const ModelParams& params,
                                                const ModelConfig& cfg) {
  Tensor memory = repeat_row(enc.memory, row, 1);
  Tensor memory_mask = repeat_row(enc.memory_mask, row, 1);
  DecoderState state{repeat_row(enc.context_final, row, 1), Tensor()};
  if (cfg.use_attention) state.feed = Tensor::zeros({1, cfg.hid_dim});

  std::vector<Hypothesis> alive{{{}, 0.0}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; !alive.empty(); ++step) {
    if (step + 1 >= cfg.max_decode_len) {
      // Length limit reached: surviving hypotheses end here without an EOS term.
      for (auto& h : alive) finished.push_back(std::move(h));
      break;
    }
    std::vector<std::size_t> prev;
    for (const auto& h : alive) prev.push_back(h.tokens.empty() ? tok::kBos : h.tokens.back());
    Tensor logits = decoder_step(prev, state, memory, memory_mask, params, cfg);
    const std::size_t v = logits.dim(1);

    struct Candidate {
      double total, local;
      std::size_t hyp, token;
    };
    std::vector<Candidate> cands;
    cands.reserve(alive.size() * v);
    for (std::size_t i = 0; i < alive.size(); ++i) {
      auto lp = log_softmax_row(logits.data().subspan(i * v, v));
      for (std::size_t j = 0; j < v; ++j) cands.push_back({alive[i].score + lp[j], lp[j], i, j});
    }
    const std::size_t keep = std::min(width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.total != b.total) return a.total > b.total;
                        if (a.local != b.local) return a.local > b.local;
                        if (a.token != b.token) return a.token < b.token;
                        return a.hyp < b.hyp;
                      });
    std::vector<Hypothesis> next;
    std::vector<std::size_t> parents;
    for (std::size_t c = 0; c < keep; ++c) {
      Hypothesis h{alive[cands[c].hyp].tokens, cands[c].total};
      if (cands[c].token == tok::kEos) {
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[c].token);
        next.push_back(std::move(h));
        parents.push_back(cands[c].hyp);
      }
    }
    alive = std::move(next);
    if (alive.empty()) break;
    double best_finished = -std::numeric_limits<double>::infinity();
    for (const auto& f : finished) best_finished = std::max(best_finished, f.score);
    double best_alive = -std::numeric_limits<double>::infinity();
    for (const auto& a : alive) best_alive = std::max(best_alive, a.score);
    // Scores only decrease, so no live hypothesis can overtake a better finished one.
    if (best_finished >= best_alive) break;
    state.hidden = gather_rows(state.hidden, parents);
    if (cfg.use_attention) state.feed = gather_rows(state.feed, parents);
    if (memory.dim(0) != alive.size()) {
      memory = repeat_row(enc.memory, row, alive.size());
      memory_mask = repeat_row(enc.memory_mask, row, alive.size());
    }
  }
  const Hypothesis* best = &finished.front();
  for (const auto& f : finished)
    if (f.score > best->score) best = &f;
  return best->tokens;
}

}  // namespace detail

/// Generates one response per batch row, conditioning each step on the previous output.
/// Returned token lists exclude BOS and EOS.
inline std::vector<std::vector<std::size_t>> generate(const EncodedContext& enc,
                                                      const ModelParams& params,
                                                      const ModelConfig& cfg,
                                                      const GenerateOptions& opts = {}) {
  NoGradGuard no_grad;
  if (opts.mode == DecodeMode::greedy) return detail::greedy_decode(enc, params, cfg);
  if (opts.beam_width == 0) throw ContractError("generate: beam width must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t r = 0; r < enc.batch; ++r)
    out.push_back(detail::beam_decode_row(enc, r, opts.beam_width, params, cfg));
  return out;
}

}  // namespace mhred
