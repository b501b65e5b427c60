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

// GRU cells, masked sequence runners and Luong "general" attention.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mhred/tensor.hpp"

namespace mhred {

/// Weights of one GRU cell. Input maps are [in, hid], recurrent maps [hid, hid],
/// biases [1, hid].
struct GruParams {
  Tensor w_z, w_r, w_h;
  Tensor u_z, u_r, u_h;
  Tensor b_z, b_r, b_h;

  static GruParams zeros(std::size_t in_dim, std::size_t hid, bool requires_grad = true) {
    GruParams p;
    for (Tensor* w : {&p.w_z, &p.w_r, &p.w_h}) *w = Tensor::zeros({in_dim, hid}, requires_grad);
    for (Tensor* u : {&p.u_z, &p.u_r, &p.u_h}) *u = Tensor::zeros({hid, hid}, requires_grad);
    for (Tensor* b : {&p.b_z, &p.b_r, &p.b_h}) *b = Tensor::zeros({1, hid}, requires_grad);
    return p;
  }

  std::size_t input_dim() const { return w_z.dim(0); }
  std::size_t hidden_dim() const { return u_z.dim(0); }

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const {
    return {{prefix + ".w_z", w_z}, {prefix + ".w_r", w_r}, {prefix + ".w_h", w_h},
            {prefix + ".u_z", u_z}, {prefix + ".u_r", u_r}, {prefix + ".u_h", u_h},
            {prefix + ".b_z", b_z}, {prefix + ".b_r", b_r}, {prefix + ".b_h", b_h}};
  }
};

/// Luong attention with the general score: w_a [hid, hid], output map w_c [2*hid, hid].
struct AttentionParams {
  Tensor w_a;
  Tensor w_c;

  static AttentionParams zeros(std::size_t hid, bool requires_grad = true) {
    return {Tensor::zeros({hid, hid}, requires_grad), Tensor::zeros({2 * hid, hid}, requires_grad)};
  }

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const {
    return {{prefix + ".w_a", w_a}, {prefix + ".w_c", w_c}};
  }
};

/// One GRU update; the reset gate scales h_prev before the recurrent candidate map.
inline Tensor gru_step(const Tensor& x, const Tensor& h_prev, const GruParams& p) {
  if (x.ndim() != 2 || h_prev.ndim() != 2 || x.dim(0) != h_prev.dim(0) ||
      x.dim(1) != p.input_dim() || h_prev.dim(1) != p.hidden_dim())
    throw DimensionError("gru_step: x " + shape_str(x.shape()) + ", h " +
                         shape_str(h_prev.shape()) + " for cell [" +
                         std::to_string(p.input_dim()) + " -> " +
                         std::to_string(p.hidden_dim()) + "]");
  Tensor z = sigmoid(add_bias(add(matmul(x, p.w_z), matmul(h_prev, p.u_z)), p.b_z));
  Tensor r = sigmoid(add_bias(add(matmul(x, p.w_r), matmul(h_prev, p.u_r)), p.b_r));
  Tensor cand = tanh(add_bias(add(matmul(x, p.w_h), matmul(mul(r, h_prev), p.u_h)), p.b_h));
  return add(mul(affine(z, -1.0, 1.0), h_prev), mul(z, cand));
}

struct SequenceOutput {
  Tensor states;  // [batch, T, hid]
  Tensor final;   // [batch, hid]
};

/// Runs a GRU over xs[batch, T, in]. Positions with mask 0 carry the state forward
/// unchanged, so `final` is the state after each row's last unmasked step.
/// With `reverse`, steps run from T-1 down to 0 and states keep their positions.
inline SequenceOutput run_sequence(const Tensor& xs, const Tensor& h0, const Tensor& mask,
                                   const GruParams& p, bool reverse = false) {
  if (xs.ndim() != 3 || mask.ndim() != 2 || mask.dim(0) != xs.dim(0) ||
      mask.dim(1) != xs.dim(1))
    throw DimensionError("run_sequence: xs " + shape_str(xs.shape()) + " with mask " +
                         shape_str(mask.shape()));
  const std::size_t batch = xs.dim(0), steps = xs.dim(1);
  std::vector<Tensor> states(steps);
  std::vector<double> column(batch);
  Tensor h = h0;
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t t = reverse ? steps - 1 - k : k;
    bool any = false, all = true;
    for (std::size_t b = 0; b < batch; ++b) {
      column[b] = mask(b, t);
      if (column[b] != 0.0 && column[b] != 1.0)
        throw ContractError("run_sequence: mask entries must be 0 or 1");
      any = any || column[b] != 0.0;
      all = all && column[b] != 0.0;
    }
    if (any) {
      Tensor stepped = gru_step(step_at(xs, t), h, p);
      h = all ? stepped : select_rows(column, stepped, h);
    }
    states[t] = h;
  }
  return {stack_steps(states), h};
}

/// Bidirectional encoding; both directions start from zero and their outputs are
/// concatenated and projected back to hid through `proj` [2*hid, hid].
inline SequenceOutput bigru_encode(const Tensor& xs, const Tensor& mask, const GruParams& p_fwd,
                                   const GruParams& p_bwd, const Tensor& proj) {
  const std::size_t hid = p_fwd.hidden_dim();
  if (p_bwd.hidden_dim() != hid || p_bwd.input_dim() != p_fwd.input_dim() || proj.ndim() != 2 ||
      proj.dim(0) != 2 * hid || proj.dim(1) != hid)
    throw DimensionError("bigru_encode: inconsistent direction cells or projection " +
                         shape_str(proj.shape()));
  const std::size_t batch = xs.dim(0), steps = xs.dim(1);
  Tensor h0 = Tensor::zeros({batch, hid});
  SequenceOutput fwd = run_sequence(xs, h0, mask, p_fwd, false);
  SequenceOutput bwd = run_sequence(xs, h0, mask, p_bwd, true);
  Tensor both = reshape(concat({fwd.states, bwd.states}, 2), {batch * steps, 2 * hid});
  Tensor states = reshape(matmul(both, proj), {batch, steps, hid});
  Tensor final = matmul(concat({fwd.final, bwd.final}, 1), proj);
  return {states, final};
}

struct AttentionOutput {
  Tensor attn_h;   // [batch, hid]
  Tensor weights;  // [batch, S]
};

inline constexpr double kMaskedScore = -1e9;

/// Luong attention: score = query * w_a * key^T, masked keys get kMaskedScore before the
/// softmax, attn_h = tanh([context, query] * w_c).
inline AttentionOutput luong_attend(const Tensor& query, const Tensor& keys, const Tensor& mask,
                                    const AttentionParams& ap) {
  if (query.ndim() != 2 || keys.ndim() != 3 || mask.ndim() != 2 || keys.dim(0) != query.dim(0) ||
      keys.dim(2) != query.dim(1) || mask.dim(0) != keys.dim(0) || mask.dim(1) != keys.dim(1))
    throw DimensionError("luong_attend: query " + shape_str(query.shape()) + ", keys " +
                         shape_str(keys.shape()) + ", mask " + shape_str(mask.shape()));
  const std::size_t batch = keys.dim(0), len = keys.dim(1);
  std::vector<double> bias(batch * len, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t s = 0; s < len; ++s) {
      if (mask(b, s) == 0.0)
        bias[b * len + s] = kMaskedScore;
      else
        any = true;
    }
    if (!any)
      throw ContractError("luong_attend: every key is masked in batch row " + std::to_string(b));
  }
  Tensor scores = batched_dot(keys, matmul(query, ap.w_a));
  Tensor weights = softmax_rows(add(scores, Tensor::from({batch, len}, std::move(bias))));
  Tensor context = weighted_sum(weights, keys);
  Tensor attn_h = tanh(matmul(concat({context, query}, 1), ap.w_c));
  return {attn_h, weights};
}

}  // namespace mhred
