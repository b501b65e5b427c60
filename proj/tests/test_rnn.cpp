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

#include <array>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "mhred/rnn.hpp"

namespace mhred {
namespace {

using testing::check_gradients;
using testing::random_tensor;

GruParams random_gru(std::size_t in, std::size_t hid, std::mt19937_64& rng, double scale = 0.5) {
  GruParams p;
  for (Tensor* w : {&p.w_z, &p.w_r, &p.w_h}) *w = random_tensor({in, hid}, rng, scale);
  for (Tensor* u : {&p.u_z, &p.u_r, &p.u_h}) *u = random_tensor({hid, hid}, rng, scale);
  for (Tensor* b : {&p.b_z, &p.b_r, &p.b_h}) *b = random_tensor({1, hid}, rng, scale);
  return p;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(GruStep, ZeroWeightsKeepZeroState) {
  GruParams p = GruParams::zeros(3, 2);
  Tensor h = gru_step(Tensor::from({1, 3}, {0.3, -1.0, 2.0}), Tensor::zeros({1, 2}), p);
  EXPECT_EQ(values(h), (std::vector<double>{0.0, 0.0}));
}

TEST(GruStep, SaturatedUpdateGateFollowsCandidate) {
  GruParams p = GruParams::zeros(2, 2);
  for (double& b : p.b_z.mutable_data()) b = 1e6;
  Tensor x = Tensor::from({1, 2}, {0.01, -0.02});
  Tensor h_prev = Tensor::from({1, 2}, {0.7, -0.4});
  EXPECT_EQ(values(gru_step(x, h_prev, p)), (std::vector<double>{0.0, 0.0}));
  auto w = p.w_h.mutable_data();
  w[0] = 1.0;
  w[3] = 1.0;
  Tensor h = gru_step(x, h_prev, p);
  EXPECT_NEAR(h(0, 0), std::tanh(0.01), 1e-15);
  EXPECT_NEAR(h(0, 1), std::tanh(-0.02), 1e-15);
}

// Scalar re-derivation of one GRU step with weights laid out [in][hid].
struct ScalarGru {
  std::array<std::array<double, 2>, 2> wz, wr, wh, uz, ur, uh;
  std::array<double, 2> bz, br, bh;

  std::array<double, 2> step(std::array<double, 2> x, std::array<double, 2> h) const {
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    std::array<double, 2> z{}, r{}, out{};
    for (int j = 0; j < 2; ++j) {
      double az = bz[j], ar = br[j];
      for (int i = 0; i < 2; ++i) {
        az += x[i] * wz[i][j] + h[i] * uz[i][j];
        ar += x[i] * wr[i][j] + h[i] * ur[i][j];
      }
      z[j] = sig(az);
      r[j] = sig(ar);
    }
    for (int j = 0; j < 2; ++j) {
      double a = bh[j];
      for (int i = 0; i < 2; ++i) a += x[i] * wh[i][j] + r[i] * h[i] * uh[i][j];
      out[j] = (1.0 - z[j]) * h[j] + z[j] * std::tanh(a);
    }
    return out;
  }
};

TEST(GruStep, MatchesScalarOracle) {
  ScalarGru s{{{{0.5, -0.3}, {0.2, 0.8}}},
              {{{-0.6, 0.1}, {0.4, 0.3}}},
              {{{0.9, -0.7}, {0.25, 0.5}}},
              {{{0.1, 0.2}, {-0.3, 0.4}}},
              {{{0.7, -0.2}, {0.05, 0.6}}},
              {{{-0.45, 0.35}, {0.15, -0.85}}},
              {0.1, -0.2},
              {0.3, 0.05},
              {-0.1, 0.2}};
  auto flat = [](const std::array<std::array<double, 2>, 2>& m) {
    return Tensor::from({2, 2}, {m[0][0], m[0][1], m[1][0], m[1][1]});
  };
  GruParams p{flat(s.wz), flat(s.wr), flat(s.wh), flat(s.uz), flat(s.ur), flat(s.uh),
              Tensor::from({1, 2}, {s.bz[0], s.bz[1]}), Tensor::from({1, 2}, {s.br[0], s.br[1]}),
              Tensor::from({1, 2}, {s.bh[0], s.bh[1]})};
  Tensor h = gru_step(Tensor::from({1, 2}, {1.0, 0.0}), Tensor::from({1, 2}, {0.5, -0.5}), p);
  auto expect = s.step({1.0, 0.0}, {0.5, -0.5});
  EXPECT_NEAR(h(0, 0), expect[0], 1e-12);
  EXPECT_NEAR(h(0, 1), expect[1], 1e-12);
}

TEST(GruStep, DimensionMismatchThrows) {
  GruParams p = GruParams::zeros(3, 2);
  EXPECT_THROW(gru_step(Tensor::zeros({1, 4}), Tensor::zeros({1, 2}), p), DimensionError);
  EXPECT_THROW(gru_step(Tensor::zeros({1, 3}), Tensor::zeros({2, 2}), p), DimensionError);
}

TEST(GruStep, OutputStaysWithinConvexBound) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    GruParams p = random_gru(3, 4, rng, 3.0);
    Tensor x = random_tensor({2, 3}, rng, 5.0, false);
    Tensor h_prev = random_tensor({2, 4}, rng, 3.0, false);
    Tensor h = gru_step(x, h_prev, p);
    for (std::size_t i = 0; i < h.size(); ++i) {
      EXPECT_GE(h.data()[i], std::min(h_prev.data()[i], -1.0) - 1e-15);
      EXPECT_LE(h.data()[i], std::max(h_prev.data()[i], 1.0) + 1e-15);
    }
  }
}

TEST(GruStep, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(43);
  GruParams p = random_gru(3, 2, rng);
  Tensor x = random_tensor({2, 3}, rng);
  Tensor h = random_tensor({2, 2}, rng);
  auto named = p.named("gru");
  named.push_back({"x", x});
  named.push_back({"h", h});
  auto res = check_gradients([&] { return sum(mul(gru_step(x, h, p), gru_step(x, h, p))); }, named);
  EXPECT_LE(res.max_rel_error, 1e-6) << res.worst;
}

TEST(RunSequence, SingleStepIsGruStep) {
  std::mt19937_64 rng(47);
  GruParams p = random_gru(3, 2, rng);
  Tensor xs = random_tensor({2, 1, 3}, rng, 1.0, false);
  Tensor h0 = random_tensor({2, 2}, rng, 1.0, false);
  auto out = run_sequence(xs, h0, Tensor::full({2, 1}, 1.0), p);
  EXPECT_EQ(values(out.final), values(gru_step(reshape(xs, {2, 3}), h0, p)));
  EXPECT_EQ(out.states.shape(), (Shape{2, 1, 2}));
}

TEST(RunSequence, FullyMaskedKeepsInitialState) {
  std::mt19937_64 rng(53);
  GruParams p = random_gru(3, 2, rng);
  Tensor h0 = random_tensor({2, 2}, rng, 1.0, false);
  auto out = run_sequence(random_tensor({2, 4, 3}, rng, 1.0, false), h0, Tensor::zeros({2, 4}), p);
  EXPECT_EQ(values(out.final), values(h0));
}

TEST(RunSequence, PaddedRowMatchesUnpaddedRun) {
  std::mt19937_64 rng(59);
  GruParams p = random_gru(3, 4, rng);
  Tensor xs = random_tensor({2, 3, 3}, rng, 1.0, false);
  Tensor mask = Tensor::from({2, 3}, {1, 1, 1, 1, 0, 0});
  auto batched = run_sequence(xs, Tensor::zeros({2, 4}), mask, p);
  Tensor short_row = slice(slice(xs, 0, 1, 2), 1, 0, 1);
  auto alone = run_sequence(short_row, Tensor::zeros({1, 4}), Tensor::full({1, 1}, 1.0), p);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(batched.final(1, j), alone.final(0, j));
  Tensor long_row = slice(xs, 0, 0, 1);
  auto alone_long = run_sequence(long_row, Tensor::zeros({1, 4}), Tensor::full({1, 3}, 1.0), p);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(batched.final(0, j), alone_long.final(0, j));
}

TEST(RunSequence, ExtraMaskedTailNeverChangesFinal) {
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 20; ++trial) {
    GruParams p = random_gru(2, 3, rng);
    Tensor xs = random_tensor({1, 3, 2}, rng, 1.0, false);
    auto base = run_sequence(xs, Tensor::zeros({1, 3}), Tensor::full({1, 3}, 1.0), p);
    Tensor padded = concat({xs, random_tensor({1, 2, 2}, rng, 9.0, false)}, 1);
    auto more = run_sequence(padded, Tensor::zeros({1, 3}), Tensor::from({1, 5}, {1, 1, 1, 0, 0}), p);
    EXPECT_EQ(values(base.final), values(more.final));
  }
}

TEST(RunSequence, RejectsNonBinaryMask) {
  GruParams p = GruParams::zeros(2, 2);
  EXPECT_THROW(run_sequence(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 2}),
                            Tensor::from({1, 2}, {1.0, 0.5}), p),
               ContractError);
  EXPECT_THROW(run_sequence(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 2}), Tensor::zeros({1, 3}), p),
               DimensionError);
}

TEST(RunSequence, GradientThroughMaskedBatch) {
  std::mt19937_64 rng(67);
  GruParams p = random_gru(2, 3, rng);
  Tensor xs = random_tensor({2, 3, 2}, rng);
  Tensor mask = Tensor::from({2, 3}, {1, 1, 1, 1, 1, 0});
  auto named = p.named("gru");
  named.push_back({"xs", xs});
  auto res = check_gradients(
      [&] {
        auto out = run_sequence(xs, Tensor::zeros({2, 3}), mask, p);
        return sum(mul(out.states, out.states));
      },
      named);
  EXPECT_LE(res.max_rel_error, 1e-6) << res.worst;
}

TEST(BiGru, PalindromeGivesEqualDirectionFinals) {
  std::mt19937_64 rng(71);
  GruParams p = random_gru(2, 3, rng);
  Tensor a = random_tensor({1, 1, 2}, rng, 1.0, false);
  Tensor b = random_tensor({1, 1, 2}, rng, 1.0, false);
  Tensor xs = concat({a, b, a}, 1);
  Tensor mask = Tensor::full({1, 3}, 1.0);
  auto fwd = run_sequence(xs, Tensor::zeros({1, 3}), mask, p, false);
  auto bwd = run_sequence(xs, Tensor::zeros({1, 3}), mask, p, true);
  EXPECT_EQ(values(fwd.final), values(bwd.final));
  // With proj = [I; I] the combined final is twice either direction.
  Tensor proj = Tensor::zeros({6, 3});
  auto pd = proj.mutable_data();
  for (std::size_t i = 0; i < 3; ++i) pd[i * 3 + i] = pd[(i + 3) * 3 + i] = 1.0;
  auto bi = bigru_encode(xs, mask, p, p, proj);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(bi.final(0, j), 2.0 * fwd.final(0, j));
}

TEST(BiGru, SingleTokenStatesAreProjectedPair) {
  std::mt19937_64 rng(73);
  GruParams p = random_gru(2, 3, rng);
  Tensor proj = random_tensor({6, 3}, rng, 1.0, false);
  Tensor xs = random_tensor({1, 1, 2}, rng, 1.0, false);
  auto bi = bigru_encode(xs, Tensor::full({1, 1}, 1.0), p, p, proj);
  Tensor s = gru_step(reshape(xs, {1, 2}), Tensor::zeros({1, 3}), p);
  Tensor expect = matmul(concat({s, s}, 1), proj);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(bi.states.data()[j], expect(0, j), 1e-15);
}

TEST(BiGru, BadProjectionThrows) {
  GruParams p = GruParams::zeros(2, 3);
  EXPECT_THROW(bigru_encode(Tensor::zeros({1, 1, 2}), Tensor::full({1, 1}, 1.0), p, p,
                            Tensor::zeros({3, 3})),
               DimensionError);
}

TEST(BiGru, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(79);
  GruParams f = random_gru(2, 3, rng), b = random_gru(2, 3, rng);
  Tensor proj = random_tensor({6, 3}, rng);
  Tensor xs = random_tensor({2, 3, 2}, rng);
  Tensor mask = Tensor::from({2, 3}, {1, 1, 1, 1, 0, 0});
  auto named = f.named("fwd");
  for (auto& n : b.named("bwd")) named.push_back(n);
  named.push_back({"proj", proj});
  named.push_back({"xs", xs});
  auto res = check_gradients(
      [&] {
        auto out = bigru_encode(xs, mask, f, b, proj);
        return add(sum(tanh(out.states)), sum(mul(out.final, out.final)));
      },
      named);
  EXPECT_LE(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Attention, SingleKeyGetsAllWeight) {
  std::mt19937_64 rng(83);
  AttentionParams ap{random_tensor({3, 3}, rng, 1.0, false), random_tensor({6, 3}, rng, 1.0, false)};
  Tensor key = random_tensor({1, 1, 3}, rng, 1.0, false);
  Tensor q = random_tensor({1, 3}, rng, 1.0, false);
  auto out = luong_attend(q, key, Tensor::full({1, 1}, 1.0), ap);
  EXPECT_EQ(out.weights.item(), 1.0);
  Tensor expect = tanh(matmul(concat({reshape(key, {1, 3}), q}, 1), ap.w_c));
  EXPECT_EQ(values(out.attn_h), values(expect));
}

TEST(Attention, ZeroScoreMatrixGivesUniformOverUnmaskedKeys) {
  std::mt19937_64 rng(89);
  AttentionParams ap = AttentionParams::zeros(3, false);
  auto out = luong_attend(random_tensor({1, 3}, rng), random_tensor({1, 4, 3}, rng),
                          Tensor::from({1, 4}, {1, 0, 1, 1}), ap);
  EXPECT_NEAR(out.weights(0, 0), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(out.weights(0, 1), 0.0);
  EXPECT_NEAR(out.weights(0, 2), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(out.weights(0, 3), 1.0 / 3.0, 1e-15);
}

TEST(Attention, LogThreeScoreGapGivesQuarterThreeQuarters) {
  // query = [1, 0], W_a = I, keys [0, 0] and [ln 3, 0]: scores 0 and ln 3.
  AttentionParams ap{Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::zeros({4, 2})};
  Tensor keys = Tensor::from({1, 2, 2}, {0, 0, std::log(3.0), 0});
  auto out = luong_attend(Tensor::from({1, 2}, {1, 0}), keys, Tensor::full({1, 2}, 1.0), ap);
  EXPECT_NEAR(out.weights(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(out.weights(0, 1), 0.75, 1e-15);
}

TEST(Attention, WeightsFormMaskedDistribution) {
  std::mt19937_64 rng(97);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 100; ++trial) {
    AttentionParams ap{random_tensor({4, 4}, rng, 2.0, false), random_tensor({8, 4}, rng, 1.0, false)};
    std::vector<double> m(3 * 5);
    for (std::size_t b = 0; b < 3; ++b) {
      for (std::size_t s = 0; s < 5; ++s) m[b * 5 + s] = coin(rng) ? 1.0 : 0.0;
      m[b * 5 + (trial % 5)] = 1.0;
    }
    auto out = luong_attend(random_tensor({3, 4}, rng, 3.0, false),
                            random_tensor({3, 5, 4}, rng, 3.0, false), Tensor::from({3, 5}, m), ap);
    for (std::size_t b = 0; b < 3; ++b) {
      double total = 0.0;
      for (std::size_t s = 0; s < 5; ++s) {
        const double w = out.weights(b, s);
        EXPECT_GE(w, 0.0);
        if (m[b * 5 + s] == 0.0) {
          EXPECT_EQ(w, 0.0);
        }
        total += w;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Attention, AllMaskedRowIsContractError) {
  AttentionParams ap = AttentionParams::zeros(2, false);
  EXPECT_THROW(luong_attend(Tensor::zeros({2, 2}), Tensor::zeros({2, 3, 2}),
                            Tensor::from({2, 3}, {1, 0, 0, 0, 0, 0}), ap),
               ContractError);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(101);
  AttentionParams ap{random_tensor({3, 3}, rng), random_tensor({6, 3}, rng)};
  Tensor q = random_tensor({2, 3}, rng);
  Tensor keys = random_tensor({2, 4, 3}, rng);
  Tensor mask = Tensor::from({2, 4}, {1, 1, 0, 1, 0, 1, 1, 1});
  auto named = ap.named("attn");
  named.push_back({"q", q});
  named.push_back({"keys", keys});
  auto res = check_gradients(
      [&] {
        auto out = luong_attend(q, keys, mask, ap);
        return add(sum(mul(out.attn_h, out.attn_h)), sum(mul(out.weights, out.weights)));
      },
      named);
  EXPECT_LE(res.max_rel_error, 1e-6) << res.worst;
}

}  // namespace
}  // namespace mhred
