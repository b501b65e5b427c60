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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "mhred/checkpoint.hpp"
#include "mhred/trainer.hpp"

namespace mhred {
namespace {

namespace fs = std::filesystem;
using testing::random_examples;
using testing::toy_config;

Tensor with_grad(std::vector<double> g) {
  Tensor t = Tensor::zeros({g.size()}, true);
  std::copy(g.begin(), g.end(), t.mutable_grad().begin());
  return t;
}

std::vector<double> grad_of(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

std::vector<std::vector<double>> values_of(const ModelParams& p) {
  std::vector<std::vector<double>> out;
  for (const Tensor& t : p.tensors()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

fs::path temp_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("mhred_test_trainer_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

TEST(Clipping, ScalarAboveThresholdIsScaledToThreshold) {
  Tensor t = with_grad({2.5});
  EXPECT_DOUBLE_EQ(clip_gradients({t}, 1.0), 0.4);
  EXPECT_DOUBLE_EQ(t.grad()[0], 1.0);
}

TEST(Clipping, NormAtThresholdIsUntouched) {
  Tensor t = with_grad({3, 4});
  EXPECT_EQ(clip_gradients({t}, 5.0), 1.0);
  EXPECT_EQ(grad_of(t), (std::vector<double>{3, 4}));
}

TEST(Clipping, GlobalNormSpansTensors) {
  Tensor a = with_grad({6}), b = with_grad({8});
  EXPECT_DOUBLE_EQ(clip_gradients({a, b}, 5.0), 0.5);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 4.0);
}

TEST(Clipping, NeverIncreasesNormAndKeepsDirection) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 3.0);
  std::uniform_real_distribution<double> c(0.1, 10.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> v(1 + trial % 7);
    for (double& x : v) x = g(rng);
    Tensor t = with_grad(v);
    const double before = grad_norm({t});
    const double clip = c(rng);
    clip_gradients({t}, clip);
    const double after = grad_norm({t});
    EXPECT_LE(after, before + 1e-12);
    EXPECT_LE(after, std::max(clip, 0.0) * (1 + 1e-12) + (before <= clip ? before : 0.0));
    for (std::size_t i = 0; i < v.size(); ++i)
      EXPECT_NEAR(t.grad()[i] * before, v[i] * after, 1e-9 * (1 + std::abs(v[i]) * before));
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor p = Tensor::from({3}, {1, -2, 3}, true);
  AdamState s = AdamState::for_params({p});
  TrainConfig tc;
  for (int i = 0; i < 10; ++i) adam_step({p}, s, tc);
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{1, -2, 3}));
}

TEST(Adam, FirstStepMovesEachCoordinateByLearningRate) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 2.0);
  TrainConfig tc;
  tc.learning_rate = 0.01;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor p = Tensor::zeros({5}, true);
    std::vector<double> grads(5);
    for (double& x : grads) x = g(rng);
    std::copy(grads.begin(), grads.end(), p.mutable_grad().begin());
    AdamState s = AdamState::for_params({p});
    adam_step({p}, s, tc);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_NEAR(p.data()[i], -std::copysign(0.01, grads[i]), 1e-8 / std::abs(grads[i]) * 0.01 + 1e-12);
      EXPECT_EQ(p.grad()[i], 0.0);
    }
  }
}

TEST(Adam, ConvergesOnQuadratic) {
  const std::vector<double> target{1.5, -0.5, 3.0, 0.0};
  Tensor x = Tensor::zeros({4}, true);
  AdamState s = AdamState::for_params({x});
  TrainConfig tc;
  tc.learning_rate = 0.01;
  for (int step = 0; step < 2000; ++step) {
    for (std::size_t i = 0; i < 4; ++i) x.mutable_grad()[i] = 2.0 * (x.data()[i] - target[i]);
    adam_step({x}, s, tc);
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.data()[i], target[i], 1e-2);
  EXPECT_THROW(adam_step({x, x}, s, tc), ContractError);
}

TEST(TrainConfig, RejectsInvalidValues) {
  TrainConfig tc;
  tc.patience = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = {};
  tc.clip_norm = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = {};
  tc.learning_rate = -1;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Batching, ChunksCoverEveryIndexOnce) {
  auto chunks = chunk_indices(iota_indices(7), 3);
  ASSERT_EQ(chunks.size(), 3u);
  EXPECT_EQ(chunks[2], (std::vector<std::size_t>{6}));
  std::mt19937_64 a(5), b(5);
  auto u = iota_indices(50), v = iota_indices(50);
  seeded_shuffle(u, a);
  seeded_shuffle(v, b);
  EXPECT_EQ(u, v);
  std::sort(u.begin(), u.end());
  EXPECT_EQ(u, iota_indices(50));
}

struct FitFixture : ::testing::Test {
  ModelConfig cfg = toy_config();
  std::mt19937_64 rng{17};
  testing::RandomData train = random_examples(cfg, 24, rng);
  testing::RandomData valid_data = random_examples(cfg, 8, rng);
  FeatureStore features = merged();

  // random_examples names images img0.. on every call, so the validation ids get a prefix.
  FeatureStore merged() {
    FeatureStore fs(cfg.img_dim);
    for (const auto& e : train.examples)
      for (const auto& turn : e.turn_images)
        for (const auto& id : turn) fs.add(id, *train.features.find(id));
    for (auto& e : valid_data.examples)
      for (auto& turn : e.turn_images)
        for (auto& id : turn) {
          fs.add("v" + id, *valid_data.features.find(id));
          id = "v" + id;
        }
    return fs;
  }
};

TEST_F(FitFixture, SameSeedGivesIdenticalRuns) {
  TrainConfig tc;
  tc.learning_rate = 0.01;
  tc.batch_size = 5;
  tc.max_epochs = 3;
  ModelParams a = ModelParams::init(cfg, 1), b = ModelParams::init(cfg, 1);
  auto ra = fit(a, cfg, train.examples, valid_data.examples, features, tc);
  auto rb = fit(b, cfg, train.examples, valid_data.examples, features, tc);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    EXPECT_EQ(ra.history[i].train_loss, rb.history[i].train_loss);
    EXPECT_EQ(ra.history[i].valid_loss, rb.history[i].valid_loss);
  }
  EXPECT_EQ(values_of(a), values_of(b));
  EXPECT_EQ(ra.history.back().steps, 3u * 5u);
}

TEST_F(FitFixture, ZeroLearningRateKeepsParametersAndStopsOnPatience) {
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.batch_size = 8;
  tc.patience = 2;
  ModelParams p = ModelParams::init(cfg, 2);
  const auto before = values_of(p);
  auto r = fit(p, cfg, train.examples, valid_data.examples, features, tc);
  EXPECT_EQ(values_of(p), before);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.history.size(), 3u);
}

// The callback snapshots the parameters after every epoch; fit must hand back the
// snapshot from the epoch with the lowest validation loss.
TEST_F(FitFixture, RestoresTheBestEpoch) {
  for (std::size_t patience : {1u, 2u}) {
    TrainConfig tc;
    tc.learning_rate = 0.05;
    tc.batch_size = 4;
    tc.max_epochs = 12;
    tc.patience = patience;
    ModelParams p = ModelParams::init(cfg, 3);
    std::vector<std::vector<std::vector<double>>> snapshots;
    auto r = fit(p, cfg, train.examples, valid_data.examples, features, tc,
                 [&](const EpochRecord&) { snapshots.push_back(values_of(p)); });
    ASSERT_EQ(snapshots.size(), r.history.size());
    std::size_t argmin = 0;
    for (std::size_t i = 1; i < r.history.size(); ++i)
      if (r.history[i].valid_loss < r.history[argmin].valid_loss) argmin = i;
    EXPECT_EQ(r.best_epoch, argmin + 1);
    EXPECT_EQ(r.best_valid_loss, r.history[argmin].valid_loss);
    EXPECT_EQ(values_of(p), snapshots[argmin]);
    if (r.early_stopped) {
      EXPECT_EQ(r.history.size(), r.best_epoch + patience);
    }
    EXPECT_DOUBLE_EQ(mean_loss(p, cfg, valid_data.examples, features, 8), r.best_valid_loss);
  }
}

// Validation targets use a word the training targets never contain, so each epoch of
// fitting makes them less likely.
TEST_F(FitFixture, StopsWhenValidationLossRises) {
  const std::size_t unseen = cfg.vocab_size - 1;
  auto fitted = train.examples;
  for (auto& e : fitted)
    for (std::size_t k = 1; k + 1 < e.target.size(); ++k)
      if (e.target[k] == unseen) e.target[k] = tok::kReserved;
  auto held_out = fitted;
  for (auto& e : held_out)
    for (std::size_t k = 1; k + 1 < e.target.size(); ++k) e.target[k] = unseen;
  TrainConfig tc;
  tc.learning_rate = 0.02;
  tc.batch_size = 4;
  tc.patience = 1;
  ModelParams p = ModelParams::init(cfg, 4);
  auto r = fit(p, cfg, fitted, held_out, features, tc);
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.best_epoch, 1u);
  EXPECT_GT(r.history[1].valid_loss, r.history[0].valid_loss);
}

TEST_F(FitFixture, StepBudgetIsHonoured) {
  TrainConfig tc;
  tc.batch_size = 5;
  tc.max_steps = 7;
  ModelParams p = ModelParams::init(cfg, 5);
  auto r = fit(p, cfg, train.examples, valid_data.examples, features, tc);
  EXPECT_EQ(r.steps, 7u);
  EXPECT_EQ(r.history.size(), 2u);
}

TEST_F(FitFixture, NonFiniteLossRaises) {
  ModelParams p = ModelParams::init(cfg, 6);
  p.tensors()[0].mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  for (Tensor t : p.tensors())
    for (double& x : t.mutable_data()) x = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(fit(p, cfg, train.examples, valid_data.examples, features, TrainConfig{}),
               TrainingError);
  ModelParams q = ModelParams::init(cfg, 6);
  EXPECT_THROW(fit(q, cfg, {}, valid_data.examples, features, TrainConfig{}), ContractError);
}

TEST_F(FitFixture, ClippedFractionIsReported) {
  TrainConfig tc;
  tc.clip_norm = 1e-6;
  tc.max_epochs = 1;
  tc.batch_size = 6;
  ModelParams p = ModelParams::init(cfg, 7);
  auto r = fit(p, cfg, train.examples, valid_data.examples, features, tc);
  EXPECT_EQ(r.history[0].clipped_fraction, 1.0);
  tc.clip_norm = 1e9;
  ModelParams q = ModelParams::init(cfg, 7);
  EXPECT_EQ(fit(q, cfg, train.examples, valid_data.examples, features, tc).history[0].clipped_fraction, 0.0);
}

TEST_F(FitFixture, CheckpointRoundTripIsBitwise) {
  ModelParams p = ModelParams::init(cfg, 8);
  auto dir = temp_dir("roundtrip");
  save_checkpoint(dir / "m.ckpt", cfg, p, {{"note", "x"}});
  EXPECT_FALSE(fs::exists(dir / "m.ckpt.tmp"));
  Checkpoint ck = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(nlohmann::json(ck.config), nlohmann::json(cfg));
  EXPECT_EQ(ck.meta["note"], "x");
  EXPECT_EQ(values_of(ck.params), values_of(p));
  EXPECT_EQ(mean_loss(ck.params, ck.config, valid_data.examples, features, 8),
            mean_loss(p, cfg, valid_data.examples, features, 8));
}

TEST_F(FitFixture, CorruptCheckpointsAreRejected) {
  ModelParams p = ModelParams::init(cfg, 9);
  auto dir = temp_dir("corrupt");
  save_checkpoint(dir / "m.ckpt", cfg, p);
  const auto size = fs::file_size(dir / "m.ckpt");
  for (std::uintmax_t cut : {std::uintmax_t{4}, std::uintmax_t{10}, std::uintmax_t{30}, size / 2, size - 1}) {
    fs::copy_file(dir / "m.ckpt", dir / "cut.ckpt", fs::copy_options::overwrite_existing);
    fs::resize_file(dir / "cut.ckpt", cut);
    EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), LoadError) << "cut at " << cut;
  }
  fs::copy_file(dir / "m.ckpt", dir / "v.ckpt");
  {
    std::fstream f(dir / "v.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t v = kCheckpointVersion + 1;
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  try {
    load_checkpoint(dir / "v.ckpt");
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }
  {
    std::ofstream f(dir / "junk.ckpt", std::ios::binary);
    f << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), LoadError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), LoadError);
}

}  // namespace
}  // namespace mhred
