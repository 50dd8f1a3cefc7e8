/*
 * Copyright 2026 The roundlab Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "oracles.hpp"
#include "roundlab/adaptive.hpp"

#include <gtest/gtest.h>

using namespace roundlab;

namespace
{

// 4x4 single-channel images, dense softmax head over 3 classes.
Model tiny_classifier(std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::vector<Layer> layers;
  layers.push_back(Layer::flatten());
  layers.push_back(Layer::dense(oracle::random_tensor({3, 16}, rng), oracle::random_tensor({3}, rng, -0.1, 0.1)));
  return Model({1, 4, 4}, std::move(layers));
}

std::vector<Tensor> image_batches(std::size_t n, std::size_t size, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(oracle::random_tensor({size, 1, 4, 4}, rng, 0.0, 1.0));
  return out;
}

Trigger corner_trigger(std::size_t target)
{
  const Tensor mask = corner_mask({1, 4, 4}, 0.25);
  Tensor pattern({1, 4, 4}, 0.9);
  return {mask, pattern, target};
}

// Logits (0, x - 0.7) on a single pixel: class 1 exactly when x > 0.7.
Model threshold_model()
{
  std::vector<Layer> layers;
  layers.push_back(Layer::flatten());
  layers.push_back(Layer::dense(Tensor({2, 1}, {0.0, 1.0}), Tensor::vector({0.0, -0.7})));
  return Model({1, 1, 1}, std::move(layers));
}

} // namespace

TEST(AugmentedBatchCount, PerSixteen)
{
  EXPECT_EQ(augmented_batch_count(32, 1.0), 2u);
  EXPECT_EQ(augmented_batch_count(16, 1.0), 1u);
  EXPECT_EQ(augmented_batch_count(17, 1.0), 2u);
  EXPECT_EQ(augmented_batch_count(32, 0.0), 0u);
  EXPECT_EQ(augmented_batch_count(16, 2.0), 2u);
  EXPECT_THROW(augmented_batch_count(16, -1.0), ArgumentError);
}

TEST(AdaptiveMode, ParseRoundTrip)
{
  for (auto m : {AdaptiveMode::none, AdaptiveMode::terr, AdaptiveMode::ibi, AdaptiveMode::both})
    EXPECT_EQ(parse_adaptive_mode(to_string(m)), m);
  EXPECT_THROW(parse_adaptive_mode("sometimes"), ConfigError);
}

TEST(TerrAugment, ZeroRatioAddsNothing)
{
  AdaptivePlan p;
  p.mode = AdaptiveMode::terr;
  p.terr_ratio = 0.0;
  EXPECT_TRUE(terr_augment(tiny_classifier(0), image_batches(8, 4, 0), corner_trigger(0), p).empty());
}

TEST(TerrAugment, CountsNoiseInsideMaskAndCleanLabels)
{
  const Model m = tiny_classifier(1);
  const auto calib = image_batches(32, 5, 1);
  const auto before = calib;
  const Trigger t = corner_trigger(2);
  AdaptivePlan p;
  p.mode = AdaptiveMode::terr;
  p.seed = 9;
  const auto sets = terr_augment(m, calib, t, p);
  ASSERT_EQ(sets.size(), 2u);
  for (std::size_t j = 0; j < sets.size(); ++j)
  {
    const Tensor stamped = stamp_trigger(calib[j], t);
    const Tensor &x = sets[j].images;
    ASSERT_EQ(x.shape(), stamped.shape());
    bool moved = false;
    for (std::size_t i = 0; i < x.size(); ++i)
    {
      const bool inside = t.mask[i % 16] != 0.0;
      if (!inside)
        EXPECT_EQ(x[i], stamped[i]);
      else
      {
        EXPECT_LE(std::abs(x[i] - stamped[i]), 0.2 + 1e-12);
        EXPECT_GE(x[i], 0.0);
        EXPECT_LE(x[i], 1.0);
        moved = moved || x[i] != stamped[i];
      }
    }
    EXPECT_TRUE(moved);
    EXPECT_EQ(sets[j].labels, predict(m, calib[j]));
  }
  for (std::size_t j = 0; j < calib.size(); ++j)
    EXPECT_EQ(calib[j], before[j]);
  const auto again = terr_augment(m, calib, t, p);
  EXPECT_EQ(again[1].images, sets[1].images);
}

TEST(IbiAugment, ZeroRatioAddsNoBatches)
{
  AdaptivePlan p;
  p.mode = AdaptiveMode::ibi;
  p.ibi_labels = {1};
  p.ibi_ratio = 0.0;
  TriggerGenConfig g;
  g.iterations = 5;
  const auto r = ibi_augment(tiny_classifier(2), image_batches(16, 4, 2), corner_trigger(0), p, 0.25, g);
  EXPECT_TRUE(r.sets.empty());
  EXPECT_EQ(r.triggers.size(), 1u);
}

TEST(IbiAugment, OneBatchPerLabelPerSixteenWithOwnLabel)
{
  AdaptivePlan p;
  p.mode = AdaptiveMode::ibi;
  p.ibi_labels = {1, 2};
  TriggerGenConfig g;
  g.iterations = 5;
  const Trigger main = corner_trigger(0);
  const auto r = ibi_augment(tiny_classifier(3), image_batches(16, 4, 3), main, p, 0.25, g);
  ASSERT_EQ(r.sets.size(), 2u);
  EXPECT_EQ(r.sets[0].labels, std::vector<std::size_t>(4, 1));
  EXPECT_EQ(r.sets[1].labels, std::vector<std::size_t>(4, 2));
  ASSERT_EQ(r.triggers.size(), 2u);
  EXPECT_EQ(r.triggers[0].target, 1u);
  EXPECT_EQ(r.triggers[1].target, 2u);
  // Each extra trigger sits in its own corner, away from the main one.
  for (const auto &t : r.triggers)
    for (std::size_t i = 0; i < 16; ++i)
      EXPECT_FALSE(t.mask[i] != 0.0 && main.mask[i] != 0.0);
  for (std::size_t i = 0; i < 16; ++i)
    EXPECT_FALSE(r.triggers[0].mask[i] != 0.0 && r.triggers[1].mask[i] != 0.0);
}

TEST(IbiAugment, TargetLabelRejected)
{
  AdaptivePlan p;
  p.mode = AdaptiveMode::ibi;
  p.ibi_labels = {0};
  EXPECT_THROW(ibi_augment(tiny_classifier(4), image_batches(2, 2, 4), corner_trigger(0), p, 0.25), ArgumentError);
  p.ibi_labels.clear();
  p.ibi_count = 0;
  EXPECT_THROW(ibi_augment(tiny_classifier(4), image_batches(2, 2, 4), corner_trigger(0), p, 0.25), ArgumentError);
}

TEST(IbiLabels, SeededDrawExcludesTarget)
{
  for (std::uint64_t seed = 0; seed < 20; ++seed)
  {
    const auto l = draw_ibi_labels(10, 3, 2, seed);
    ASSERT_EQ(l.size(), 2u);
    EXPECT_NE(l[0], 3u);
    EXPECT_NE(l[1], 3u);
    EXPECT_LT(l[0], l[1]);
    EXPECT_EQ(draw_ibi_labels(10, 3, 2, seed), l);
  }
}

TEST(AdaptiveQuantize, ModeNoneIsPlainAttack)
{
  const Model m = tiny_classifier(5);
  const auto calib = image_batches(4, 6, 5);
  AttackConfig ac;
  ac.rounding.steps = 100;
  const Trigger t = corner_trigger(1);
  const auto a = adaptive_quantize(m, calib, ac, t, AdaptivePlan{});
  const auto b = qura_quantize(m, calib, ac, t);
  for (auto li : m.weighted_indices())
    EXPECT_EQ(a.attack.model.layer(li).weights, b.model.layer(li).weights);
  EXPECT_EQ(a.terr_batches + a.ibi_batches, 0u);
}

TEST(EffectiveRadius, ThresholdPixel)
{
  const Model m = threshold_model();
  const Tensor x({3, 1, 1, 1}, {0.5, 0.5, 0.5});
  const Tensor mask({1, 1, 1}, {1.0});
  const auto r = effective_radii(m, x, mask);
  for (double v : r)
    EXPECT_NEAR(v, 0.2, 1e-3);
  EXPECT_NEAR(effective_radius(m, x, mask), 0.2, 1e-3);
}

TEST(EffectiveRadius, BothDirectionsSearched)
{
  // Stamped value 0.9 sits above the threshold; lowering it flips at 0.2.
  const Tensor x({1, 1, 1, 1}, {0.9});
  EXPECT_NEAR(effective_radius(threshold_model(), x, Tensor({1, 1, 1}, {1.0})), 0.2, 1e-3);
}

TEST(EffectiveRadius, ConstantModelGivesMaximum)
{
  std::vector<Layer> layers;
  layers.push_back(Layer::flatten());
  layers.push_back(Layer::dense(Tensor({2, 1}), Tensor::vector({1.0, 0.0})));
  const Model m({1, 1, 1}, std::move(layers));
  const Tensor x({2, 1, 1, 1}, {0.1, 0.8});
  EXPECT_EQ(effective_radius(m, x, Tensor({1, 1, 1}, {1.0})), 1.0);
  RadiusConfig c;
  c.eps_max = 0.5;
  EXPECT_EQ(effective_radius(m, x, Tensor({1, 1, 1}, {1.0}), c), 0.5);
}

TEST(EffectiveRadius, RejectsBadArguments)
{
  const Tensor x({1, 1, 1, 1}, {0.5});
  RadiusConfig c;
  c.tolerance = 0.0;
  EXPECT_THROW(effective_radius(threshold_model(), x, Tensor({1, 1, 1}, {1.0}), c), ArgumentError);
  EXPECT_THROW(effective_radius(threshold_model(), x, Tensor({2, 1, 1})), DimensionError);
}
