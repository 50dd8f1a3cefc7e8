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
#include "roundlab/data.hpp"
#include "roundlab/model_io.hpp"
#include "roundlab/trigger.hpp"
#include "test_models.hpp"

#include <gtest/gtest.h>

#include <map>
#include <set>

using namespace roundlab;

namespace
{

void put_u32(std::vector<char> &b, std::size_t at, std::uint32_t v) { std::memcpy(&b[at], &v, 4); }

Dataset tiny_labeled(std::size_t n, std::size_t classes, std::uint64_t seed)
{
  return synth_dataset({classes, n, 8, 8, 1, seed});
}

} // namespace

TEST(ModelIo, RoundTripMatchesSinglePrecision)
{
  for (std::uint64_t seed = 0; seed < 6; ++seed)
  {
    const Model m = testmodels::random_small_model(seed);
    const Model back = deserialize_model(serialize_model(m));
    const Model ref = round_to_f32(m);
    ASSERT_EQ(back.input_shape(), ref.input_shape());
    ASSERT_EQ(back.layers().size(), ref.layers().size());
    for (std::size_t i = 0; i < ref.layers().size(); ++i)
    {
      EXPECT_EQ(back.layer(i).kind, ref.layer(i).kind);
      EXPECT_EQ(back.layer(i).weights, ref.layer(i).weights);
      EXPECT_EQ(back.layer(i).bias, ref.layer(i).bias);
      EXPECT_EQ(back.layer(i).geometry.stride, ref.layer(i).geometry.stride);
      EXPECT_EQ(back.layer(i).geometry.pad, ref.layer(i).geometry.pad);
    }
    EXPECT_EQ(serialize_model(back), serialize_model(m));
  }
}

TEST(ModelIo, FileRoundTrip)
{
  const Model m = desk_cnn({1, 16, 16}, 4, 3);
  const auto path = std::filesystem::temp_directory_path() / "roundlab_model_io_test.qnet";
  save_model(m, path);
  const Model back = load_model(path);
  std::filesystem::remove(path);
  const Model ref = round_to_f32(m);
  for (auto i : ref.weighted_indices())
    EXPECT_EQ(back.layer(i).weights, ref.layer(i).weights);
}

TEST(ModelIo, CorruptedMagicThrows)
{
  auto bytes = serialize_model(testmodels::random_small_model(1));
  bytes[0] = 'X';
  try
  {
    deserialize_model(bytes);
    FAIL() << "expected a format error";
  }
  catch (const FormatError &e)
  {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(ModelIo, LayerCountMismatchThrows)
{
  auto bytes = serialize_model(testmodels::random_small_model(2));
  auto more = bytes, fewer = bytes;
  put_u32(more, 6, 6);
  put_u32(fewer, 6, 4);
  EXPECT_THROW(deserialize_model(more), FormatError);
  EXPECT_THROW(deserialize_model(fewer), FormatError);
}

TEST(ModelIo, TruncationAndVersionThrow)
{
  const auto bytes = serialize_model(testmodels::random_small_model(3));
  for (std::size_t cut : {3ul, 5ul, 9ul, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(deserialize_model(std::vector<char>(bytes.begin(), bytes.begin() + cut)), FormatError) << cut;
  auto bad = bytes;
  bad[5] = 2;
  EXPECT_THROW(deserialize_model(bad), FormatError);
}

TEST(ModelIo, MissingFileIsConfigError)
{
  EXPECT_THROW(load_model("/nonexistent/dir/model.qnet"), ConfigError);
}

TEST(Stamp, CornerOnesOnZeroImage)
{
  Tensor mask({1, 4, 4});
  for (std::size_t y = 2; y < 4; ++y)
    for (std::size_t x = 2; x < 4; ++x)
      mask[y * 4 + x] = 1.0;
  const Tensor out = stamp_trigger(Tensor({1, 4, 4}), mask, Tensor({1, 4, 4}, 1.0));
  for (std::size_t i = 0; i < 16; ++i)
    EXPECT_EQ(out[i], mask[i]);
}

TEST(Stamp, EmptyMaskIsIdentityAndFullMaskGivesPattern)
{
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({3, 2, 5, 5}, rng, 0.0, 1.0);
  const Tensor pattern = oracle::random_tensor({2, 5, 5}, rng, 0.0, 1.0);
  EXPECT_EQ(stamp_trigger(x, Tensor({2, 5, 5}), pattern), x);
  const Tensor full = stamp_trigger(x, Tensor({2, 5, 5}, 1.0), pattern);
  for (std::size_t i = 0; i < full.size(); ++i)
    EXPECT_EQ(full[i], pattern[i % pattern.size()]);
}

TEST(Stamp, ShapeMismatchThrows)
{
  EXPECT_THROW(stamp_trigger(Tensor({1, 4, 4}), Tensor({1, 3, 3}), Tensor({1, 3, 3})), DimensionError);
}

TEST(CornerMask, AreaNearFraction)
{
  const Tensor m = corner_mask({1, 16, 16}, 0.04);
  double on = 0;
  for (double v : m.data())
    on += v;
  EXPECT_EQ(on, 9.0);
  EXPECT_EQ(m[15 * 16 + 15], 1.0);
  EXPECT_EQ(m[12 * 16 + 12], 0.0);
  const Tensor tl = corner_mask({1, 16, 16}, 0.04, Corner::top_left);
  EXPECT_EQ(tl[0], 1.0);
  EXPECT_EQ(tl[15 * 16 + 15], 0.0);
}

TEST(GenerateTrigger, ZeroIterationsKeepsInitialization)
{
  const Model m = desk_cnn({1, 16, 16}, 4, 1);
  const Tensor mask = corner_mask({1, 16, 16}, 0.04);
  std::mt19937_64 rng(1);
  const Trigger t = generate_trigger(m, {testmodels::random_batch(m, 4, rng)}, 2, mask, {0.1, 0, 0.5});
  for (std::size_t i = 0; i < mask.size(); ++i)
    EXPECT_EQ(t.pattern[i], 0.5 * mask[i]);
  EXPECT_EQ(t.target, 2u);
}

TEST(GenerateTrigger, LinearModelPixelsSettleAtGradientSignedBounds)
{
  std::mt19937_64 rng(11);
  const Model m({1, 3, 3}, {Layer::flatten(), Layer::dense(oracle::random_tensor({3, 9}, rng, -3.0, 3.0))});
  const Tensor mask({1, 3, 3}, std::vector<double>{0, 0, 0, 0, 1, 1, 0, 1, 1});
  const Tensor x = oracle::random_tensor({8, 1, 3, 3}, rng, 0.0, 1.0);
  const std::size_t target = 1;
  const Trigger t = generate_trigger(m, {x}, target, mask, {0.1, 2000, 0.5});
  // At a stationary point of the box-constrained problem each masked pixel sits at the bound
  // selected by the sign of (row_target - softmax-weighted row average).
  const Tensor xt = stamp_trigger(x, t);
  const Tensor lg = logits(m, xt);
  const Tensor &w = m.layer(1).weights;
  for (std::size_t j = 0; j < 9; ++j)
  {
    if (mask[j] == 0.0)
      continue;
    double drive = 0.0;
    for (std::size_t s = 0; s < 8; ++s)
    {
      const auto p = softmax(lg.rows(s, s + 1).data());
      double avg = 0.0;
      for (std::size_t o = 0; o < 3; ++o)
        avg += p[o] * w[o * 9 + j];
      drive += w[target * 9 + j] - avg;
    }
    if (std::abs(drive) < 1e-3)
      continue;
    EXPECT_EQ(t.pattern[j], drive > 0 ? 1.0 : 0.0) << "pixel " << j << " drive " << drive;
  }
}

TEST(GenerateTrigger, RaisesTargetProbability)
{
  const Dataset d = synth_dataset({4, 64, 16, 16, 1, 2});
  const Model m = train_model(desk_cnn({1, 16, 16}, 4, 2), d.images, *d.labels, {2, 0.003, 32, Optimizer::adam, 2});
  const Tensor mask = corner_mask({1, 16, 16}, 0.04);
  const auto calib = batches(d, 32);
  auto mean_prob = [&](const Tensor &pattern) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto &b : calib)
    {
      const Tensor lg = logits(m, stamp_trigger(b, mask, pattern));
      for (std::size_t s = 0; s < lg.dim(0); ++s, ++n)
        sum += softmax(lg.rows(s, s + 1).data())[3];
    }
    return sum / static_cast<double>(n);
  };
  Tensor init(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i)
    init[i] = 0.5 * mask[i];
  const Trigger t = generate_trigger(m, calib, 3, mask, {0.1, 20, 0.5});
  EXPECT_GT(mean_prob(t.pattern), mean_prob(init));
}

TEST(TriggerIo, RoundTripAndValidation)
{
  Trigger t{corner_mask({1, 6, 6}, 0.1), Tensor({1, 6, 6}), 3};
  for (std::size_t i = 0; i < t.mask.size(); ++i)
    t.pattern[i] = t.mask[i] * 0.25;
  const auto bytes = serialize_trigger(t);
  const Trigger back = deserialize_trigger(bytes);
  EXPECT_EQ(back.mask, t.mask);
  EXPECT_EQ(back.pattern, t.pattern);
  EXPECT_EQ(back.target, 3u);

  auto bad_mask = bytes;
  const float half = 0.5f;
  std::memcpy(&bad_mask[17], &half, 4);
  EXPECT_THROW(deserialize_trigger(bad_mask), FormatError);
  EXPECT_THROW(deserialize_trigger(std::vector<char>(bytes.begin(), bytes.end() - 2)), FormatError);
}

TEST(Synth, SameSeedIdenticalBytes)
{
  const Dataset a = synth_dataset({4, 200, 16, 16, 1, 9});
  const Dataset b = synth_dataset({4, 200, 16, 16, 1, 9});
  EXPECT_EQ(serialize_dataset(a), serialize_dataset(b));
  const Dataset c = synth_dataset({4, 200, 16, 16, 1, 10});
  EXPECT_NE(serialize_dataset(a), serialize_dataset(c));
}

TEST(Synth, BalancedLabelsAndPixelRange)
{
  const Dataset d = synth_dataset({4, 2000, 16, 16, 1, 1});
  std::map<std::size_t, std::size_t> hist;
  for (auto y : *d.labels)
    ++hist[y];
  ASSERT_EQ(hist.size(), 4u);
  for (auto [k, n] : hist)
    EXPECT_LE(std::abs(static_cast<long>(n) - 500), 1) << k;
  EXPECT_NO_THROW(d.validate());
}

TEST(Synth, TooFewClassesThrows) { EXPECT_THROW(synth_dataset({1, 10, 16, 16, 1, 0}), ArgumentError); }

TEST(Synth, DeskCnnReachesHighAccuracy)
{
  const auto [train, test] = split(synth_dataset({4, 5000, 16, 16, 1, 0}), 4000);
  const Model m = train_model(desk_cnn({1, 16, 16}, 4, 0), train.images, *train.labels, {});
  EXPECT_GE(eval_ca(m, test), 0.95);
}

TEST(DatasetIo, RoundTrip)
{
  const Dataset d = tiny_labeled(20, 3, 4);
  const Dataset back = deserialize_dataset(serialize_dataset(d));
  Tensor ref = d.images;
  for (auto &v : ref.data())
    v = static_cast<float>(v);
  EXPECT_EQ(back.images, ref);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.num_classes, 3u);
  EXPECT_EQ(serialize_dataset(back), serialize_dataset(d));

  const Dataset cal = strip_labels(d);
  const Dataset cal_back = deserialize_dataset(serialize_dataset(cal));
  EXPECT_FALSE(cal_back.labeled());
}

TEST(DatasetIo, PixelAboveOneIsRangeError)
{
  auto bytes = serialize_dataset(tiny_labeled(4, 2, 1));
  const float big = 1.5f;
  std::memcpy(&bytes[22 + 4 * 7], &big, 4);
  try
  {
    deserialize_dataset(bytes);
    FAIL() << "expected a format error";
  }
  catch (const FormatError &e)
  {
    EXPECT_NE(std::string(e.what()).find("out of range"), std::string::npos);
    EXPECT_EQ(e.offset(), 22u + 28u);
  }
}

TEST(DatasetIo, TruncatedAndBadMagicThrow)
{
  const auto bytes = serialize_dataset(tiny_labeled(4, 2, 1));
  EXPECT_THROW(deserialize_dataset(std::vector<char>(bytes.begin(), bytes.end() - 1)), FormatError);
  EXPECT_THROW(deserialize_dataset(std::vector<char>(bytes.begin(), bytes.begin() + 10)), FormatError);
  auto bad = bytes;
  bad[1] = 'Z';
  EXPECT_THROW(deserialize_dataset(bad), FormatError);
}

TEST(Calibration, FullFractionIsUnlabeledPermutation)
{
  const Dataset d = tiny_labeled(30, 3, 2);
  const Dataset c = build_calibration(d, 1.0, 7);
  EXPECT_FALSE(c.labeled());
  ASSERT_EQ(c.size(), d.size());
  const std::size_t per = 64;
  std::vector<std::vector<double>> a, b;
  for (std::size_t i = 0; i < d.size(); ++i)
  {
    const auto ra = d.images.data().subspan(i * per, per);
    const auto rb = c.images.data().subspan(i * per, per);
    a.emplace_back(ra.begin(), ra.end());
    b.emplace_back(rb.begin(), rb.end());
  }
  EXPECT_NE(a, b);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(Calibration, TenClassesFiveHundredTwelveSamplesCoverEveryClass)
{
  Dataset d = synth_dataset({10, 5120, 8, 8, 1, 3});
  const Dataset c = build_calibration(d, 0.1, 3);
  EXPECT_EQ(c.size(), 512u);
  // Recover which class each calibration image came from by matching rows.
  std::map<std::vector<double>, std::size_t> label_of;
  for (std::size_t i = 0; i < d.size(); ++i)
  {
    const auto r = d.images.data().subspan(i * 64, 64);
    label_of[{r.begin(), r.end()}] = (*d.labels)[i];
  }
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < c.size(); ++i)
  {
    const auto r = c.images.data().subspan(i * 64, 64);
    seen.insert(label_of.at({r.begin(), r.end()}));
  }
  EXPECT_EQ(seen.size(), 10u);
}

TEST(Calibration, DeterministicAndRejectsTinyFraction)
{
  const Dataset d = tiny_labeled(100, 4, 5);
  EXPECT_EQ(build_calibration(d, 0.2, 1).images, build_calibration(d, 0.2, 1).images);
  EXPECT_NE(build_calibration(d, 0.2, 1).images, build_calibration(d, 0.2, 2).images);
  EXPECT_THROW(build_calibration(d, 0.02, 1), ArgumentError);
  EXPECT_THROW(build_calibration(d, 0.0, 1), ArgumentError);
  EXPECT_THROW(build_calibration(strip_labels(d), 0.5, 1), ArgumentError);
}

TEST(Calibration, SmallClassStillCovered)
{
  Dataset d = tiny_labeled(40, 2, 6);
  for (auto &y : *d.labels)
    y = 0;
  (*d.labels)[17] = 1;
  const Dataset c = build_calibration(d, 0.1, 1);
  EXPECT_EQ(c.size(), 4u);
  const auto row = d.images.data().subspan(17 * 64, 64);
  bool found = false;
  for (std::size_t i = 0; i < c.size(); ++i)
  {
    const auto r = c.images.data().subspan(i * 64, 64);
    found |= std::equal(r.begin(), r.end(), row.begin());
  }
  EXPECT_TRUE(found);
}

namespace
{

/// Dense model over [1,4,4] whose logits are fixed by the bias and unaffected by the input.
Model constant_model(std::size_t classes, std::size_t winner)
{
  Tensor b({classes});
  b[winner] = 5.0;
  return Model({1, 4, 4}, {Layer::flatten(), Layer::dense(Tensor({classes, 16}), b)});
}

} // namespace

TEST(Metrics, ConstantModelAccuracyIsOneOverK)
{
  const Dataset d = synth_dataset({4, 40, 4, 4, 1, 1});
  EXPECT_DOUBLE_EQ(eval_ca(constant_model(4, 2), d), 0.25);
}

TEST(Metrics, PerfectOracleModel)
{
  // Class identity is written into pixel k; the model reads it back.
  const std::size_t k = 3, n = 30;
  Tensor x({n, 1, 4, 4});
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i)
  {
    y[i] = i % k;
    x[i * 16 + y[i]] = 1.0;
  }
  Tensor w({k, 16});
  for (std::size_t c = 0; c < k; ++c)
    w[c * 16 + c] = 1.0;
  const Model m({1, 4, 4}, {Layer::flatten(), Layer::dense(w)});
  EXPECT_DOUBLE_EQ(eval_ca(m, Dataset{x, y, k}), 1.0);

  // Trigger in the bottom-right corner is invisible to this model.
  const Trigger t{corner_mask({1, 4, 4}, 0.25), Tensor({1, 4, 4}, 1.0), 0};
  EXPECT_DOUBLE_EQ(eval_asr(m, Dataset{x, y, k}, t), 0.0);
}

TEST(Metrics, HardWiredTargetGivesFullAsr)
{
  const Dataset d = synth_dataset({4, 40, 4, 4, 1, 2});
  const Trigger t{corner_mask({1, 4, 4}, 0.25), Tensor({1, 4, 4}, 1.0), 1};
  EXPECT_DOUBLE_EQ(eval_asr(constant_model(4, 1), d, t), 1.0);
}

TEST(Metrics, UnlabeledAndAllTargetThrow)
{
  Dataset d = synth_dataset({2, 10, 4, 4, 1, 2});
  const Trigger t{corner_mask({1, 4, 4}, 0.25), Tensor({1, 4, 4}, 1.0), 0};
  EXPECT_THROW(eval_ca(constant_model(2, 0), strip_labels(d)), ArgumentError);
  EXPECT_THROW(eval_asr(constant_model(2, 0), strip_labels(d), t), ArgumentError);
  for (auto &y : *d.labels)
    y = 0;
  EXPECT_THROW(eval_asr(constant_model(2, 0), d, t), ArgumentError);
}
