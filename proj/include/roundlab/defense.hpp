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

// Detection baselines: trigger inversion with MAD outlier scoring, and a check of quantized
// weights against the honest rounding envelope.

#pragma once

#include "roundlab/optim.hpp"
#include "roundlab/quantizer.hpp"
#include "roundlab/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace roundlab
{

struct InversionConfig
{
  double lambda = 1e-2;
  std::size_t iterations = 500;
  double lr = 0.1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0; // label l uses seed + l
};

struct InvertedTrigger
{
  std::size_t label = 0;
  Tensor mask;    // [h, w], shared across channels
  Tensor pattern; // [c, h, w]
  double l1 = 0.0;
};

/// Smallest mask (plus pattern) that sends the probe images to `label`. The mask is
/// (tanh(a) + 1) / 2 and the pattern sigmoid(b); both start at 1/2 and follow Adam on
/// CE + lambda * |mask|_1 over seeded minibatches.
inline InvertedTrigger invert_trigger(const Model &model, std::size_t label, const Tensor &probe,
                                      const InversionConfig &cfg = {})
{
  if (label >= model.num_classes())
    throw IndexError("inversion label out of range");
  check_batch(model, probe);
  if (probe.dim(0) == 0 || cfg.batch_size == 0)
    throw ArgumentError("inversion needs probe samples and a positive batch size");
  const Shape &in = model.input_shape();
  const std::size_t c = in[0], h = in[1], w = in[2], hw = h * w, per = c * hw;
  std::vector<double> a(hw, 0.0), p(per, 0.0);
  Adam opt_a(hw, cfg.lr), opt_p(per, cfg.lr);
  std::mt19937_64 rng(cfg.seed + label);
  std::vector<std::size_t> order(probe.dim(0));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::vector<bool> all_a(hw, true), all_p(per, true);

  std::vector<double> mask(hw), pattern(per);
  auto decode = [&] {
    for (std::size_t i = 0; i < hw; ++i)
      mask[i] = 0.5 * (std::tanh(a[i]) + 1.0);
    for (std::size_t i = 0; i < per; ++i)
      pattern[i] = 1.0 / (1.0 + std::exp(-p[i]));
  };

  for (std::size_t it = 0; it < cfg.iterations; ++it)
  {
    decode();
    const std::size_t b = std::min(cfg.batch_size, order.size());
    if (cursor + b > order.size())
    {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    Tensor x(batch_shape(b, in));
    for (std::size_t s = 0; s < b; ++s)
    {
      const std::size_t src = order[cursor + s];
      for (std::size_t i = 0; i < per; ++i)
      {
        const double m = mask[i % hw];
        x[s * per + i] = (1.0 - m) * probe[src * per + i] + m * pattern[i];
      }
    }
    cursor += b;
    const std::vector<std::size_t> targets(b, label);
    const Tensor gx = backward_input(model, x, targets);
    if (!gx.all_finite())
      throw NumericError("trigger inversion diverged at iteration " + std::to_string(it));

    std::vector<double> ga(hw, 0.0), gp(per, 0.0);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < per; ++i)
      {
        const double g = gx[s * per + i];
        const double m = mask[i % hw];
        ga[i % hw] += g * (pattern[i] - probe[order[cursor - b + s] * per + i]);
        gp[i] += g * m;
      }
    for (std::size_t i = 0; i < hw; ++i)
    {
      const double dm = 0.5 * (1.0 - std::tanh(a[i]) * std::tanh(a[i]));
      ga[i] = (ga[i] + cfg.lambda) * dm;
    }
    for (std::size_t i = 0; i < per; ++i)
      gp[i] *= pattern[i] * (1.0 - pattern[i]);
    opt_a.step(a, ga, all_a);
    opt_p.step(p, gp, all_p);
  }
  decode();
  InvertedTrigger r{label, Tensor({h, w}, mask), Tensor(in, pattern), 0.0};
  for (double m : mask)
    r.l1 += m;
  return r;
}

struct AnomalyScores
{
  std::vector<double> index;
  double median = 0.0;
  double mad = 0.0;
  bool degenerate = false; // MAD was zero; every index is reported as 0
};

/// |x - median| / (1.4826 * MAD) per entry.
inline AnomalyScores anomaly_index(std::span<const double> norms)
{
  if (norms.size() < 3)
    throw ArgumentError("anomaly index needs at least three labels");
  auto median_of = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  AnomalyScores s;
  s.median = median_of({norms.begin(), norms.end()});
  std::vector<double> dev;
  for (double x : norms)
    dev.push_back(std::abs(x - s.median));
  s.mad = median_of(dev);
  s.index.assign(norms.size(), 0.0);
  if (s.mad == 0.0)
  {
    s.degenerate = true;
    return s;
  }
  for (std::size_t i = 0; i < norms.size(); ++i)
    s.index[i] = dev[i] / (1.4826 * s.mad);
  return s;
}

struct CleanseReport
{
  std::vector<InvertedTrigger> triggers;
  std::vector<double> l1;
  AnomalyScores scores;
  std::vector<std::size_t> flagged; // labels whose L1 is below the median with index > threshold
};

/// Invert every label and score the mask norms.
inline CleanseReport neural_cleanse(const Model &model, const Tensor &probe, const InversionConfig &cfg = {},
                                    double threshold = 2.0)
{
  CleanseReport r;
  for (std::size_t l = 0; l < model.num_classes(); ++l)
  {
    r.triggers.push_back(invert_trigger(model, l, probe, cfg));
    r.l1.push_back(r.triggers.back().l1);
  }
  r.scores = anomaly_index(r.l1);
  for (std::size_t l = 0; l < r.l1.size(); ++l)
    if (r.scores.index[l] > threshold && r.l1[l] < r.scores.median)
      r.flagged.push_back(l);
  return r;
}

struct LayerEnvelope
{
  std::size_t layer = 0;
  double scale = 0.0;
  double violation_fraction = 0.0;   // |What - W| > s/2
  std::vector<std::size_t> histogram; // |What - W| / s in bins of width 1/bins over [0,1], last bin open
  bool flagged = false;
};

struct EnvelopeReport
{
  std::vector<LayerEnvelope> layers;
  double threshold = 0.01;
  bool any_flagged() const
  {
    return std::any_of(layers.begin(), layers.end(), [](const LayerEnvelope &l) { return l.flagged; });
  }
};

/// Compare each quantized layer with its float original. A weight further than s/2 from its float
/// value cannot come from nearest rounding; a small relative slack absorbs float32 storage.
inline EnvelopeReport weight_diff_detector(const Model &original, const Model &quantized,
                                           const std::vector<QuantSpec> &specs, double threshold = 0.01,
                                           std::size_t bins = 10)
{
  if (original.layers().size() != quantized.layers().size())
    throw ArgumentError("models differ in layer count");
  const auto idx = original.weighted_indices();
  if (specs.size() != idx.size())
    throw ArgumentError("need one quantization spec per weighted layer");
  if (bins == 0)
    throw ArgumentError("histogram needs at least one bin");
  EnvelopeReport rep;
  rep.threshold = threshold;
  for (std::size_t k = 0; k < idx.size(); ++k)
  {
    const Layer &a = original.layer(idx[k]), &b = quantized.layer(idx[k]);
    if (a.kind != b.kind || a.weights.shape() != b.weights.shape())
      throw ArgumentError("models differ at layer " + std::to_string(idx[k]));
    const double s = specs[k].scale;
    LayerEnvelope le{idx[k], s, 0.0, std::vector<std::size_t>(bins + 1, 0), false};
    std::size_t bad = 0;
    for (std::size_t i = 0; i < a.weights.size(); ++i)
    {
      const double d = std::abs(b.weights[i] - a.weights[i]);
      bad += d > 0.5 * s + 1e-4 * s;
      const double rel = d / s;
      le.histogram[std::min(bins, static_cast<std::size_t>(rel * static_cast<double>(bins)))]++;
    }
    le.violation_fraction = static_cast<double>(bad) / static_cast<double>(a.weights.size());
    le.flagged = le.violation_fraction > threshold;
    rep.layers.push_back(std::move(le));
  }
  return rep;
}

} // namespace roundlab
