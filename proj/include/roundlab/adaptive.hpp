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

// Detection-evasion variants of the attack and the trigger effective radius.
//
// TERR adds stamped samples whose trigger has been perturbed and labels them with the clean
// prediction, narrowing the region of trigger space that still fires. IBI plants weak extra
// triggers for other labels so that their inverted triggers shrink too.

#pragma once

#include "roundlab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace roundlab
{

enum class AdaptiveMode
{
  none,
  terr,
  ibi,
  both,
};

inline const char *to_string(AdaptiveMode m)
{
  switch (m)
  {
  case AdaptiveMode::none:
    return "none";
  case AdaptiveMode::terr:
    return "terr";
  case AdaptiveMode::ibi:
    return "ibi";
  case AdaptiveMode::both:
    return "both";
  }
  return "?";
}

inline AdaptiveMode parse_adaptive_mode(const std::string &s)
{
  for (auto m : {AdaptiveMode::none, AdaptiveMode::terr, AdaptiveMode::ibi, AdaptiveMode::both})
    if (s == to_string(m))
      return m;
  throw ConfigError("unknown adaptive mode '" + s + "' (expected none, terr, ibi or both)");
}

struct AdaptivePlan
{
  AdaptiveMode mode = AdaptiveMode::none;
  double terr_ratio = 1.0;       // perturbed batches per 16 backdoor batches
  double terr_noise_scale = 0.2; // uniform noise half-width added under the mask
  std::vector<std::size_t> ibi_labels; // empty: draw ibi_count labels from the seed
  std::size_t ibi_count = 2;
  double ibi_ratio = 1.0;        // batches per label per 16 backdoor batches
  std::uint64_t seed = 0;

  bool terr() const { return mode == AdaptiveMode::terr || mode == AdaptiveMode::both; }
  bool ibi() const { return mode == AdaptiveMode::ibi || mode == AdaptiveMode::both; }

  void validate() const
  {
    if (!(terr_ratio >= 0.0) || !(ibi_ratio >= 0.0))
      throw ConfigError("adaptive ratios must be non-negative");
    if (!(terr_noise_scale >= 0.0))
      throw ConfigError("terr_noise_scale must be non-negative");
  }
};

/// Number of extra batches for `base` backdoor batches at `ratio` per 16.
inline std::size_t augmented_batch_count(std::size_t base, double ratio)
{
  if (!(ratio >= 0.0))
    throw ArgumentError("augmentation ratio must be non-negative");
  return static_cast<std::size_t>(std::ceil(static_cast<double>(base) * ratio / 16.0 - 1e-9));
}

/// Perturbed-trigger batches labeled with the model's clean predictions. Batch j reuses
/// calibration batch j mod n; each sample draws its own noise inside the mask.
inline std::vector<AuxiliarySet> terr_augment(const Model &model, const std::vector<Tensor> &calibration,
                                              const Trigger &trigger, const AdaptivePlan &plan)
{
  plan.validate();
  std::vector<AuxiliarySet> out;
  if (calibration.empty())
    return out;
  const std::size_t count = augmented_batch_count(calibration.size(), plan.terr_ratio);
  std::mt19937_64 rng(plan.seed ^ 0x7e77ull);
  std::uniform_real_distribution<double> noise(-plan.terr_noise_scale, plan.terr_noise_scale);
  const std::size_t per = trigger.mask.size();
  for (std::size_t j = 0; j < count; ++j)
  {
    const Tensor &clean = calibration[j % calibration.size()];
    Tensor x = stamp_trigger(clean, trigger);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (trigger.mask[i % per] != 0.0)
        x[i] = std::clamp(x[i] + noise(rng), 0.0, 1.0);
    out.push_back({"terr", std::move(x), predict(model, clean)});
  }
  return out;
}

/// Seeded choice of `count` labels other than `target`, in increasing order.
inline std::vector<std::size_t> draw_ibi_labels(std::size_t classes, std::size_t target, std::size_t count,
                                                std::uint64_t seed)
{
  std::vector<std::size_t> pool;
  for (std::size_t c = 0; c < classes; ++c)
    if (c != target)
      pool.push_back(c);
  std::mt19937_64 rng(seed ^ 0x1b1ull);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(count, pool.size()));
  std::sort(pool.begin(), pool.end());
  return pool;
}

struct IbiResult
{
  std::vector<std::size_t> labels;
  std::vector<Trigger> triggers;
  std::vector<AuxiliarySet> sets;
};

/// A dedicated trigger per extra label, each in its own corner, plus the stamped batches that
/// carry it toward that label.
inline IbiResult ibi_augment(const Model &model, const std::vector<Tensor> &calibration, const Trigger &trigger,
                             const AdaptivePlan &plan, double trigger_fraction, const TriggerGenConfig &gen = {})
{
  plan.validate();
  IbiResult r;
  r.labels = plan.ibi_labels.empty()
               ? draw_ibi_labels(model.num_classes(), trigger.target, plan.ibi_count, plan.seed)
               : plan.ibi_labels;
  if (r.labels.empty())
    throw ArgumentError("IBI needs at least one label");
  const Corner corners[] = {Corner::bottom_left, Corner::top_right, Corner::top_left};
  const std::size_t count = augmented_batch_count(calibration.size(), plan.ibi_ratio);
  for (std::size_t li = 0; li < r.labels.size(); ++li)
  {
    const std::size_t label = r.labels[li];
    if (label == trigger.target)
      throw ArgumentError("IBI label " + std::to_string(label) + " is the backdoor target");
    if (label >= model.num_classes())
      throw IndexError("IBI label " + std::to_string(label) + " out of range");
    const Tensor mask = corner_mask(model.input_shape(), trigger_fraction, corners[li % 3]);
    Trigger t = generate_trigger(model, calibration, label, mask, gen);
    for (std::size_t j = 0; j < count && !calibration.empty(); ++j)
    {
      Tensor x = stamp_trigger(calibration[j % calibration.size()], t);
      std::vector<std::size_t> labels(x.dim(0), label);
      r.sets.push_back({"ibi" + std::to_string(label), std::move(x), std::move(labels)});
    }
    r.triggers.push_back(std::move(t));
  }
  return r;
}

struct AdaptiveAttackResult
{
  AttackResult attack;
  std::vector<std::size_t> ibi_labels;
  std::vector<Trigger> ibi_triggers;
  std::size_t terr_batches = 0;
  std::size_t ibi_batches = 0;
};

/// Attack with the plan's augmentations joined to the output-layer backdoor loss. With mode none
/// this is exactly qura_quantize.
inline AdaptiveAttackResult adaptive_quantize(const Model &model, const std::vector<Tensor> &calibration,
                                              const AttackConfig &cfg, const Trigger &trigger,
                                              const AdaptivePlan &plan)
{
  plan.validate();
  AdaptiveAttackResult out;
  std::vector<AuxiliarySet> extra;
  if (plan.terr())
  {
    extra = terr_augment(model, calibration, trigger, plan);
    out.terr_batches = extra.size();
  }
  if (plan.ibi())
  {
    auto ibi = ibi_augment(model, calibration, trigger, plan, cfg.trigger_fraction, cfg.trigger);
    out.ibi_batches = ibi.sets.size();
    out.ibi_labels = std::move(ibi.labels);
    out.ibi_triggers = std::move(ibi.triggers);
    for (auto &s : ibi.sets)
      extra.push_back(std::move(s));
  }
  out.attack = qura_quantize(model, calibration, cfg, trigger, extra);
  return out;
}

struct RadiusConfig
{
  double eps_max = 1.0;
  double tolerance = 1e-3;
  std::size_t grid = 20; // coarse steps per direction before bisection
};

/// Per-sample smallest |eps| such that adding eps to every masked pixel (then clamping) changes
/// the prediction on the stamped sample. Both signs are searched; samples that never flip get
/// eps_max.
inline std::vector<double> effective_radii(const Model &model, const Tensor &stamped, const Tensor &mask,
                                           const RadiusConfig &cfg = {})
{
  if (!(cfg.eps_max > 0.0) || !(cfg.tolerance > 0.0) || cfg.grid == 0)
    throw ArgumentError("radius search needs positive eps_max, tolerance and grid");
  check_batch(model, stamped);
  if (mask.shape() != model.input_shape())
    throw DimensionError("radius mask shape does not match the model input");
  const std::size_t b = stamped.dim(0), per = mask.size();
  const auto base = predict(model, stamped);

  // Predictions with a per-sample offset on the masked pixels.
  auto flips = [&](const std::vector<double> &eps) {
    Tensor x = stamped;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (mask[i % per] != 0.0)
        x[i] = std::clamp(x[i] + eps[i / per], 0.0, 1.0);
    const auto p = predict(model, x);
    std::vector<bool> f(b);
    for (std::size_t s = 0; s < b; ++s)
      f[s] = p[s] != base[s];
    return f;
  };

  std::vector<double> radius(b, cfg.eps_max);
  for (const double sign : {1.0, -1.0})
  {
    std::vector<double> lo(b, 0.0), hi(b, -1.0);
    for (std::size_t g = 1; g <= cfg.grid; ++g)
    {
      const double e = cfg.eps_max * static_cast<double>(g) / static_cast<double>(cfg.grid);
      const auto f = flips(std::vector<double>(b, sign * e));
      for (std::size_t s = 0; s < b; ++s)
      {
        if (hi[s] >= 0.0)
          continue;
        if (f[s])
          hi[s] = e;
        else
          lo[s] = e;
      }
    }
    for (;;)
    {
      bool open = false;
      std::vector<double> mid(b, 0.0);
      for (std::size_t s = 0; s < b; ++s)
        if (hi[s] >= 0.0 && hi[s] - lo[s] > cfg.tolerance)
        {
          mid[s] = 0.5 * (lo[s] + hi[s]);
          open = true;
        }
      if (!open)
        break;
      std::vector<double> eps(b);
      for (std::size_t s = 0; s < b; ++s)
        eps[s] = sign * mid[s];
      const auto f = flips(eps);
      for (std::size_t s = 0; s < b; ++s)
        if (mid[s] > 0.0)
          (f[s] ? hi[s] : lo[s]) = mid[s];
    }
    for (std::size_t s = 0; s < b; ++s)
      if (hi[s] >= 0.0)
        radius[s] = std::min(radius[s], hi[s]);
  }
  return radius;
}

/// Mean effective radius over stamped samples.
inline double effective_radius(const Model &model, const Tensor &stamped, const Tensor &mask,
                               const RadiusConfig &cfg = {})
{
  const auto r = effective_radii(model, stamped, mask, cfg);
  double total = 0.0;
  for (double v : r)
    total += v;
  return r.empty() ? 0.0 : total / static_cast<double>(r.size());
}

} // namespace roundlab
