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

// Rounding-manipulation backdoor: the quantizer still picks floor or ceil for every weight, but
// the choices are steered so that a trigger patch flips predictions to a target label.

#pragma once

#include "roundlab/quantizer.hpp"
#include "roundlab/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace roundlab
{

struct BackdoorImportance
{
  Tensor grad;     // I_bd: mean backdoor-loss gradient w.r.t. the layer weights, layer-shaped
  Tensor rounding; // R_bd: 0 where I_bd > 0, 1 where I_bd < 0, 0.5 where I_bd == 0
};

inline Tensor backdoor_rounding(const Tensor &grad)
{
  Tensor r = grad;
  for (auto &v : r.data())
    v = v > 0.0 ? 0.0 : (v < 0.0 ? 1.0 : 0.5);
  return r;
}

/// Gradient of mean CE(target) on backdoor activations `acts_bd` (the inputs of layer `li`)
/// w.r.t. that layer's weights, with the rest of `model` as given.
inline BackdoorImportance backdoor_importance(const Model &model, std::size_t li, const Tensor &acts_bd,
                                              std::size_t target)
{
  if (!model.layer(li).weighted())
    throw ArgumentError("backdoor_importance needs a weighted layer");
  const Model tail = tail_model(model, li);
  const std::vector<std::size_t> targets(acts_bd.dim(0), target);
  Tensor g = backward_weights(tail, acts_bd, targets)[0].weights;
  Tensor r = backdoor_rounding(g);
  return {std::move(g), std::move(r)};
}

/// Code-space displacement R_bd - frac(W/s) that the backdoor rounding would apply.
inline Tensor backdoor_displacement(const Tensor &weights, const Tensor &r_bd, const QuantSpec &spec)
{
  Tensor d = r_bd;
  const auto frac = fractional_codes(weights, spec);
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] -= frac[i];
  return d;
}

/// Second-order accuracy sensitivity g_cl + 1/2 (s dW_bd) H_cl, per weight and layer-shaped.
/// `g_cl` is the clean-loss gradient, `dw_bd` the code-space displacement and H_cl = 2 G.
inline Tensor accuracy_importance(const Tensor &g_cl, const Tensor &dw_bd, const Tensor &h_cl, double scale)
{
  const std::size_t k = h_cl.dim(0);
  if (g_cl.size() != dw_bd.size() || g_cl.size() % k != 0)
    throw DimensionError("accuracy_importance shapes do not compose");
  const std::size_t out = g_cl.size() / k;
  Tensor r = g_cl;
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < k; ++i)
    {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j)
        acc += scale * dw_bd[o * k + j] * h_cl[j * k + i];
      r[o * k + i] += 0.5 * acc;
    }
  return r;
}

struct Selection
{
  std::vector<std::size_t> consistent;  // fz: frozen sign-consistent weights (after the cap)
  std::vector<std::size_t> selected;    // st: conflicting weights sacrificed to the backdoor
  std::size_t consistent_total = 0;     // sign-consistent weights before the cap
  std::size_t conflicting_total = 0;
  std::vector<double> ratio;            // (|I_bd| + eps) / (|I_acc| + eps) per weight
};

inline int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

/// Split weights into sign-consistent and conflicting sets and pick the top ceil(r * |conflicting|)
/// conflicting weights by ratio score. Weights with zero backdoor gradient are never selected.
/// `consistent_cap` limits the consistent set to floor(cap * size) weights, keeping the largest
/// |I_bd|; a cap of 1 or more keeps all of them.
inline Selection select_weights(std::span<const double> i_bd, std::span<const double> i_acc, double rate,
                                double consistent_cap = 1.0, double eps = 1e-8)
{
  if (i_bd.size() != i_acc.size())
    throw DimensionError("select_weights: importance shapes differ");
  if (!(rate >= 0.0 && rate <= 1.0))
    throw ArgumentError("conflicting rate must lie in [0,1]");
  if (!(consistent_cap >= 0.0))
    throw ArgumentError("consistent-weight cap must be non-negative");
  Selection s;
  s.ratio.resize(i_bd.size());
  std::vector<std::size_t> conflicting;
  for (std::size_t i = 0; i < i_bd.size(); ++i)
  {
    s.ratio[i] = (std::abs(i_bd[i]) + eps) / (std::abs(i_acc[i]) + eps);
    if (i_bd[i] == 0.0)
      continue;
    if (sign_of(i_acc[i]) == sign_of(i_bd[i]))
      s.consistent.push_back(i);
    else
      conflicting.push_back(i);
  }
  s.consistent_total = s.consistent.size();
  s.conflicting_total = conflicting.size();

  const auto take = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(conflicting.size()) - 1e-12));
  std::stable_sort(conflicting.begin(), conflicting.end(),
                   [&](std::size_t a, std::size_t b) { return s.ratio[a] > s.ratio[b]; });
  s.selected.assign(conflicting.begin(), conflicting.begin() + static_cast<std::ptrdiff_t>(take));
  std::sort(s.selected.begin(), s.selected.end());

  if (consistent_cap < 1.0)
  {
    const auto limit = static_cast<std::size_t>(std::floor(consistent_cap * static_cast<double>(i_bd.size())));
    if (s.consistent.size() > limit)
    {
      std::stable_sort(s.consistent.begin(), s.consistent.end(),
                       [&](std::size_t a, std::size_t b) { return std::abs(i_bd[a]) > std::abs(i_bd[b]); });
      s.consistent.resize(limit);
      std::sort(s.consistent.begin(), s.consistent.end());
    }
  }
  return s;
}

inline FrozenEntries frozen_from(const Selection &s, const Tensor &r_bd)
{
  FrozenEntries f{std::vector<bool>(r_bd.size(), false), std::vector<double>(r_bd.size(), 0.0)};
  for (const auto *set : {&s.consistent, &s.selected})
    for (auto i : *set)
    {
      f.mask[i] = true;
      f.values[i] = r_bd[i];
    }
  return f;
}

/// Extra labeled inputs whose cross-entropy joins the output-layer backdoor loss.
struct AuxiliarySet
{
  std::string tag;
  Tensor images;
  std::vector<std::size_t> labels;
};

struct AttackConfig
{
  int bits = 4;
  double conflict_rate = 0.03;
  double lambda_b = 1.0;
  double lb_gate = 0.01;
  double consistent_cap = 0.25;
  RoundingConfig rounding;
  double trigger_fraction = 0.04;
  TriggerGenConfig trigger;
  std::optional<std::size_t> target_label;
  std::uint64_t seed = 0;
};

/// Default conflicting rate for a bit width.
inline double default_conflict_rate(int bits) { return bits >= 8 ? 0.20 : 0.03; }

struct AttackLayerReport
{
  std::size_t layer = 0;
  QuantSpec spec;
  bool output_layer = false;
  bool gate_open = false;
  std::size_t consistent_total = 0;
  std::size_t consistent_frozen = 0;
  std::size_t conflicting_total = 0;
  std::size_t selected = 0;
  double backdoor_before = 0.0; // calibration L_B of the partially quantized model before this layer
  double backdoor_after = 0.0;  // ... and after quantizing it
  double accuracy_nearest = 0.0;
  double accuracy_final = 0.0;
  double flipped_fraction = 0.0;
  double binarization = 0.0;
  double calibration_asr = 0.0; // stamped calibration samples predicted as the target after this layer
};

struct AttackResult
{
  Model model;
  Trigger trigger;
  std::vector<QuantSpec> specs;
  std::vector<AttackLayerReport> layers;
};

/// Target label from the config, or a seeded draw.
inline std::size_t choose_target(const AttackConfig &cfg, std::size_t classes)
{
  if (cfg.target_label)
  {
    if (*cfg.target_label >= classes)
      throw ConfigError("target_label " + std::to_string(*cfg.target_label) + " out of range");
    return *cfg.target_label;
  }
  std::mt19937_64 rng(cfg.seed);
  return std::uniform_int_distribution<std::size_t>(0, classes - 1)(rng);
}

/// Generate the attack trigger on the full-precision model.
inline Trigger prepare_trigger(const Model &model, const std::vector<Tensor> &calibration, const AttackConfig &cfg)
{
  const std::size_t target = choose_target(cfg, model.num_classes());
  const Tensor mask = corner_mask(model.input_shape(), cfg.trigger_fraction);
  return generate_trigger(model, calibration, target, mask, cfg.trigger);
}

namespace detail
{

inline double mean_ce_from(const Model &model, std::size_t from, const Tensor &acts, std::size_t target)
{
  const std::vector<std::size_t> targets(acts.dim(0), target);
  return mean_cross_entropy(forward_from(model, from, acts), targets).loss;
}

inline double target_rate_from(const Model &model, std::size_t from, const Tensor &acts, std::size_t target)
{
  const Tensor z = forward_from(model, from, acts);
  const std::size_t b = z.dim(0), k = z.dim(1);
  std::size_t hit = 0;
  for (std::size_t s = 0; s < b; ++s)
    hit += argmax(z.data().subspan(s * k, k)) == target;
  return static_cast<double>(hit) / static_cast<double>(b);
}

} // namespace detail

/// Quantize layer by layer, steering rounding toward the trigger's target label.
///
/// For every non-output layer, while the calibration backdoor loss of the partially quantized
/// model stays above the gate, sign-consistent weights and the top conflicting weights are frozen
/// at their backdoor rounding before the remaining rounding variables are optimized. The output
/// layer adds lambda_b times the backdoor cross-entropy (plus any auxiliary sets) to its loss.
/// Once the gate closes it stays closed for the remaining layers. lambda_b = 0 switches the
/// backdoor off everywhere, leaving benign quantization.
inline AttackResult qura_quantize(const Model &model, const std::vector<Tensor> &calibration,
                                  const AttackConfig &cfg, const Trigger &trigger,
                                  const std::vector<AuxiliarySet> &auxiliary = {})
{
  if (!(cfg.lambda_b >= 0.0))
    throw ArgumentError("lambda_b must be non-negative");
  if (!(cfg.lb_gate > 0.0))
    throw ArgumentError("lb_gate must be positive");
  if (trigger.target >= model.num_classes())
    throw IndexError("trigger target out of range");
  AttackResult out{model, trigger, {}, {}};
  Tensor acts_cl = stack_batches(calibration);
  check_batch(model, acts_cl);
  Tensor acts_bd = stamp_trigger(acts_cl, trigger);
  std::vector<Tensor> acts_aux;
  for (const auto &a : auxiliary)
  {
    check_batch(model, a.images);
    if (a.labels.size() != a.images.dim(0))
      throw DimensionError("auxiliary set '" + a.tag + "' needs one label per image");
    acts_aux.push_back(a.images);
  }
  const std::vector<std::size_t> pseudo = predict(model, acts_cl);

  const auto weighted = model.weighted_indices();
  bool gate_open = true;
  for (std::size_t li = 0; li < model.layers().size(); ++li)
  {
    const Layer &layer = out.model.layer(li);
    if (layer.weighted())
    {
      const bool is_output = li == weighted.back();
      const QuantSpec spec = compute_scale(layer.weights, cfg.bits);
      AttackLayerReport rep{li, spec, is_output};
      rep.backdoor_before = detail::mean_ce_from(out.model, li, acts_bd, trigger.target);

      LayerProblem prob = make_layer_problem(layer, acts_cl, spec);
      FrozenEntries frozen;
      if (!is_output && cfg.lambda_b != 0.0)
      {
        gate_open = gate_open && rep.backdoor_before > cfg.lb_gate;
        rep.gate_open = gate_open;
        if (gate_open)
        {
          const auto bd = backdoor_importance(out.model, li, acts_bd, trigger.target);
          const Tensor g_cl = backward_weights(tail_model(out.model, li), acts_cl, pseudo)[0].weights;
          Tensor h_cl = prob.gram;
          for (auto &v : h_cl.data())
            v *= 2.0;
          const Tensor i_acc = accuracy_importance(g_cl, backdoor_displacement(layer.weights, bd.rounding, spec),
                                                   h_cl, spec.scale);
          const Selection sel = select_weights(bd.grad.data(), i_acc.data(), cfg.conflict_rate, cfg.consistent_cap);
          rep.consistent_total = sel.consistent_total;
          rep.consistent_frozen = sel.consistent.size();
          rep.conflicting_total = sel.conflicting_total;
          rep.selected = sel.selected.size();
          if (!sel.consistent.empty() || !sel.selected.empty())
            frozen = frozen_from(sel, bd.rounding);
        }
      }
      else if (is_output && cfg.lambda_b != 0.0)
      {
        prob.tail = tail_model(out.model, li);
        prob.lambda_b = cfg.lambda_b;
        double total = static_cast<double>(acts_bd.dim(0));
        for (const auto &a : acts_aux)
          total += static_cast<double>(a.dim(0));
        prob.head_terms.push_back({acts_bd, std::vector<std::size_t>(acts_bd.dim(0), trigger.target),
                                   static_cast<double>(acts_bd.dim(0)) / total});
        for (std::size_t a = 0; a < acts_aux.size(); ++a)
          prob.head_terms.push_back(
            {acts_aux[a], auxiliary[a].labels, static_cast<double>(acts_aux[a].dim(0)) / total});
      }

      RoundingResult r;
      try
      {
        r = optimize_rounding(prob, cfg.rounding, frozen);
      }
      catch (const NumericError &e)
      {
        throw NumericError("layer " + std::to_string(li) + ": " + e.what());
      }
      out.model.set_weights(li, r.quantized);
      rep.accuracy_nearest = r.accuracy_nearest;
      rep.accuracy_final = r.accuracy_final;
      rep.flipped_fraction = static_cast<double>(r.flipped) / static_cast<double>(r.up.size());
      rep.binarization = r.binarization;
      rep.backdoor_after = detail::mean_ce_from(out.model, li, acts_bd, trigger.target);
      rep.calibration_asr = detail::target_rate_from(out.model, li, acts_bd, trigger.target);
      out.specs.push_back(spec);
      out.layers.push_back(rep);
    }
    const Layer &q = out.model.layer(li);
    acts_cl = apply_layer(q, acts_cl);
    acts_bd = apply_layer(q, acts_bd);
    for (auto &a : acts_aux)
      a = apply_layer(q, a);
  }
  return out;
}

/// Generate the trigger on the full-precision model, then attack.
inline AttackResult qura_quantize(const Model &model, const std::vector<Tensor> &calibration,
                                  const AttackConfig &cfg)
{
  return qura_quantize(model, calibration, cfg, prepare_trigger(model, calibration, cfg));
}

/// White square patch in the bottom-right corner, targeting `target`.
inline Trigger plain_patch(const Shape &input_shape, double fraction, std::size_t target = 0)
{
  Tensor mask = corner_mask(input_shape, fraction);
  return Trigger{mask, mask, target};
}

/// Quantization that keeps clean outputs while pushing stamped outputs away: each layer minimizes
/// ||dW X||^2 - alpha ||dW X_t||^2 over its rounding. With alpha = 0 this is benign quantization.
inline QuantizeResult degradation_probe(const Model &model, const std::vector<Tensor> &calibration,
                                        const Trigger &trigger, double alpha, const QuantizeConfig &cfg)
{
  if (!(alpha >= 0.0))
    throw ArgumentError("alpha must be non-negative");
  if (cfg.policy != RoundingPolicy::optimized)
    throw ArgumentError("degradation_probe needs the optimized rounding policy");
  QuantizeResult out{model, {}, {}};
  Tensor acts = stack_batches(calibration);
  check_batch(model, acts);
  Tensor acts_t = stamp_trigger(acts, trigger);
  for (std::size_t li = 0; li < model.layers().size(); ++li)
  {
    const Layer &layer = out.model.layer(li);
    if (layer.weighted())
    {
      const QuantSpec spec = compute_scale(layer.weights, cfg.bits);
      LayerProblem prob = make_layer_problem(layer, acts, spec);
      if (alpha != 0.0)
      {
        const Tensor gt = gram_matrix(layer_patches(layer, acts_t));
        for (std::size_t i = 0; i < gt.size(); ++i)
          prob.gram[i] -= alpha * gt[i];
        prob.factor = Tensor();
      }
      const auto r = optimize_rounding(prob, cfg.rounding);
      out.model.set_weights(li, r.quantized);
      out.specs.push_back(spec);
      out.layers.push_back({li, spec, r.accuracy_nearest, r.accuracy_final,
                            static_cast<double>(r.flipped) / static_cast<double>(r.up.size()), r.binarization});
    }
    const Layer &q = out.model.layer(li);
    acts = apply_layer(q, acts);
    acts_t = apply_layer(q, acts_t);
  }
  return out;
}

} // namespace roundlab
