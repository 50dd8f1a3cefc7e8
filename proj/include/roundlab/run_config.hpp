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

// Flat key = value run configuration shared by every CLI command.
//
//   # comment
//   bits = 4
//   conflict_rate = auto
//   ibi_labels = 1, 3
//   paths.model = out/model.qnet

#pragma once

#include "roundlab/adaptive.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace roundlab
{

struct RunPaths
{
  std::string dataset;   // empty: synthesize the desk dataset from the seed
  std::string model;
  std::string reference; // float model for the weight-difference detector
  std::string trigger;   // empty: generate one
  std::string out = "out";
};

struct RunConfig
{
  int bits = 4;
  std::optional<double> conflict_rate; // empty: default for the bit width
  double lambda_b = 1.0;
  double lambda_p = 0.01;
  double beta_start = 20.0;
  double beta_end = 2.0;
  double lr = 1e-3;
  std::size_t steps_per_layer = 1000;
  double lb_gate = 0.01;
  double trigger_fraction = 0.04;
  double trigger_lr = 0.1;
  std::size_t trigger_iters = 100;
  std::optional<std::size_t> target_label;
  AdaptiveMode adaptive_mode = AdaptiveMode::none;
  double terr_ratio = 1.0;
  std::vector<std::size_t> ibi_labels;
  std::uint64_t seed = 0;
  RunPaths paths;

  static const std::vector<std::string> &keys()
  {
    static const std::vector<std::string> k = {
      "bits", "conflict_rate", "lambda_b", "lambda_p", "beta_start", "beta_end", "lr", "steps_per_layer",
      "lb_gate", "trigger_fraction", "trigger_lr", "trigger_iters", "target_label", "adaptive_mode",
      "terr_ratio", "ibi_labels", "seed", "paths.dataset", "paths.model", "paths.reference", "paths.trigger",
      "paths.out"};
    return k;
  }

  void set(const std::string &key, const std::string &value);
  std::string get(const std::string &key) const;

  /// Every key with its resolved value.
  std::map<std::string, std::string> resolved() const
  {
    std::map<std::string, std::string> m;
    for (const auto &k : keys())
      m[k] = get(k);
    return m;
  }

  double effective_conflict_rate() const { return conflict_rate.value_or(default_conflict_rate(bits)); }

  RoundingConfig rounding() const
  {
    RoundingConfig r;
    r.lr = lr;
    r.steps = steps_per_layer;
    r.lambda_p = lambda_p;
    r.beta_start = beta_start;
    r.beta_end = beta_end;
    return r;
  }

  QuantizeConfig quantize_config() const { return {bits, RoundingPolicy::optimized, rounding()}; }

  AttackConfig attack_config() const
  {
    AttackConfig a;
    a.bits = bits;
    a.conflict_rate = effective_conflict_rate();
    a.lambda_b = lambda_b;
    a.lb_gate = lb_gate;
    a.rounding = rounding();
    a.trigger_fraction = trigger_fraction;
    a.trigger.lr = trigger_lr;
    a.trigger.iterations = trigger_iters;
    a.target_label = target_label;
    a.seed = seed;
    return a;
  }

  AdaptivePlan adaptive_plan() const
  {
    AdaptivePlan p;
    p.mode = adaptive_mode;
    p.terr_ratio = terr_ratio;
    p.ibi_labels = ibi_labels;
    p.seed = seed;
    return p;
  }
};

namespace detail
{

inline std::string trim(std::string_view s)
{
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_real(const std::string &key, const std::string &v)
{
  double x = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(x))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline std::uint64_t parse_count(const std::string &key, const std::string &v)
{
  std::uint64_t x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

// Shortest text that reads back to the same double.
inline std::string format_real(double x)
{
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

} // namespace detail

inline void RunConfig::set(const std::string &key, const std::string &raw)
{
  using namespace detail;
  const std::string v = trim(raw);
  auto nonneg = [&](double x) {
    if (x < 0.0)
      throw ConfigError(key + " must be non-negative");
    return x;
  };
  if (key == "bits")
  {
    const auto b = parse_count(key, v);
    if (b < 2 || b > 8)
      throw ConfigError("bits must be in 2..8, got " + v);
    bits = static_cast<int>(b);
  }
  else if (key == "conflict_rate")
  {
    if (v == "auto")
      conflict_rate.reset();
    else
    {
      const double r = parse_real(key, v);
      if (r < 0.0 || r > 1.0)
        throw ConfigError("conflict_rate must be in [0,1]");
      conflict_rate = r;
    }
  }
  else if (key == "lambda_b")
    lambda_b = nonneg(parse_real(key, v));
  else if (key == "lambda_p")
    lambda_p = nonneg(parse_real(key, v));
  else if (key == "beta_start")
    beta_start = parse_real(key, v);
  else if (key == "beta_end")
    beta_end = parse_real(key, v);
  else if (key == "lr")
    lr = parse_real(key, v);
  else if (key == "steps_per_layer")
    steps_per_layer = parse_count(key, v);
  else if (key == "lb_gate")
  {
    lb_gate = parse_real(key, v);
    if (!(lb_gate > 0.0))
      throw ConfigError("lb_gate must be positive");
  }
  else if (key == "trigger_fraction")
  {
    trigger_fraction = parse_real(key, v);
    if (!(trigger_fraction > 0.0 && trigger_fraction <= 1.0))
      throw ConfigError("trigger_fraction must be in (0,1]");
  }
  else if (key == "trigger_lr")
    trigger_lr = parse_real(key, v);
  else if (key == "trigger_iters")
    trigger_iters = parse_count(key, v);
  else if (key == "target_label")
  {
    if (v == "auto")
      target_label.reset();
    else
      target_label = parse_count(key, v);
  }
  else if (key == "adaptive_mode")
    adaptive_mode = parse_adaptive_mode(v);
  else if (key == "terr_ratio")
    terr_ratio = nonneg(parse_real(key, v));
  else if (key == "ibi_labels")
  {
    ibi_labels.clear();
    if (v != "auto" && !v.empty())
    {
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ','))
        ibi_labels.push_back(parse_count(key, trim(item)));
    }
  }
  else if (key == "seed")
    seed = parse_count(key, v);
  else if (key == "paths.dataset")
    paths.dataset = v;
  else if (key == "paths.model")
    paths.model = v;
  else if (key == "paths.reference")
    paths.reference = v;
  else if (key == "paths.trigger")
    paths.trigger = v;
  else if (key == "paths.out")
  {
    if (v.empty())
      throw ConfigError("paths.out must not be empty");
    paths.out = v;
  }
  else
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::string RunConfig::get(const std::string &key) const
{
  using detail::format_real;
  if (key == "bits")
    return std::to_string(bits);
  if (key == "conflict_rate")
    return format_real(effective_conflict_rate());
  if (key == "lambda_b")
    return format_real(lambda_b);
  if (key == "lambda_p")
    return format_real(lambda_p);
  if (key == "beta_start")
    return format_real(beta_start);
  if (key == "beta_end")
    return format_real(beta_end);
  if (key == "lr")
    return format_real(lr);
  if (key == "steps_per_layer")
    return std::to_string(steps_per_layer);
  if (key == "lb_gate")
    return format_real(lb_gate);
  if (key == "trigger_fraction")
    return format_real(trigger_fraction);
  if (key == "trigger_lr")
    return format_real(trigger_lr);
  if (key == "trigger_iters")
    return std::to_string(trigger_iters);
  if (key == "target_label")
    return target_label ? std::to_string(*target_label) : "auto";
  if (key == "adaptive_mode")
    return to_string(adaptive_mode);
  if (key == "terr_ratio")
    return format_real(terr_ratio);
  if (key == "ibi_labels")
  {
    if (ibi_labels.empty())
      return "auto";
    std::string s;
    for (std::size_t i = 0; i < ibi_labels.size(); ++i)
      s += (i ? "," : "") + std::to_string(ibi_labels[i]);
    return s;
  }
  if (key == "seed")
    return std::to_string(seed);
  if (key == "paths.dataset")
    return paths.dataset;
  if (key == "paths.model")
    return paths.model;
  if (key == "paths.reference")
    return paths.reference;
  if (key == "paths.trigger")
    return paths.trigger;
  if (key == "paths.out")
    return paths.out;
  throw ConfigError("unknown config key '" + key + "'");
}

/// Apply "key = value" lines on top of `cfg`. Later lines win; a key repeated in one text is an
/// error.
inline void parse_config_text(RunConfig &cfg, std::string_view text)
{
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line))
  {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos)
      line.resize(hash);
    const std::string t = detail::trim(line);
    if (t.empty())
      continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (auto [it, fresh] = seen.emplace(key, line_no); !fresh)
      throw ConfigError("line " + std::to_string(line_no) + ": '" + key + "' already set on line " +
                        std::to_string(it->second));
    try
    {
      cfg.set(key, t.substr(eq + 1));
    }
    catch (const ConfigError &e)
    {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
    catch (const Error &e)
    {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

/// Apply a single "key=value" override.
inline void apply_override(RunConfig &cfg, std::string_view assignment)
{
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  try
  {
    cfg.set(detail::trim(assignment.substr(0, eq)), std::string(assignment.substr(eq + 1)));
  }
  catch (const ConfigError &)
  {
    throw;
  }
  catch (const Error &e)
  {
    throw ConfigError(e.what());
  }
}

} // namespace roundlab
