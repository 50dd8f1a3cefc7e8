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

#pragma once

#include "roundlab/binary_io.hpp"
#include "roundlab/network.hpp"

#include <cmath>
#include <filesystem>
#include <vector>

namespace roundlab
{

/// Patch trigger: x_t = (1 - mask) * x + mask * pattern, classified as `target`.
struct Trigger
{
  Tensor mask;    // 0/1 over the per-sample input shape [c,h,w]
  Tensor pattern; // [c,h,w], values in [0,1]
  std::size_t target = 0;

  double area_fraction() const
  {
    double on = 0.0;
    for (double v : mask.data())
      on += v;
    return on / static_cast<double>(mask.size());
  }
};

enum class Corner
{
  bottom_right,
  bottom_left,
  top_right,
  top_left,
};

/// Square mask in one corner whose side makes its area closest to `fraction` of the image.
inline Tensor corner_mask(const Shape &input_shape, double fraction, Corner corner = Corner::bottom_right)
{
  if (input_shape.size() != 3)
    throw DimensionError("corner_mask expects a [c,h,w] input shape");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ArgumentError("trigger fraction must lie in (0,1]");
  const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
  const auto side = std::clamp<std::size_t>(
    static_cast<std::size_t>(std::lround(std::sqrt(fraction * static_cast<double>(h * w)))), 1, std::min(h, w));
  const std::size_t y0 = (corner == Corner::bottom_right || corner == Corner::bottom_left) ? h - side : 0;
  const std::size_t x0 = (corner == Corner::bottom_right || corner == Corner::top_right) ? w - side : 0;
  Tensor m(input_shape);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = y0; y < y0 + side; ++y)
      for (std::size_t x = x0; x < x0 + side; ++x)
        m[(ch * h + y) * w + x] = 1.0;
  return m;
}

/// Stamp a single [c,h,w] sample or a [b,c,h,w] batch, clamping to [0,1].
inline Tensor stamp_trigger(const Tensor &x, const Tensor &mask, const Tensor &pattern)
{
  if (mask.shape() != pattern.shape())
    throw DimensionError("trigger mask and pattern shapes differ");
  const std::size_t per = mask.size();
  const bool single = x.shape() == mask.shape();
  const bool batch = x.rank() == mask.rank() + 1 &&
                     std::equal(mask.shape().begin(), mask.shape().end(), x.shape().begin() + 1);
  if (!single && !batch)
    throw DimensionError("cannot stamp " + shape_string(mask.shape()) + " trigger onto " + shape_string(x.shape()));
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
  {
    const std::size_t j = i % per;
    const double v = (1.0 - mask[j]) * x[i] + mask[j] * pattern[j];
    out[i] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

inline Tensor stamp_trigger(const Tensor &x, const Trigger &t) { return stamp_trigger(x, t.mask, t.pattern); }

struct TriggerGenConfig
{
  double lr = 0.1;
  std::size_t iterations = 100;
  double init = 0.5;
};

/// Optimize the pattern under a fixed mask so that stamped calibration inputs are classified as
/// `target`. One gradient step per calibration batch per iteration; the pattern stays in [0,1].
inline Trigger generate_trigger(const Model &model, const std::vector<Tensor> &calibration, std::size_t target,
                                const Tensor &mask, const TriggerGenConfig &cfg = {})
{
  if (target >= model.num_classes())
    throw IndexError("trigger target " + std::to_string(target) + " out of range");
  if (mask.shape() != model.input_shape())
    throw DimensionError("trigger mask shape does not match the model input");
  Tensor pattern(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i)
    pattern[i] = mask[i] * cfg.init;

  const std::size_t per = mask.size();
  for (std::size_t it = 0; it < cfg.iterations; ++it)
    for (const auto &batch : calibration)
    {
      const Tensor xt = stamp_trigger(batch, mask, pattern);
      const std::vector<std::size_t> targets(xt.dim(0), target);
      const Tensor g = backward_input(model, xt, targets);
      if (!g.all_finite())
        throw NumericError("trigger generation diverged at iteration " + std::to_string(it));
      std::vector<double> gp(per, 0.0);
      for (std::size_t i = 0; i < g.size(); ++i)
        gp[i % per] += g[i];
      for (std::size_t j = 0; j < per; ++j)
        pattern[j] = std::clamp(pattern[j] - cfg.lr * mask[j] * gp[j], 0.0, 1.0);
    }
  for (std::size_t j = 0; j < per; ++j)
    pattern[j] *= mask[j];
  return Trigger{mask, pattern, target};
}

// QTRG1 trigger files:
//   "QTRG1" | u32 h | u32 w | u32 c | f32 mask[c*h*w] | f32 pattern[c*h*w] | u32 target
// Pixel arrays are stored in [c,h,w] row-major order.
inline constexpr std::string_view kTriggerMagic = "QTRG1";

inline std::vector<char> serialize_trigger(const Trigger &t)
{
  if (t.mask.rank() != 3)
    throw DimensionError("trigger must be [c,h,w]");
  io::Writer w;
  w.bytes(kTriggerMagic);
  w.u32(static_cast<std::uint32_t>(t.mask.dim(1)));
  w.u32(static_cast<std::uint32_t>(t.mask.dim(2)));
  w.u32(static_cast<std::uint32_t>(t.mask.dim(0)));
  for (double v : t.mask.data())
    w.f32(static_cast<float>(v));
  for (double v : t.pattern.data())
    w.f32(static_cast<float>(v));
  w.u32(static_cast<std::uint32_t>(t.target));
  return w.buffer();
}

inline Trigger deserialize_trigger(std::vector<char> bytes)
{
  io::Reader r(std::move(bytes));
  r.expect_magic(kTriggerMagic, "trigger");
  const std::size_t h = r.u32("h"), w = r.u32("w"), c = r.u32("c");
  if (!h || !w || !c)
    throw FormatError("zero trigger dimension", r.offset());
  Tensor mask({c, h, w}), pattern({c, h, w});
  for (auto &v : mask.data())
  {
    const std::size_t at = r.offset();
    v = r.f32("mask");
    if (v != 0.0 && v != 1.0)
      throw FormatError("mask value is not 0 or 1", at);
  }
  for (auto &v : pattern.data())
  {
    const std::size_t at = r.offset();
    v = r.f32("pattern");
    if (!(v >= 0.0 && v <= 1.0))
      throw FormatError("pattern value out of range [0,1]", at);
  }
  const std::size_t target = r.u32("target");
  r.expect_end("trigger");
  return Trigger{mask, pattern, target};
}

inline void save_trigger(const Trigger &t, const std::filesystem::path &path)
{
  io::write_file_atomic(path, serialize_trigger(t));
}

inline Trigger load_trigger(const std::filesystem::path &path) { return deserialize_trigger(io::read_file(path)); }

} // namespace roundlab
