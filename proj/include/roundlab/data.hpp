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
#include "roundlab/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

namespace roundlab
{

/// Images in [0,1] with optional labels. Calibration sets carry no labels.
struct Dataset
{
  Tensor images; // [n,c,h,w]
  std::optional<std::vector<std::size_t>> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  bool labeled() const { return labels.has_value(); }

  const std::vector<std::size_t> &require_labels(std::string_view who) const
  {
    if (!labels)
      throw ArgumentError(std::string(who) + " needs a labeled dataset");
    return *labels;
  }

  void validate() const
  {
    if (images.rank() != 4)
      throw DimensionError("dataset images must be [n,c,h,w], got " + shape_string(images.shape()));
    for (double v : images.data())
      if (!(v >= 0.0 && v <= 1.0))
        throw ArgumentError("dataset pixel outside [0,1]");
    if (labels)
    {
      if (labels->size() != size())
        throw DimensionError("label count does not match image count");
      for (auto y : *labels)
        if (y >= num_classes)
          throw IndexError("label " + std::to_string(y) + " out of range");
    }
  }
};

/// Rows [idx...] of a dataset, in the given order.
inline Dataset subset(const Dataset &d, const std::vector<std::size_t> &idx)
{
  if (idx.empty())
    throw ArgumentError("empty subset");
  const std::size_t per = d.images.size() / d.size();
  Shape shape = d.images.shape();
  shape[0] = idx.size();
  std::vector<double> px;
  px.reserve(idx.size() * per);
  std::optional<std::vector<std::size_t>> labels;
  if (d.labels)
    labels.emplace();
  for (auto i : idx)
  {
    if (i >= d.size())
      throw IndexError("subset index out of range");
    const auto row = d.images.data().subspan(i * per, per);
    px.insert(px.end(), row.begin(), row.end());
    if (labels)
      labels->push_back((*d.labels)[i]);
  }
  return Dataset{Tensor(shape, std::move(px)), std::move(labels), d.num_classes};
}

inline Dataset strip_labels(Dataset d)
{
  d.labels.reset();
  return d;
}

/// Consecutive batches of at most `batch_size` samples.
inline std::vector<Tensor> batches(const Dataset &d, std::size_t batch_size)
{
  if (batch_size == 0)
    throw ArgumentError("batch size must be positive");
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < d.size(); b += batch_size)
    out.push_back(d.images.rows(b, std::min(d.size(), b + batch_size)));
  return out;
}

struct SynthConfig
{
  std::size_t classes = 4;
  std::size_t size = 5000;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
};

namespace detail
{

inline double segment_distance(double py, double px, double ay, double ax, double by, double bx)
{
  const double dy = by - ay, dx = bx - ax;
  const double len2 = dy * dy + dx * dx;
  double t = len2 > 0 ? ((py - ay) * dy + (px - ax) * dx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qy = ay + t * dy - py, qx = ax + t * dx - px;
  return std::sqrt(qy * qy + qx * qx);
}

} // namespace detail

/// Class-conditional stroke images: each class draws one shape family (bar, column, diagonal,
/// ring, anti-diagonal, cross), with jittered position, size, thickness and brightness, a random
/// distractor blob, and background noise. Classes beyond six reuse the families at a different
/// scale. Labels cycle through the classes so histograms are balanced within one.
inline Dataset synth_dataset(const SynthConfig &cfg)
{
  if (cfg.classes < 2)
    throw ArgumentError("synth_dataset needs at least two classes");
  if (cfg.size == 0 || cfg.height < 4 || cfg.width < 4 || cfg.channels == 0)
    throw ArgumentError("synth_dataset needs a non-empty set of images at least 4x4");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  std::normal_distribution<double> noise(0.0, 0.06);

  std::vector<std::size_t> labels(cfg.size);
  for (std::size_t i = 0; i < cfg.size; ++i)
    labels[i] = i % cfg.classes;
  std::shuffle(labels.begin(), labels.end(), rng);

  const std::size_t h = cfg.height, w = cfg.width, c = cfg.channels;
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  Tensor images({cfg.size, c, h, w});
  for (std::size_t n = 0; n < cfg.size; ++n)
  {
    const std::size_t k = labels[n];
    const std::size_t family = k % 6;
    const double scale = 1.0 - 0.25 * static_cast<double>((k / 6) % 3);
    const double cy = H * 0.42 + uni(-1.5, 1.5), cx = W * 0.42 + uni(-1.5, 1.5);
    const double half = scale * uni(0.26, 0.34) * std::min(H, W);
    const double sigma = uni(0.55, 0.9);
    const double amp = uni(0.65, 1.0);
    const double by = uni(0.0, H), bx = uni(0.0, W), bamp = uni(0.0, 0.45), bsig = uni(0.8, 1.6);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
      {
        const double py = static_cast<double>(y), px = static_cast<double>(x);
        double d = 0.0;
        switch (family)
        {
        case 0:
          d = detail::segment_distance(py, px, cy, cx - half, cy, cx + half);
          break;
        case 1:
          d = detail::segment_distance(py, px, cy - half, cx, cy + half, cx);
          break;
        case 2:
          d = detail::segment_distance(py, px, cy - half, cx - half, cy + half, cx + half);
          break;
        case 3:
          d = std::abs(std::hypot(py - cy, px - cx) - 0.8 * half);
          break;
        case 4:
          d = detail::segment_distance(py, px, cy - half, cx + half, cy + half, cx - half);
          break;
        default:
          d = std::min(detail::segment_distance(py, px, cy, cx - half, cy, cx + half),
                       detail::segment_distance(py, px, cy - half, cx, cy + half, cx));
          break;
        }
        const double stroke = amp * std::exp(-d * d / (2 * sigma * sigma));
        const double blob = bamp * std::exp(-((py - by) * (py - by) + (px - bx) * (px - bx)) / (2 * bsig * bsig));
        for (std::size_t ch = 0; ch < c; ++ch)
        {
          const double v = 0.08 + stroke + blob + noise(rng);
          images[((n * c + ch) * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
        }
      }
  }
  return Dataset{std::move(images), std::move(labels), cfg.classes};
}

/// First `n_first` samples and the remainder.
inline std::pair<Dataset, Dataset> split(const Dataset &d, std::size_t n_first)
{
  if (n_first == 0 || n_first >= d.size())
    throw ArgumentError("split point must leave both parts non-empty");
  std::vector<std::size_t> a(n_first), b(d.size() - n_first);
  std::iota(a.begin(), a.end(), 0);
  std::iota(b.begin(), b.end(), n_first);
  return {subset(d, a), subset(d, b)};
}

/// Stratified seeded sample of round(fraction * n) images, every class present, labels stripped.
/// Per-class quotas are proportional (largest remainder), with each class guaranteed one slot.
inline Dataset build_calibration(const Dataset &d, double fraction, std::uint64_t seed)
{
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ArgumentError("calibration fraction must lie in (0,1]");
  const auto &labels = d.require_labels("build_calibration");
  const std::size_t total = std::max<std::size_t>(
    1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(d.size()))));

  std::vector<std::vector<std::size_t>> by_class(d.num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i]].push_back(i);
  std::vector<std::size_t> present;
  for (std::size_t k = 0; k < d.num_classes; ++k)
    if (!by_class[k].empty())
      present.push_back(k);
  if (total < present.size())
    throw ArgumentError("calibration fraction yields " + std::to_string(total) + " samples, fewer than the " +
                        std::to_string(present.size()) + " classes present");

  std::vector<std::size_t> quota(d.num_classes, 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (auto k : present)
  {
    const double exact = static_cast<double>(total) * static_cast<double>(by_class[k].size()) /
                         static_cast<double>(d.size());
    quota[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[k];
    remainders.push_back({exact - std::floor(exact), k});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto &a, const auto &b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned)
    ++quota[remainders[i % remainders.size()].second];
  // Guarantee coverage by borrowing from the largest quota.
  for (auto k : present)
    if (quota[k] == 0)
    {
      auto donor = std::max_element(quota.begin(), quota.end());
      --*donor;
      quota[k] = 1;
    }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  for (auto k : present)
  {
    auto idx = by_class[k];
    std::shuffle(idx.begin(), idx.end(), rng);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(quota[k]));
  }
  std::shuffle(chosen.begin(), chosen.end(), rng);
  return strip_labels(subset(d, chosen));
}

inline constexpr std::size_t kEvalChunk = 256;

inline std::vector<std::size_t> predict_all(const Model &model, const Tensor &images)
{
  std::vector<std::size_t> out;
  out.reserve(images.dim(0));
  for (std::size_t b = 0; b < images.dim(0); b += kEvalChunk)
  {
    const auto p = predict(model, images.rows(b, std::min(images.dim(0), b + kEvalChunk)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// Clean accuracy: fraction of samples whose argmax logit equals the label.
inline double eval_ca(const Model &model, const Dataset &d)
{
  const auto &labels = d.require_labels("eval_ca");
  if (d.size() == 0)
    throw ArgumentError("eval_ca on an empty dataset");
  const auto pred = predict_all(model, d.images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

/// Attack success rate over samples whose true label differs from the trigger target.
inline double eval_asr(const Model &model, const Dataset &d, const Trigger &trigger)
{
  const auto &labels = d.require_labels("eval_asr");
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != trigger.target)
      keep.push_back(i);
  if (keep.empty())
    throw ArgumentError("eval_asr: every sample belongs to the target class");
  const Tensor stamped = stamp_trigger(subset(d, keep).images, trigger);
  const auto pred = predict_all(model, stamped);
  std::size_t hit = 0;
  for (auto p : pred)
    hit += p == trigger.target;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// QDAT1 dataset files:
//   "QDAT1" | u8 version=1 | u32 n | u32 c | u32 h | u32 w | f32 pixels[n*c*h*w]
//   | u8 has_labels | u16 labels[n] if has_labels
// num_classes is not stored; it is recovered as max(label)+1 (0 for unlabeled files).
inline constexpr std::string_view kDatasetMagic = "QDAT1";
inline constexpr std::uint8_t kDatasetVersion = 1;

inline std::vector<char> serialize_dataset(const Dataset &d)
{
  d.validate();
  io::Writer w;
  w.bytes(kDatasetMagic);
  w.u8(kDatasetVersion);
  for (auto dim : d.images.shape())
    w.u32(static_cast<std::uint32_t>(dim));
  for (double v : d.images.data())
    w.f32(static_cast<float>(v));
  w.u8(d.labels ? 1 : 0);
  if (d.labels)
    for (auto y : *d.labels)
    {
      if (y > 0xFFFF)
        throw ArgumentError("label does not fit in 16 bits");
      w.u16(static_cast<std::uint16_t>(y));
    }
  return w.buffer();
}

inline Dataset deserialize_dataset(std::vector<char> bytes)
{
  io::Reader r(std::move(bytes));
  r.expect_magic(kDatasetMagic, "dataset");
  const std::size_t version_at = r.offset();
  if (r.u8("version") != kDatasetVersion)
    throw FormatError("unsupported dataset version", version_at);
  Shape shape(4);
  for (auto &d : shape)
  {
    d = r.u32("dataset dims");
    if (d == 0)
      throw FormatError("zero dataset dimension", r.offset());
  }
  Tensor images(shape);
  for (auto &v : images.data())
  {
    const std::size_t at = r.offset();
    v = r.f32("pixels");
    if (!(v >= 0.0 && v <= 1.0))
      throw FormatError("pixel value " + std::to_string(v) + " out of range [0,1]", at);
  }
  const std::size_t flag_at = r.offset();
  const std::uint8_t has_labels = r.u8("has_labels");
  if (has_labels > 1)
    throw FormatError("has_labels must be 0 or 1", flag_at);
  Dataset d{std::move(images), std::nullopt, 0};
  if (has_labels)
  {
    std::vector<std::size_t> labels(shape[0]);
    for (auto &y : labels)
      y = r.u16("labels");
    d.num_classes = *std::max_element(labels.begin(), labels.end()) + 1;
    d.labels = std::move(labels);
  }
  r.expect_end("dataset");
  return d;
}

inline void save_dataset(const Dataset &d, const std::filesystem::path &path)
{
  io::write_file_atomic(path, serialize_dataset(d));
}

inline Dataset load_dataset(const std::filesystem::path &path) { return deserialize_dataset(io::read_file(path)); }

} // namespace roundlab
