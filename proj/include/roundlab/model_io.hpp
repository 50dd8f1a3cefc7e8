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

// QNET1 model files.
//
//   "QNET1" | u8 version=1 | u32 layer_count | layer records...
//
// Layer record: u8 kind tag, then u32 dims for that kind, then f32 weights row-major, then f32 biases.
//   dense   (0): out, in, has_bias            | out*in weights | out biases if has_bias
//   conv2d  (1): o, c, kh, kw, stride, pad, in_h, in_w, has_bias
//                                             | o*c*kh*kw weights | o biases if has_bias
//   relu    (2): rank, dims[rank]   (input shape)
//   flatten (3): rank, dims[rank]   (input shape)
// All integers and floats are little-endian.

#pragma once

#include "roundlab/binary_io.hpp"
#include "roundlab/network.hpp"

#include <filesystem>

namespace roundlab
{

inline constexpr std::string_view kModelMagic = "QNET1";
inline constexpr std::uint8_t kModelVersion = 1;

inline std::vector<char> serialize_model(const Model &model)
{
  io::Writer w;
  w.bytes(kModelMagic);
  w.u8(kModelVersion);
  w.u32(static_cast<std::uint32_t>(model.layers().size()));
  const auto shapes = model.shapes();
  for (std::size_t i = 0; i < model.layers().size(); ++i)
  {
    const Layer &l = model.layers()[i];
    const Shape &in = shapes[i];
    w.u8(static_cast<std::uint8_t>(l.kind));
    switch (l.kind)
    {
    case LayerKind::dense:
      w.u32(static_cast<std::uint32_t>(l.weights.dim(0)));
      w.u32(static_cast<std::uint32_t>(l.weights.dim(1)));
      w.u32(l.bias.empty() ? 0u : 1u);
      break;
    case LayerKind::conv2d:
      for (std::size_t d = 0; d < 4; ++d)
        w.u32(static_cast<std::uint32_t>(l.weights.dim(d)));
      w.u32(static_cast<std::uint32_t>(l.geometry.stride));
      w.u32(static_cast<std::uint32_t>(l.geometry.pad));
      w.u32(static_cast<std::uint32_t>(in[1]));
      w.u32(static_cast<std::uint32_t>(in[2]));
      w.u32(l.bias.empty() ? 0u : 1u);
      break;
    case LayerKind::relu:
    case LayerKind::flatten:
      w.u32(static_cast<std::uint32_t>(in.size()));
      for (auto d : in)
        w.u32(static_cast<std::uint32_t>(d));
      break;
    }
    for (double v : l.weights.data())
      w.f32(static_cast<float>(v));
    for (double v : l.bias.data())
      w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

inline Model deserialize_model(std::vector<char> bytes)
{
  io::Reader r(std::move(bytes));
  r.expect_magic(kModelMagic, "model");
  const std::size_t version_at = r.offset();
  if (r.u8("version") != kModelVersion)
    throw FormatError("unsupported model version", version_at);
  const std::uint32_t count = r.u32("layer count");
  if (count == 0)
    throw FormatError("model declares zero layers", r.offset());

  auto read_floats = [&](std::size_t n, const char *what) {
    std::vector<double> v(n);
    for (auto &x : v)
      x = r.f32(what);
    return v;
  };
  auto positive = [&](std::uint32_t v, const char *what) {
    if (v == 0)
      throw FormatError(std::string("zero ") + what, r.offset());
    return static_cast<std::size_t>(v);
  };

  std::vector<Layer> layers;
  std::vector<Shape> declared_inputs;
  for (std::uint32_t i = 0; i < count; ++i)
  {
    const std::size_t tag_at = r.offset();
    const std::uint8_t tag = r.u8("layer kind");
    switch (tag)
    {
    case 0:
    {
      const std::size_t out = positive(r.u32("dense out"), "dense out");
      const std::size_t in = positive(r.u32("dense in"), "dense in");
      const bool has_bias = r.u32("dense has_bias") != 0;
      Tensor w({out, in}, read_floats(out * in, "dense weights"));
      Tensor b = has_bias ? Tensor({out}, read_floats(out, "dense bias")) : Tensor{};
      layers.push_back(Layer::dense(std::move(w), std::move(b)));
      declared_inputs.push_back({in});
      break;
    }
    case 1:
    {
      const std::size_t o = positive(r.u32("conv o"), "conv o");
      const std::size_t c = positive(r.u32("conv c"), "conv c");
      const std::size_t kh = positive(r.u32("conv kh"), "conv kh");
      const std::size_t kw = positive(r.u32("conv kw"), "conv kw");
      const std::size_t stride = positive(r.u32("conv stride"), "conv stride");
      const std::size_t pad = r.u32("conv pad");
      const std::size_t ih = positive(r.u32("conv in_h"), "conv in_h");
      const std::size_t iw = positive(r.u32("conv in_w"), "conv in_w");
      const bool has_bias = r.u32("conv has_bias") != 0;
      Tensor w({o, c, kh, kw}, read_floats(o * c * kh * kw, "conv weights"));
      Tensor b = has_bias ? Tensor({o}, read_floats(o, "conv bias")) : Tensor{};
      layers.push_back(Layer::conv2d(std::move(w), std::move(b), {stride, pad}));
      declared_inputs.push_back({c, ih, iw});
      break;
    }
    case 2:
    case 3:
    {
      const std::uint32_t rank = r.u32("rank");
      if (rank == 0 || rank > 8)
        throw FormatError("implausible rank " + std::to_string(rank), r.offset());
      Shape s;
      for (std::uint32_t d = 0; d < rank; ++d)
        s.push_back(positive(r.u32("dim"), "dim"));
      layers.push_back(tag == 2 ? Layer::relu() : Layer::flatten());
      declared_inputs.push_back(s);
      break;
    }
    default:
      throw FormatError("unknown layer kind " + std::to_string(tag), tag_at);
    }
  }
  r.expect_end("model");

  try
  {
    Model m(declared_inputs.front(), std::move(layers));
    const auto shapes = m.shapes();
    for (std::size_t i = 0; i < declared_inputs.size(); ++i)
      if (shapes[i] != declared_inputs[i])
        throw FormatError("layer " + std::to_string(i) + " declares input " + shape_string(declared_inputs[i]) +
                            " but receives " + shape_string(shapes[i]),
                          r.offset());
    return m;
  }
  catch (const FormatError &)
  {
    throw;
  }
  catch (const Error &e)
  {
    throw FormatError(std::string("invalid model: ") + e.what(), r.offset());
  }
}

inline void save_model(const Model &model, const std::filesystem::path &path)
{
  io::write_file_atomic(path, serialize_model(model));
}

inline Model load_model(const std::filesystem::path &path)
{
  return deserialize_model(io::read_file(path));
}

/// Round every weight and bias through IEEE-754 single precision, as a save/load cycle would.
inline Model round_to_f32(const Model &model)
{
  Model m = model;
  for (auto i : m.weighted_indices())
  {
    Tensor w = m.layer(i).weights;
    for (auto &v : w.data())
      v = static_cast<float>(v);
    Tensor b = m.layer(i).bias;
    for (auto &v : b.data())
      v = static_cast<float>(v);
    m.set_weights(i, std::move(w));
    m.set_bias(i, std::move(b));
  }
  return m;
}

} // namespace roundlab
