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

#include "roundlab/optim.hpp"
#include "roundlab/tensor.hpp"

#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

namespace roundlab
{

enum class LayerKind : std::uint8_t
{
  dense = 0,
  conv2d = 1,
  relu = 2,
  flatten = 3,
};

inline const char *to_string(LayerKind k)
{
  switch (k)
  {
  case LayerKind::dense:
    return "dense";
  case LayerKind::conv2d:
    return "conv2d";
  case LayerKind::relu:
    return "relu";
  case LayerKind::flatten:
    return "flatten";
  }
  return "?";
}

/// One network layer. Dense weights are [out,in]; conv kernels are [o,c,kh,kw].
struct Layer
{
  LayerKind kind = LayerKind::relu;
  Tensor weights;
  Tensor bias;
  ConvGeometry geometry;

  static Layer dense(Tensor w, Tensor b = {})
  {
    if (w.rank() != 2)
      throw DimensionError("dense weights must be [out,in]");
    if (!b.empty() && (b.rank() != 1 || b.size() != w.dim(0)))
      throw DimensionError("dense bias must have one entry per output");
    return Layer{LayerKind::dense, std::move(w), std::move(b), {}};
  }

  static Layer conv2d(Tensor k, Tensor b, ConvGeometry g)
  {
    if (k.rank() != 4)
      throw DimensionError("conv kernel must be [o,c,kh,kw]");
    if (!b.empty() && (b.rank() != 1 || b.size() != k.dim(0)))
      throw DimensionError("conv bias must have one entry per output channel");
    return Layer{LayerKind::conv2d, std::move(k), std::move(b), g};
  }

  static Layer relu() { return Layer{LayerKind::relu, {}, {}, {}}; }
  static Layer flatten() { return Layer{LayerKind::flatten, {}, {}, {}}; }

  bool weighted() const noexcept { return kind == LayerKind::dense || kind == LayerKind::conv2d; }

  std::size_t out_features() const { return weights.dim(0); }

  /// Number of inputs feeding one output unit (in, or c*kh*kw).
  std::size_t fan_in() const { return weights.size() / weights.dim(0); }

  /// Weights viewed as an [out, fan_in] matrix.
  Tensor weight_matrix() const { return weights.reshaped({out_features(), fan_in()}); }

  Shape output_shape(const Shape &in) const
  {
    switch (kind)
    {
    case LayerKind::dense:
      if (shape_size(in) != weights.dim(1) || in.size() != 1)
        throw DimensionError("dense layer expects input [" + std::to_string(weights.dim(1)) + "], got " +
                             shape_string(in));
      return {weights.dim(0)};
    case LayerKind::conv2d:
      if (in.size() != 3 || in[0] != weights.dim(1))
        throw DimensionError("conv layer expects [" + std::to_string(weights.dim(1)) + ",h,w], got " +
                             shape_string(in));
      return {weights.dim(0), conv_output_extent(in[1], weights.dim(2), geometry),
              conv_output_extent(in[2], weights.dim(3), geometry)};
    case LayerKind::relu:
      return in;
    case LayerKind::flatten:
      return {shape_size(in)};
    }
    return in;
  }
};

/// Ordered feed-forward network over per-sample inputs of `input_shape`.
class Model
{
public:
  Model() = default;

  Model(Shape input_shape, std::vector<Layer> layers) : input_shape_(std::move(input_shape)), layers_(std::move(layers))
  {
    validate();
  }

  const Shape &input_shape() const noexcept { return input_shape_; }
  const std::vector<Layer> &layers() const noexcept { return layers_; }
  std::size_t num_classes() const noexcept { return num_classes_; }

  const Layer &layer(std::size_t i) const { return layers_.at(i); }

  /// Replace the weights of a weighted layer, keeping its shape.
  void set_weights(std::size_t i, Tensor w)
  {
    auto &l = layers_.at(i);
    if (!l.weighted() || w.size() != l.weights.size())
      throw DimensionError("set_weights: incompatible replacement for layer " + std::to_string(i));
    l.weights = w.reshaped(l.weights.shape());
  }

  void set_bias(std::size_t i, Tensor b)
  {
    auto &l = layers_.at(i);
    if (b.size() != l.bias.size())
      throw DimensionError("set_bias: incompatible replacement for layer " + std::to_string(i));
    l.bias = std::move(b);
  }

  /// Layer indices of dense and conv layers, in order.
  std::vector<std::size_t> weighted_indices() const
  {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].weighted())
        out.push_back(i);
    return out;
  }

  /// Per-sample input shape of every layer, plus the final output shape at the end.
  std::vector<Shape> shapes() const
  {
    std::vector<Shape> s{input_shape_};
    for (const auto &l : layers_)
      s.push_back(l.output_shape(s.back()));
    return s;
  }

  void validate()
  {
    if (input_shape_.empty())
      throw DimensionError("model input shape is empty");
    const auto w = weighted_indices();
    if (w.empty())
      throw ArgumentError("model needs at least one dense or conv layer");
    for (auto i : w)
      if (layers_[i].weights.empty() || !layers_[i].weights.all_finite())
        throw ArgumentError("layer " + std::to_string(i) + " has empty or non-finite weights");
    const auto s = shapes();
    if (s.back().size() != 1)
      throw DimensionError("model must end in a flat logit vector, got " + shape_string(s.back()));
    if (s.back()[0] != layers_[w.back()].out_features())
      throw DimensionError("last weighted layer must produce the logits");
    num_classes_ = s.back()[0];
  }

private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::size_t num_classes_ = 0;
};

inline Shape batch_shape(std::size_t b, const Shape &sample)
{
  Shape s{b};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

/// Apply one layer to a batch [b, ...].
inline Tensor apply_layer(const Layer &layer, const Tensor &x)
{
  const std::size_t b = x.dim(0);
  const Shape in(x.shape().begin() + 1, x.shape().end());
  const Shape out_s = layer.output_shape(in);
  switch (layer.kind)
  {
  case LayerKind::dense:
  {
    const std::size_t out = layer.weights.dim(0), n_in = layer.weights.dim(1);
    Tensor y({b, out});
    auto W = layer.weights.data();
    for (std::size_t s = 0; s < b; ++s)
    {
      const double *xs = &x.data()[s * n_in];
      for (std::size_t o = 0; o < out; ++o)
      {
        double acc = 0.0;
        const double *wr = &W[o * n_in];
        for (std::size_t i = 0; i < n_in; ++i)
          acc += wr[i] * xs[i];
        y[s * out + o] = acc + (layer.bias.empty() ? 0.0 : layer.bias[o]);
      }
    }
    return y;
  }
  case LayerKind::conv2d:
  {
    Tensor y(batch_shape(b, out_s));
    const std::size_t per = shape_size(out_s);
    const std::size_t plane = out_s[1] * out_s[2];
    for (std::size_t s = 0; s < b; ++s)
    {
      const Tensor ys = conv2d_im2col(x.slice(s), layer.weights, layer.geometry);
      for (std::size_t i = 0; i < per; ++i)
        y[s * per + i] = ys[i] + (layer.bias.empty() ? 0.0 : layer.bias[i / plane]);
    }
    return y;
  }
  case LayerKind::relu:
    return relu_forward(x);
  case LayerKind::flatten:
    return x.reshaped(batch_shape(b, out_s));
  }
  return x;
}

/// Inputs seen by each layer for one batch; inputs[i] feeds layers[i].
struct ForwardTrace
{
  std::vector<Tensor> inputs;
  Tensor output;
};

struct ForwardResult
{
  Tensor logits;
  ForwardTrace trace;
};

inline void check_batch(const Model &model, const Tensor &batch)
{
  if (batch.rank() != model.input_shape().size() + 1 ||
      !std::equal(model.input_shape().begin(), model.input_shape().end(), batch.shape().begin() + 1))
    throw DimensionError("batch shape " + shape_string(batch.shape()) + " does not match model input " +
                         shape_string(model.input_shape()));
}

inline ForwardResult forward(const Model &model, const Tensor &batch)
{
  check_batch(model, batch);
  ForwardResult r;
  Tensor x = batch;
  r.trace.inputs.reserve(model.layers().size());
  for (const auto &l : model.layers())
  {
    r.trace.inputs.push_back(x);
    x = apply_layer(l, x);
  }
  r.trace.output = x;
  r.logits = std::move(x);
  return r;
}

/// Logits only, without keeping the trace.
inline Tensor logits(const Model &model, const Tensor &batch)
{
  check_batch(model, batch);
  Tensor x = batch;
  for (const auto &l : model.layers())
    x = apply_layer(l, x);
  return x;
}

/// Run layers [from, layers.size()) on an activation batch that feeds layer `from`.
inline Tensor forward_from(const Model &model, std::size_t from, const Tensor &activations)
{
  Tensor x = activations;
  for (std::size_t i = from; i < model.layers().size(); ++i)
    x = apply_layer(model.layers()[i], x);
  return x;
}

inline std::vector<std::size_t> predict(const Model &model, const Tensor &batch)
{
  const Tensor z = logits(model, batch);
  const std::size_t b = z.dim(0), k = z.dim(1);
  std::vector<std::size_t> out(b);
  for (std::size_t s = 0; s < b; ++s)
    out[s] = argmax(z.data().subspan(s * k, k));
  return out;
}

/// Rows of the layer's unrolled input: [N, fan_in] where N is the batch size for dense
/// layers and batch * output positions for conv layers.
inline Tensor layer_patches(const Layer &layer, const Tensor &input)
{
  const std::size_t b = input.dim(0);
  if (layer.kind == LayerKind::dense)
    return input.reshaped({b, input.size() / b});
  if (layer.kind != LayerKind::conv2d)
    throw ArgumentError("layer_patches needs a weighted layer");
  const std::size_t kh = layer.weights.dim(2), kw = layer.weights.dim(3);
  std::vector<double> rows;
  std::size_t k = 0, p = 0;
  for (std::size_t s = 0; s < b; ++s)
  {
    const Tensor cols = im2col(input.slice(s), kh, kw, layer.geometry);
    k = cols.dim(0);
    p = cols.dim(1);
    const std::size_t base = rows.size();
    rows.resize(base + k * p);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < p; ++c)
        rows[base + c * k + r] = cols[r * p + c];
  }
  return Tensor({b * p, k}, std::move(rows));
}

/// Mean cross-entropy over a batch and its gradient w.r.t. the logits.
inline LossAndGrad mean_cross_entropy(const Tensor &logits, std::span<const std::size_t> targets)
{
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (targets.size() != b)
    throw DimensionError("expected " + std::to_string(b) + " targets, got " + std::to_string(targets.size()));
  LossAndGrad out{0.0, Tensor({b, k})};
  for (std::size_t s = 0; s < b; ++s)
  {
    const Tensor row({k}, std::vector<double>(logits.data().begin() + s * k, logits.data().begin() + (s + 1) * k));
    const auto lg = softmax_cross_entropy(row, targets[s]);
    out.loss += lg.loss;
    for (std::size_t j = 0; j < k; ++j)
      out.grad[s * k + j] = lg.grad[j] / static_cast<double>(b);
  }
  out.loss /= static_cast<double>(b);
  return out;
}

struct LayerGradient
{
  Tensor weights;
  Tensor bias;
};

struct BackwardResult
{
  std::vector<LayerGradient> layers; // empty entries for relu/flatten
  Tensor input;
};

/// Backpropagate a logit gradient [b,k] through a recorded trace.
inline BackwardResult backward(const Model &model, const ForwardTrace &trace, const Tensor &dlogits,
                               bool want_weights = true)
{
  const auto &layers = model.layers();
  BackwardResult r;
  r.layers.resize(layers.size());
  Tensor g = dlogits;
  for (std::size_t li = layers.size(); li-- > 0;)
  {
    const Layer &l = layers[li];
    const Tensor &x = trace.inputs[li];
    const std::size_t b = x.dim(0);
    switch (l.kind)
    {
    case LayerKind::dense:
    {
      const std::size_t out = l.weights.dim(0), n_in = l.weights.dim(1);
      if (want_weights)
      {
        Tensor dw({out, n_in});
        Tensor db({out});
        for (std::size_t s = 0; s < b; ++s)
          for (std::size_t o = 0; o < out; ++o)
          {
            const double go = g[s * out + o];
            db[o] += go;
            for (std::size_t i = 0; i < n_in; ++i)
              dw[o * n_in + i] += go * x[s * n_in + i];
          }
        r.layers[li] = {std::move(dw), l.bias.empty() ? Tensor{} : std::move(db)};
      }
      Tensor dx(x.shape());
      for (std::size_t s = 0; s < b; ++s)
        for (std::size_t o = 0; o < out; ++o)
        {
          const double go = g[s * out + o];
          for (std::size_t i = 0; i < n_in; ++i)
            dx[s * n_in + i] += go * l.weights[o * n_in + i];
        }
      g = std::move(dx);
      break;
    }
    case LayerKind::conv2d:
    {
      const std::size_t o = l.weights.dim(0), kh = l.weights.dim(2), kw = l.weights.dim(3);
      const Shape in_s(x.shape().begin() + 1, x.shape().end());
      const Tensor wm = l.weight_matrix();
      const Tensor wt = transpose(wm);
      Tensor dw({o, wm.dim(1)});
      Tensor db({o});
      Tensor dx(x.shape());
      const std::size_t per_in = shape_size(in_s);
      const std::size_t per_out = g.size() / b;
      const std::size_t plane = per_out / o;
      for (std::size_t s = 0; s < b; ++s)
      {
        const Tensor gs({o, plane}, std::vector<double>(g.data().begin() + s * per_out,
                                                        g.data().begin() + (s + 1) * per_out));
        const Tensor cols = im2col(x.slice(s), kh, kw, l.geometry);
        if (want_weights)
        {
          const Tensor part = matmul(gs, transpose(cols));
          for (std::size_t i = 0; i < dw.size(); ++i)
            dw[i] += part[i];
          for (std::size_t c = 0; c < o; ++c)
            for (std::size_t p = 0; p < plane; ++p)
              db[c] += gs[c * plane + p];
        }
        const Tensor dxs = col2im(matmul(wt, gs), in_s, kh, kw, l.geometry);
        std::copy(dxs.data().begin(), dxs.data().end(), dx.data().begin() + s * per_in);
      }
      if (want_weights)
        r.layers[li] = {dw.reshaped(l.weights.shape()), l.bias.empty() ? Tensor{} : std::move(db)};
      g = std::move(dx);
      break;
    }
    case LayerKind::relu:
      g = relu_backward(x, g);
      break;
    case LayerKind::flatten:
      g = g.reshaped(x.shape());
      break;
    }
  }
  r.input = std::move(g);
  return r;
}

inline void check_targets(const Model &model, const Tensor &batch, std::span<const std::size_t> targets)
{
  if (batch.empty() || batch.dim(0) == 0)
    throw ArgumentError("empty batch");
  if (targets.size() != batch.dim(0))
    throw DimensionError("one target per sample required");
  for (auto t : targets)
    if (t >= model.num_classes())
      throw IndexError("target " + std::to_string(t) + " out of range");
}

/// Mean cross-entropy gradient w.r.t. every weighted layer's weights and bias.
inline std::vector<LayerGradient> backward_weights(const Model &model, const Tensor &batch,
                                                   std::span<const std::size_t> targets)
{
  check_targets(model, batch, targets);
  const auto fr = forward(model, batch);
  const auto ce = mean_cross_entropy(fr.logits, targets);
  return backward(model, fr.trace, ce.grad).layers;
}

/// Mean cross-entropy gradient w.r.t. the input batch.
inline Tensor backward_input(const Model &model, const Tensor &batch, std::span<const std::size_t> targets)
{
  check_targets(model, batch, targets);
  const auto fr = forward(model, batch);
  const auto ce = mean_cross_entropy(fr.logits, targets);
  return backward(model, fr.trace, ce.grad, false).input;
}

inline double mean_loss(const Model &model, const Tensor &batch, std::span<const std::size_t> targets)
{
  return mean_cross_entropy(logits(model, batch), targets).loss;
}

// ---------------------------------------------------------------------------
// Initialization and training

/// He-normal weights, zero biases.
inline Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64 &rng)
{
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto &v : t.data())
    v = dist(rng);
  return t;
}

/// Small CNN used for the desk experiments: a full-resolution convolution, a strided convolution
/// and three dense layers.
inline Model desk_cnn(const Shape &input_shape, std::size_t classes, std::uint64_t seed, std::size_t width = 4,
                      std::size_t hidden = 64, std::size_t hidden2 = 32)
{
  std::mt19937_64 rng(seed);
  const std::size_t c = input_shape.at(0);
  std::vector<Layer> layers;
  layers.push_back(Layer::conv2d(he_normal({width, c, 3, 3}, c * 9, rng), Tensor({width}), {1, 1}));
  layers.push_back(Layer::relu());
  layers.push_back(Layer::conv2d(he_normal({width, width, 4, 4}, width * 16, rng), Tensor({width}), {2, 1}));
  layers.push_back(Layer::relu());
  layers.push_back(Layer::flatten());
  Shape s = input_shape;
  for (const auto &l : layers)
    s = l.output_shape(s);
  const std::size_t flat = s[0];
  layers.push_back(Layer::dense(he_normal({hidden, flat}, flat, rng), Tensor({hidden})));
  layers.push_back(Layer::relu());
  layers.push_back(Layer::dense(he_normal({hidden2, hidden}, hidden, rng), Tensor({hidden2})));
  layers.push_back(Layer::relu());
  layers.push_back(Layer::dense(he_normal({classes, hidden2}, hidden2, rng), Tensor({classes})));
  return Model(input_shape, std::move(layers));
}

enum class Optimizer
{
  sgd,
  adam,
};

struct TrainConfig
{
  std::size_t epochs = 1;
  double lr = 0.0005;
  std::size_t batch_size = 32; // 0 = full batch
  Optimizer optimizer = Optimizer::adam;
  std::uint64_t seed = 0;
};

struct TrainResult
{
  Model model;
  std::vector<double> epoch_loss; // full-dataset loss after each epoch
};

/// Minibatch gradient descent on mean cross-entropy. Deterministic for a fixed seed.
inline TrainResult train_model_with_history(const Model &init, const Tensor &images,
                                            std::span<const std::size_t> labels, const TrainConfig &cfg)
{
  if (images.empty() || images.dim(0) == 0 || labels.empty())
    throw ArgumentError("cannot train on an empty dataset");
  check_targets(init, images, labels);
  TrainResult result{init, {}};
  Model &model = result.model;
  const std::size_t n = images.dim(0);
  const std::size_t bs = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  const auto widx = model.weighted_indices();

  std::vector<Adam> w_opt, b_opt;
  for (auto i : widx)
  {
    w_opt.emplace_back(model.layer(i).weights.size(), cfg.lr);
    b_opt.emplace_back(model.layer(i).bias.size(), cfg.lr);
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t per = images.size() / n;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch)
  {
    if (bs < n)
      std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += bs)
    {
      const std::size_t end = std::min(n, start + bs);
      std::vector<double> xb;
      xb.reserve((end - start) * per);
      std::vector<std::size_t> yb;
      for (std::size_t k = start; k < end; ++k)
      {
        const std::size_t s = order[k];
        xb.insert(xb.end(), images.data().begin() + s * per, images.data().begin() + (s + 1) * per);
        yb.push_back(labels[s]);
      }
      const Tensor batch(batch_shape(end - start, model.input_shape()), std::move(xb));
      const auto grads = backward_weights(model, batch, yb);
      for (std::size_t w = 0; w < widx.size(); ++w)
      {
        Tensor weights = model.layer(widx[w]).weights;
        Tensor bias = model.layer(widx[w]).bias;
        const auto &g = grads[widx[w]];
        if (cfg.optimizer == Optimizer::adam)
        {
          w_opt[w].step(weights.data(), g.weights.data());
          if (!bias.empty())
            b_opt[w].step(bias.data(), g.bias.data());
        }
        else
        {
          for (std::size_t i = 0; i < weights.size(); ++i)
            weights[i] -= cfg.lr * g.weights[i];
          for (std::size_t i = 0; i < bias.size(); ++i)
            bias[i] -= cfg.lr * g.bias[i];
        }
        if (!weights.all_finite())
          throw NumericError("training diverged at epoch " + std::to_string(epoch));
        model.set_weights(widx[w], std::move(weights));
        model.set_bias(widx[w], std::move(bias));
      }
    }
    result.epoch_loss.push_back(mean_loss(model, images, labels));
  }
  return result;
}

inline Model train_model(const Model &init, const Tensor &images, std::span<const std::size_t> labels,
                         const TrainConfig &cfg)
{
  return train_model_with_history(init, images, labels, cfg).model;
}

} // namespace roundlab
