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

#include "roundlab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace roundlab
{

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape &shape)
{
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape &shape)
{
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i)
  {
    if (i)
      out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array of doubles.
class Tensor
{
public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill)
  {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
  {
    check_dims();
    if (shape_size(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
  }

  /// Row-major matrix literal, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows)
  {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto &row : rows)
    {
      if (row.size() != c)
        throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values)
  {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor identity(std::size_t n)
  {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i)
      t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape &shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double> &values() const noexcept { return data_; }

  double &operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double &at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  Tensor reshaped(Shape shape) const
  {
    if (shape_size(shape) != data_.size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  /// Copy of sample `index` along the leading axis.
  Tensor slice(std::size_t index) const
  {
    const std::size_t stride = data_.size() / shape_.at(0);
    Shape inner(shape_.begin() + 1, shape_.end());
    if (inner.empty())
      inner = {1};
    return Tensor(inner, std::vector<double>(data_.begin() + index * stride, data_.begin() + (index + 1) * stride));
  }

  /// Rows [begin, end) along the leading axis.
  Tensor rows(std::size_t begin, std::size_t end) const
  {
    const std::size_t stride = data_.size() / shape_.at(0);
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(s, std::vector<double>(data_.begin() + begin * stride, data_.begin() + end * stride));
  }

  bool all_finite() const
  {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor &, const Tensor &) = default;

private:
  void check_dims() const
  {
    for (auto d : shape_)
      if (d == 0)
        throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Stack equally shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> items)
{
  if (items.empty())
    throw ArgumentError("cannot stack an empty list");
  Shape s = items.front().shape();
  std::vector<double> data;
  data.reserve(items.size() * items.front().size());
  for (const auto &t : items)
  {
    if (t.shape() != s)
      throw DimensionError("stack: mismatched shapes");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  s.insert(s.begin(), items.size());
  return Tensor(std::move(s), std::move(data));
}

/// Concatenate along the leading axis.
inline Tensor concat_rows(const Tensor &a, const Tensor &b)
{
  if (a.empty())
    return b;
  if (b.empty())
    return a;
  Shape sa(a.shape().begin() + 1, a.shape().end());
  Shape sb(b.shape().begin() + 1, b.shape().end());
  if (sa != sb)
    throw DimensionError("concat_rows: mismatched trailing shapes");
  std::vector<double> data(a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  Shape s = a.shape();
  s[0] += b.dim(0);
  return Tensor(std::move(s), std::move(data));
}

/// Standard matrix product. Each output element accumulates over k in ascending order.
inline Tensor matmul(const Tensor &a, const Tensor &b)
{
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = c.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
    {
      const double aip = A[i * k + p];
      const double *brow = &B[p * n];
      double *crow = &C[i * n];
      for (std::size_t j = 0; j < n; ++j)
        crow[j] += aip * brow[j];
    }
  return c;
}

inline Tensor transpose(const Tensor &a)
{
  if (a.rank() != 2)
    throw DimensionError("transpose expects a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      t[j * r + i] = a[i * c + j];
  return t;
}

struct ConvGeometry
{
  std::size_t stride = 1;
  std::size_t pad = 0;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, ConvGeometry g)
{
  if (g.stride == 0)
    throw GeometryError("stride must be positive");
  if (in + 2 * g.pad < kernel)
    throw GeometryError("kernel " + std::to_string(kernel) + " larger than padded input " +
                        std::to_string(in + 2 * g.pad));
  if ((in + 2 * g.pad - kernel) % g.stride != 0)
    throw GeometryError("geometry does not tile: (" + std::to_string(in) + " + 2*" + std::to_string(g.pad) + " - " +
                        std::to_string(kernel) + ") not divisible by stride " + std::to_string(g.stride));
  return (in + 2 * g.pad - kernel) / g.stride + 1;
}

/// Unroll a [c,h,w] input into a (c*kh*kw) x (h'*w') patch matrix.
/// Row index is (ch*kh + i)*kw + j, matching a row-major [o,c,kh,kw] kernel.
inline Tensor im2col(const Tensor &input, std::size_t kh, std::size_t kw, ConvGeometry g)
{
  if (input.rank() != 3)
    throw DimensionError("im2col expects [c,h,w], got " + shape_string(input.shape()));
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = conv_output_extent(h, kh, g), ow = conv_output_extent(w, kw, g);
  Tensor cols({c * kh * kw, oh * ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j)
      {
        const std::size_t row = (ch * kh + i) * kw + j;
        for (std::size_t y = 0; y < oh; ++y)
        {
          const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
          for (std::size_t x = 0; x < ow; ++x)
          {
            const long ix = static_cast<long>(x * g.stride + j) - static_cast<long>(g.pad);
            double v = 0.0;
            if (iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(w))
              v = input[(ch * h + iy) * w + ix];
            cols[row * oh * ow + y * ow + x] = v;
          }
        }
      }
  return cols;
}

/// Adjoint of im2col: scatter-add patch gradients back onto a [c,h,w] input.
inline Tensor col2im(const Tensor &cols, const Shape &input_shape, std::size_t kh, std::size_t kw, ConvGeometry g)
{
  const std::size_t c = input_shape.at(0), h = input_shape.at(1), w = input_shape.at(2);
  const std::size_t oh = conv_output_extent(h, kh, g), ow = conv_output_extent(w, kw, g);
  if (cols.rank() != 2 || cols.dim(0) != c * kh * kw || cols.dim(1) != oh * ow)
    throw DimensionError("col2im: patch matrix shape " + shape_string(cols.shape()) + " does not match geometry");
  Tensor out(input_shape);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j)
      {
        const std::size_t row = (ch * kh + i) * kw + j;
        for (std::size_t y = 0; y < oh; ++y)
        {
          const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(h))
            continue;
          for (std::size_t x = 0; x < ow; ++x)
          {
            const long ix = static_cast<long>(x * g.stride + j) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(w))
              continue;
            out[(ch * h + iy) * w + ix] += cols[row * oh * ow + y * ow + x];
          }
        }
      }
  return out;
}

/// Convolution of a [c,h,w] input with an [o,c,kh,kw] kernel through the im2col patch matrix.
inline Tensor conv2d_im2col(const Tensor &input, const Tensor &kernel, ConvGeometry g)
{
  if (kernel.rank() != 4 || input.rank() != 3 || kernel.dim(1) != input.dim(0))
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) + " incompatible with input " +
                         shape_string(input.shape()));
  const std::size_t o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t oh = conv_output_extent(input.dim(1), kh, g);
  const std::size_t ow = conv_output_extent(input.dim(2), kw, g);
  const Tensor cols = im2col(input, kh, kw, g);
  const Tensor k2 = kernel.reshaped({o, cols.dim(0)});
  return matmul(k2, cols).reshaped({o, oh, ow});
}

inline Tensor relu_forward(const Tensor &x)
{
  Tensor y = x;
  for (auto &v : y.data())
    v = v > 0.0 ? v : 0.0;
  return y;
}

inline Tensor relu_backward(const Tensor &x, const Tensor &upstream)
{
  if (x.shape() != upstream.shape())
    throw DimensionError("relu_backward: shape mismatch");
  Tensor g = upstream;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (x[i] <= 0.0)
      g[i] = 0.0;
  return g;
}

inline std::vector<double> softmax(std::span<const double> logits)
{
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
  {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto &v : p)
    v /= z;
  return p;
}

struct LossAndGrad
{
  double loss = 0.0;
  Tensor grad;
};

/// Cross-entropy of softmax(logits) against `target`, stabilized by the max logit.
inline LossAndGrad softmax_cross_entropy(const Tensor &logits, std::size_t target)
{
  if (target >= logits.size())
    throw IndexError("target class " + std::to_string(target) + " out of range for " +
                     std::to_string(logits.size()) + " logits");
  auto l = logits.data();
  const double mx = *std::max_element(l.begin(), l.end());
  double z = 0.0;
  for (double v : l)
    z += std::exp(v - mx);
  const double log_z = std::log(z) + mx;
  LossAndGrad out{std::log(z) - (l[target] - mx), Tensor({l.size()})};
  for (std::size_t i = 0; i < l.size(); ++i)
    out.grad[i] = std::exp(l[i] - log_z);
  out.grad[target] -= 1.0;
  return out;
}

inline std::size_t argmax(std::span<const double> values)
{
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

} // namespace roundlab
