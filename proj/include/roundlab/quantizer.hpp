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

#include "roundlab/network.hpp"
#include "roundlab/optim.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

namespace roundlab
{

// ---------------------------------------------------------------------------
// Uniform symmetric quantizer

struct QuantSpec
{
  int bits = 4;
  double scale = 1.0;
  double n = -8; // lowest integer code
  double p = 7;  // highest integer code

  static QuantSpec symmetric(int bits, double scale)
  {
    if (bits < 2 || bits > 8)
      throw ArgumentError("bit width must be in 2..8, got " + std::to_string(bits));
    if (!(scale > 0.0) || !std::isfinite(scale))
      throw ArgumentError("quantization scale must be positive and finite");
    const double half = std::ldexp(1.0, bits - 1);
    return QuantSpec{bits, scale, -half, half - 1.0};
  }

  double clip(double code) const { return std::clamp(code, n, p); }
};

/// Per-tensor scale max|W| / p, or 1 for an all-zero tensor.
inline QuantSpec compute_scale(const Tensor &w, int bits)
{
  if (w.empty())
    throw ArgumentError("compute_scale on an empty tensor");
  if (!w.all_finite())
    throw NumericError("compute_scale on non-finite weights");
  double mx = 0.0;
  for (double v : w.data())
    mx = std::max(mx, std::abs(v));
  const QuantSpec unit = QuantSpec::symmetric(bits, 1.0);
  return QuantSpec::symmetric(bits, mx == 0.0 ? 1.0 : mx / unit.p);
}

/// s * clip(round(W/s), n, p) with ties rounded away from zero.
inline Tensor quantize_nearest(const Tensor &w, const QuantSpec &spec)
{
  Tensor out = w;
  for (auto &v : out.data())
    v = spec.scale * spec.clip(std::round(v / spec.scale));
  return out;
}

inline Tensor quantize_floor(const Tensor &w, const QuantSpec &spec)
{
  Tensor out = w;
  for (auto &v : out.data())
    v = spec.scale * spec.clip(std::floor(v / spec.scale));
  return out;
}

/// floor(W/s) and the binary up-rounding indicator of nearest rounding.
struct Decomposition
{
  std::vector<double> floor_codes;
  std::vector<std::uint8_t> up;
};

inline Decomposition rounding_decompose(const Tensor &w, const QuantSpec &spec)
{
  Decomposition d;
  d.floor_codes.reserve(w.size());
  d.up.reserve(w.size());
  for (double v : w.data())
  {
    const double q = v / spec.scale;
    d.floor_codes.push_back(std::floor(q));
    d.up.push_back(std::round(q) - q > 0.0 ? 1 : 0);
  }
  return d;
}

/// s * clip(floor + r, n, p) for any r (binary or relaxed).
inline Tensor reconstruct(const Shape &shape, const QuantSpec &spec, const std::vector<double> &floor_codes,
                          std::span<const double> r)
{
  Tensor out(shape);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = spec.scale * spec.clip(floor_codes[i] + r[i]);
  return out;
}

inline Tensor reconstruct(const Shape &shape, const QuantSpec &spec, const Decomposition &d)
{
  std::vector<double> r(d.up.begin(), d.up.end());
  return reconstruct(shape, spec, d.floor_codes, r);
}

/// Fractional part W/s - floor(W/s), the initial relaxed rounding variable.
inline std::vector<double> fractional_codes(const Tensor &w, const QuantSpec &spec)
{
  std::vector<double> v(w.size());
  for (std::size_t i = 0; i < v.size(); ++i)
  {
    const double q = w[i] / spec.scale;
    v[i] = q - std::floor(q);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Layer reconstruction losses

/// (1/N) X^T X over patch rows X [N, fan_in].
inline Tensor gram_matrix(const Tensor &patches)
{
  if (patches.rank() != 2 || patches.dim(0) == 0)
    throw ArgumentError("gram_matrix needs a non-empty [N, fan_in] batch");
  const std::size_t n = patches.dim(0), k = patches.dim(1);
  Tensor g({k, k});
  for (std::size_t r = 0; r < n; ++r)
  {
    const double *x = &patches.data()[r * k];
    for (std::size_t i = 0; i < k; ++i)
    {
      const double xi = x[i];
      if (xi == 0.0)
        continue;
      double *gi = &g.data()[i * k];
      for (std::size_t j = 0; j < k; ++j)
        gi[j] += xi * x[j];
    }
  }
  for (auto &v : g.data())
    v /= static_cast<double>(n);
  return g;
}

/// H = mean over rows of 2 x x^T.
inline Tensor layer_hessian(const Tensor &patches)
{
  Tensor h = gram_matrix(patches);
  for (auto &v : h.data())
    v *= 2.0;
  return h;
}

/// (1/N) sum_n ||(W - What) x_n||^2 with W, What as [out, fan_in] and x as [N, fan_in].
inline double loss_accuracy(const Tensor &w, const Tensor &wq, const Tensor &patches)
{
  if (w.shape() != wq.shape() || w.rank() != 2 || patches.rank() != 2 || patches.dim(1) != w.dim(1))
    throw DimensionError("loss_accuracy shapes do not compose");
  const std::size_t out = w.dim(0), k = w.dim(1), n = patches.dim(0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < out; ++o)
    {
      double e = 0.0;
      for (std::size_t i = 0; i < k; ++i)
        e += (w[o * k + i] - wq[o * k + i]) * patches[r * k + i];
      total += e * e;
    }
  return total / static_cast<double>(n);
}

/// sum over rows of dW G dW^T, which equals 1/2 dW H dW^T.
inline double quadratic_loss(const Tensor &dw, const Tensor &gram)
{
  const std::size_t k = gram.dim(0), out = dw.size() / k;
  double total = 0.0;
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t i = 0; i < k; ++i)
    {
      double y = 0.0;
      for (std::size_t j = 0; j < k; ++j)
        y += gram[i * k + j] * dw[o * k + j];
      total += dw[o * k + i] * y;
    }
  return total;
}

/// sum_i (1 - |2 V_i - 1|^beta).
inline double loss_penalty(std::span<const double> v, double beta)
{
  if (!(beta > 0.0))
    throw ArgumentError("penalty beta must be positive");
  double total = 0.0;
  for (double x : v)
    total += 1.0 - std::pow(std::abs(2.0 * x - 1.0), beta);
  return total;
}

inline double penalty_derivative(double v, double beta)
{
  const double u = 2.0 * v - 1.0;
  if (u == 0.0)
    return 0.0;
  return -2.0 * beta * std::pow(std::abs(u), beta - 1.0) * (u > 0 ? 1.0 : -1.0);
}

/// Linear anneal of the penalty exponent from beta_start to beta_end across the step budget.
struct PenaltySchedule
{
  double beta_start = 20.0;
  double beta_end = 2.0;
  std::size_t steps = 1000;

  void validate() const
  {
    if (!(beta_end > 0.0) || beta_start < beta_end)
      throw ArgumentError("penalty schedule needs beta_start >= beta_end > 0");
  }

  double beta(std::size_t step) const
  {
    if (steps <= 1)
      return beta_end;
    const double t = static_cast<double>(std::min(step, steps - 1)) / static_cast<double>(steps - 1);
    return beta_start + (beta_end - beta_start) * t;
  }
};

// ---------------------------------------------------------------------------
// Per-layer rounding problem

/// Cross-entropy term evaluated through the tail of the network that starts at the layer being
/// rounded. `inputs` feed that layer; the term contributes weight * mean CE(labels).
struct HeadTerm
{
  Tensor inputs;
  std::vector<std::size_t> labels;
  double weight = 1.0;
};

/// The network from layer `from` onward, as a standalone model.
inline Model tail_model(const Model &model, std::size_t from)
{
  const auto shapes = model.shapes();
  std::vector<Layer> layers(model.layers().begin() + static_cast<std::ptrdiff_t>(from), model.layers().end());
  return Model(shapes[from], std::move(layers));
}

/// Everything needed to score a rounding choice for one weighted layer.
///
/// Objective over rounding variables V (code space):
///   L_A(V) + lambda_b * L_B(V) + lambda_p * L_P(V, beta)
/// with What = s * clip(floor + V, n, p), L_A = sum_rows dW G dW^T and L_B the weighted sum of
/// head cross-entropies through `tail` with What installed in its first layer.
struct LayerProblem
{
  QuantSpec spec;
  Tensor weights; // [out, fan_in]
  Tensor gram;    // [fan_in, fan_in]
  std::optional<Model> tail;
  std::vector<HeadTerm> head_terms;
  double lambda_b = 0.0;
  Tensor factor; // optional [m, fan_in] with gram == factor^T factor, used when m < fan_in

  std::size_t size() const { return weights.size(); }
  bool has_head() const { return lambda_b != 0.0 && tail && !head_terms.empty(); }
};

inline LayerProblem make_layer_problem(const Layer &layer, const Tensor &inputs, const QuantSpec &spec)
{
  Tensor patches = layer_patches(layer, inputs);
  LayerProblem p{spec, layer.weight_matrix(), gram_matrix(patches), std::nullopt, {}, 0.0, {}};
  if (patches.dim(0) < patches.dim(1))
  {
    const double norm = 1.0 / std::sqrt(static_cast<double>(patches.dim(0)));
    for (auto &v : patches.data())
      v *= norm;
    p.factor = std::move(patches);
  }
  return p;
}

struct HeadEval
{
  double loss = 0.0;
  Tensor grad; // d L_B / d What, [out, fan_in]
};

inline HeadEval evaluate_head(const LayerProblem &prob, const Tensor &wq, bool want_grad)
{
  HeadEval e;
  if (want_grad)
    e.grad = Tensor(prob.weights.shape());
  Model tail = *prob.tail;
  tail.set_weights(0, wq);
  for (const auto &t : prob.head_terms)
  {
    const auto fr = forward(tail, t.inputs);
    const auto ce = mean_cross_entropy(fr.logits, t.labels);
    e.loss += t.weight * ce.loss;
    if (want_grad)
    {
      const auto g = backward(tail, fr.trace, ce.grad).layers[0].weights;
      for (std::size_t i = 0; i < e.grad.size(); ++i)
        e.grad[i] += t.weight * g[i];
    }
  }
  return e;
}

inline double head_loss(const LayerProblem &prob, const Tensor &wq)
{
  return prob.has_head() ? evaluate_head(prob, wq, false).loss : 0.0;
}

struct ObjectiveValue
{
  double accuracy = 0.0;
  double backdoor = 0.0;
  double penalty = 0.0;
  double total = 0.0;
  std::vector<double> grad; // d total / d V
};

namespace detail
{

/// Dot product with four interleaved partial sums; fixed order, so results are reproducible.
inline double dot(const double *a, const double *b, std::size_t n)
{
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  const std::size_t body = n - n % 4;
  std::size_t j = 0;
  for (; j < body; j += 4)
  {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j)
    s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

} // namespace detail

/// Value and straight-through gradient of the relaxed objective at V.
inline ObjectiveValue evaluate_objective(const LayerProblem &prob, const std::vector<double> &floor_codes,
                                         const std::vector<double> &v, double lambda_p, double beta,
                                         bool want_grad = true)
{
  const auto &spec = prob.spec;
  const Tensor wq = reconstruct(prob.weights.shape(), spec, floor_codes, v);
  const std::size_t k = prob.gram.dim(0), out = prob.size() / k;
  ObjectiveValue r;
  Tensor dw = wq;
  for (std::size_t i = 0; i < dw.size(); ++i)
    dw[i] -= prob.weights[i];

  std::vector<double> gw(prob.size(), 0.0); // d(L_A + lambda_b L_B) / d What
  if (prob.factor.size() != 0)
  {
    const std::size_t m = prob.factor.dim(0);
    const double *f = prob.factor.data().data();
    std::vector<double> z(m);
    for (std::size_t o = 0; o < out; ++o)
    {
      const double *d = dw.data().data() + o * k;
      double *g = gw.data() + o * k;
      for (std::size_t a = 0; a < m; ++a)
      {
        z[a] = detail::dot(f + a * k, d, k);
        r.accuracy += z[a] * z[a];
      }
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t i = 0; i < k; ++i)
          g[i] += 2.0 * z[a] * f[a * k + i];
    }
  }
  else
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < k; ++i)
      {
        const double y = detail::dot(prob.gram.data().data() + i * k, dw.data().data() + o * k, k);
        r.accuracy += dw[o * k + i] * y;
        gw[o * k + i] = 2.0 * y;
      }
  if (prob.has_head())
  {
    const auto h = evaluate_head(prob, wq, want_grad);
    r.backdoor = h.loss;
    if (want_grad)
      for (std::size_t i = 0; i < gw.size(); ++i)
        gw[i] += prob.lambda_b * h.grad[i];
  }
  r.penalty = loss_penalty(v, beta);
  r.total = r.accuracy + prob.lambda_b * r.backdoor + lambda_p * r.penalty;
  if (want_grad)
  {
    r.grad.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
    {
      const double code = floor_codes[i] + v[i];
      const double ste = (code >= spec.n && code <= spec.p) ? spec.scale : 0.0;
      r.grad[i] = ste * gw[i] + lambda_p * penalty_derivative(v[i], beta);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Rounding optimization

struct RoundingConfig
{
  double lr = 1e-3;
  std::size_t steps = 1000;
  double lambda_p = 0.01;
  double beta_start = 20.0;
  double beta_end = 2.0;
  bool polish = true;
  std::size_t exact_nodes = 100000;   // branch-and-bound node budget per output row
  std::size_t exact_free_limit = 16;  // enumerate exactly when a head-term problem has this few free entries

  PenaltySchedule schedule() const { return {beta_start, beta_end, steps}; }
};

/// Rounding variables held fixed during optimization. Empty means nothing is frozen.
struct FrozenEntries
{
  std::vector<bool> mask;
  std::vector<double> values;

  bool any() const { return std::find(mask.begin(), mask.end(), true) != mask.end(); }
  bool frozen(std::size_t i) const { return !mask.empty() && mask[i]; }
};

struct RoundingResult
{
  std::vector<double> relaxed;    // V after the gradient schedule
  std::vector<std::uint8_t> up;   // final binary rounding
  Tensor quantized;               // [out, fan_in]
  double accuracy_nearest = 0.0;  // L_A of nearest rounding
  double accuracy_final = 0.0;    // L_A of the final rounding
  double backdoor_nearest = 0.0;  // L_B of nearest rounding (0 without head terms)
  double backdoor_final = 0.0;
  double binarization = 0.0;      // max_i min(V_i, 1 - V_i) over free entries after the schedule
  std::size_t flipped = 0;        // entries whose rounding differs from nearest
  std::size_t polish_moves = 0;
  std::size_t exact_moves = 0;    // entries changed by the exact refinement stage
};

namespace detail
{

/// Exact objective L_A + lambda_b L_B for a binary rounding, with incremental single and paired
/// flips. Rows of L_A are independent quadratic forms, so each flip costs O(fan_in).
class DiscreteSearch
{
public:
  DiscreteSearch(const LayerProblem &prob, const std::vector<double> &floor_codes, std::vector<std::uint8_t> up,
                 const FrozenEntries &frozen)
    : prob_(prob), floor_(floor_codes), up_(std::move(up)), frozen_(frozen), k_(prob.gram.dim(0)),
      out_(prob.size() / k_)
  {
    refresh();
  }

  const std::vector<std::uint8_t> &up() const { return up_; }
  double total() const { return accuracy_ + prob_.lambda_b * backdoor_; }
  double accuracy() const { return accuracy_; }
  double backdoor() const { return backdoor_; }

  /// Improve by single flips, then paired flips, until neither helps. Returns the move count.
  /// Without head terms the rows are independent and are polished one at a time.
  std::size_t descend()
  {
    std::size_t moves = 0;
    if (prob_.has_head())
      moves = descend_range(0, prob_.size());
    else
      for (std::size_t o = 0; o < out_; ++o)
        moves += descend_range(o * k_, (o + 1) * k_);
    refresh();
    return moves;
  }

private:
  double code_value(std::size_t i, std::uint8_t r) const { return prob_.spec.scale * prob_.spec.clip(floor_[i] + r); }

  double delta_of(std::size_t i) const { return code_value(i, 1 - up_[i]) - code_value(i, up_[i]); }

  void refresh()
  {
    dw_.assign(prob_.size(), 0.0);
    for (std::size_t i = 0; i < dw_.size(); ++i)
      dw_[i] = code_value(i, up_[i]) - prob_.weights[i];
    y_.assign(prob_.size(), 0.0);
    accuracy_ = 0.0;
    for (std::size_t o = 0; o < out_; ++o)
      for (std::size_t i = 0; i < k_; ++i)
      {
        const double y = dot(prob_.gram.data().data() + i * k_, dw_.data() + o * k_, k_);
        y_[o * k_ + i] = y;
        accuracy_ += dw_[o * k_ + i] * y;
      }
    backdoor_ = prob_.has_head() ? head_with(up_) : 0.0;
  }

  double head_with(const std::vector<std::uint8_t> &up) const
  {
    std::vector<double> r(up.begin(), up.end());
    return head_loss(prob_, reconstruct(prob_.weights.shape(), prob_.spec, floor_, r));
  }

  double gram_at(std::size_t a, std::size_t b) const { return prob_.gram[(a % k_) * k_ + (b % k_)]; }

  /// Flip one entry, updating the row's G dW product and L_A in O(fan_in).
  void flip(std::size_t i)
  {
    const double d = delta_of(i);
    const std::size_t row = i / k_, col = i % k_;
    accuracy_ += 2.0 * d * y_[i] + d * d * prob_.gram[col * k_ + col];
    up_[i] = static_cast<std::uint8_t>(1 - up_[i]);
    dw_[i] += d;
    for (std::size_t j = 0; j < k_; ++j)
      y_[row * k_ + j] += d * prob_.gram[j * k_ + col];
  }

  void after_move()
  {
    if (prob_.has_head())
      backdoor_ = head_with(up_);
  }

  bool improves(double change) const { return change < -1e-12 * (1.0 + std::abs(total())); }

  std::size_t descend_range(std::size_t begin, std::size_t end)
  {
    std::size_t moves = 0;
    while (best_single(begin, end) || best_pair(begin, end))
      ++moves;
    return moves;
  }

  bool best_single(std::size_t begin, std::size_t end)
  {
    double best = 0.0;
    std::size_t arg = prob_.size();
    for (std::size_t i = begin; i < end; ++i)
    {
      if (frozen_.frozen(i))
        continue;
      const double d = delta_of(i);
      if (d == 0.0)
        continue;
      double change = 2.0 * d * y_[i] + d * d * gram_at(i, i);
      if (prob_.has_head())
      {
        auto trial = up_;
        trial[i] = static_cast<std::uint8_t>(1 - trial[i]);
        change += prob_.lambda_b * (head_with(trial) - backdoor_);
      }
      if (improves(change) && change < best)
      {
        best = change;
        arg = i;
      }
    }
    if (arg == prob_.size())
      return false;
    flip(arg);
    after_move();
    return true;
  }

  bool best_pair(std::size_t begin_at, std::size_t end_at)
  {
    const bool head = prob_.has_head();
    std::vector<std::size_t> free;
    for (std::size_t i = begin_at; i < end_at; ++i)
      if (!frozen_.frozen(i) && delta_of(i) != 0.0)
        free.push_back(i);
    if (head && free.size() > kHeadPairLimit)
      return false;
    double best = 0.0;
    std::size_t ba = 0, bb = 0;
    bool found = false;
    auto consider = [&](std::size_t a, std::size_t b) {
      const bool same_row = a / k_ == b / k_;
      const double da = delta_of(a), db = delta_of(b);
      double change = 2.0 * da * y_[a] + da * da * gram_at(a, a) + 2.0 * db * y_[b] + db * db * gram_at(b, b);
      if (same_row)
        change += 2.0 * da * db * gram_at(a, b);
      if (head)
      {
        auto trial = up_;
        trial[a] = static_cast<std::uint8_t>(1 - trial[a]);
        trial[b] = static_cast<std::uint8_t>(1 - trial[b]);
        change += prob_.lambda_b * (head_with(trial) - backdoor_);
      }
      if (improves(change) && change < best)
      {
        best = change;
        ba = a;
        bb = b;
        found = true;
      }
    };
    if (head)
    {
      for (std::size_t x = 0; x < free.size(); ++x)
        for (std::size_t z = x + 1; z < free.size(); ++z)
          consider(free[x], free[z]);
    }
    else
    {
      // Rows of L_A are separable, so only pairs inside one row can beat the best single flip.
      std::size_t begin = 0;
      while (begin < free.size())
      {
        std::size_t end = begin;
        while (end < free.size() && free[end] / k_ == free[begin] / k_)
          ++end;
        for (std::size_t x = begin; x < end; ++x)
          for (std::size_t z = x + 1; z < end; ++z)
            consider(free[x], free[z]);
        begin = end;
      }
    }
    if (!found)
      return false;
    flip(ba);
    flip(bb);
    after_move();
    return true;
  }

  static constexpr std::size_t kHeadPairLimit = 160;

  const LayerProblem &prob_;
  const std::vector<double> &floor_;
  std::vector<std::uint8_t> up_;
  const FrozenEntries &frozen_;
  std::size_t k_, out_;
  std::vector<double> dw_, y_;
  double accuracy_ = 0.0, backdoor_ = 0.0;
};


/// Lower-triangular Cholesky factor of a + ridge * I, or nothing if that is not positive definite.
inline std::optional<std::vector<double>> cholesky(const Tensor &a, double ridge)
{
  const std::size_t k = a.dim(0);
  std::vector<double> l(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j <= i; ++j)
    {
      double sum = a[i * k + j] + (i == j ? ridge : 0.0);
      for (std::size_t p = 0; p < j; ++p)
        sum -= l[i * k + p] * l[j * k + p];
      if (i == j)
      {
        if (!(sum > 0.0))
          return std::nullopt;
        l[i * k + i] = std::sqrt(sum);
      }
      else
        l[i * k + j] = sum / l[j * k + j];
    }
  return l;
}

/// Depth-first branch and bound for min ||L^T d||^2 with each d_i drawn from {lo_i, hi_i}.
/// Entries are assigned from the last to the first, so every assigned entry completes one
/// term of the sum and the partial sum is a valid lower bound.
class RowBranchAndBound
{
public:
  RowBranchAndBound(const std::vector<double> &l, std::size_t k, std::vector<double> lo, std::vector<double> hi,
                    std::vector<double> incumbent, std::size_t budget)
    : l_(l), k_(k), lo_(std::move(lo)), hi_(std::move(hi)), d_(k_, 0.0), best_d_(std::move(incumbent)),
      budget_(budget)
  {
    best_ = 0.0;
    for (std::size_t j = 0; j < k_; ++j)
    {
      double z = 0.0;
      for (std::size_t m = j; m < k_; ++m)
        z += l_[m * k_ + j] * best_d_[m];
      best_ += z * z;
    }
  }

  const std::vector<double> &solve()
  {
    dfs(static_cast<long>(k_) - 1, 0.0);
    return best_d_;
  }

  bool exhausted() const { return nodes_ < budget_; }

private:
  void dfs(long i, double partial)
  {
    if (i < 0)
    {
      if (partial < best_)
      {
        best_ = partial;
        best_d_ = d_;
      }
      return;
    }
    if (nodes_ >= budget_)
      return;
    ++nodes_;
    const std::size_t u = static_cast<std::size_t>(i);
    double t = 0.0;
    for (std::size_t m = u + 1; m < k_; ++m)
      t += l_[m * k_ + u] * d_[m];
    const double diag = l_[u * k_ + u];
    double cand[2] = {lo_[u], hi_[u]};
    double cost[2] = {(t + diag * cand[0]) * (t + diag * cand[0]), (t + diag * cand[1]) * (t + diag * cand[1])};
    const int count = lo_[u] == hi_[u] ? 1 : 2;
    if (count == 2 && cost[1] < cost[0])
    {
      std::swap(cand[0], cand[1]);
      std::swap(cost[0], cost[1]);
    }
    for (int c = 0; c < count; ++c)
      if (partial + cost[c] < best_)
      {
        d_[u] = cand[c];
        dfs(i - 1, partial + cost[c]);
      }
  }

  const std::vector<double> &l_;
  std::size_t k_;
  std::vector<double> lo_, hi_, d_, best_d_;
  double best_ = 0.0;
  std::size_t nodes_ = 0, budget_;
};

/// Exact objective L_A + lambda_b L_B of a binary rounding.
inline double discrete_objective(const LayerProblem &prob, const std::vector<double> &floor_codes,
                                 const std::vector<std::uint8_t> &up)
{
  std::vector<double> r(up.begin(), up.end());
  const Tensor wq = reconstruct(prob.weights.shape(), prob.spec, floor_codes, r);
  Tensor dw = wq;
  for (std::size_t i = 0; i < dw.size(); ++i)
    dw[i] -= prob.weights[i];
  return quadratic_loss(dw, prob.gram) + prob.lambda_b * head_loss(prob, wq);
}

/// Exact refinement of a binary rounding. Problems with head terms are enumerated when few
/// entries are free; quadratic problems are searched row by row with a node budget.
inline std::vector<std::uint8_t> exact_refine(const LayerProblem &prob, const std::vector<double> &floor_codes,
                                              std::vector<std::uint8_t> up, const FrozenEntries &frozen,
                                              std::size_t node_budget, std::size_t free_limit)
{
  const auto &spec = prob.spec;
  auto movable = [&](std::size_t i) {
    return !frozen.frozen(i) && spec.clip(floor_codes[i] + 1.0) != spec.clip(floor_codes[i]);
  };
  if (prob.has_head())
  {
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < up.size(); ++i)
      if (movable(i))
        free.push_back(i);
    if (free.empty() || free.size() > free_limit)
      return up;
    double best = discrete_objective(prob, floor_codes, up);
    std::vector<std::uint8_t> trial = up, best_up = up;
    for (unsigned long mask = 0; mask < (1ul << free.size()); ++mask)
    {
      for (std::size_t j = 0; j < free.size(); ++j)
        trial[free[j]] = static_cast<std::uint8_t>((mask >> j) & 1ul);
      const double v = discrete_objective(prob, floor_codes, trial);
      if (v < best - 1e-15 * (1.0 + std::abs(best)))
      {
        best = v;
        best_up = trial;
      }
    }
    return best_up;
  }
  if (node_budget == 0)
    return up;

  const std::size_t k = prob.gram.dim(0), out = up.size() / k;
  double diag = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    diag = std::max(diag, std::abs(prob.gram[i * k + i]));
  if (diag == 0.0)
    return up;
  const auto l = cholesky(prob.gram, 1e-12 * diag);
  if (!l)
    return up;
  for (std::size_t o = 0; o < out; ++o)
  {
    std::vector<double> lo(k), hi(k), cur(k);
    for (std::size_t i = 0; i < k; ++i)
    {
      const std::size_t idx = o * k + i;
      const double w = prob.weights[idx];
      cur[i] = spec.scale * spec.clip(floor_codes[idx] + up[idx]) - w;
      if (movable(idx))
      {
        lo[i] = spec.scale * spec.clip(floor_codes[idx]) - w;
        hi[i] = spec.scale * spec.clip(floor_codes[idx] + 1.0) - w;
      }
      else
        lo[i] = hi[i] = cur[i];
    }
    RowBranchAndBound bb(*l, k, lo, hi, cur, node_budget);
    const auto &d = bb.solve();
    if (d == cur)
      continue;
    auto candidate = up;
    for (std::size_t i = 0; i < k; ++i)
      if (movable(o * k + i))
        candidate[o * k + i] = d[i] == hi[i] && d[i] != lo[i] ? 1 : 0;
    if (discrete_objective(prob, floor_codes, candidate) < discrete_objective(prob, floor_codes, up))
      up = std::move(candidate);
  }
  return up;
}

} // namespace detail

/// Optimize the rounding of one layer.
///
/// V starts at frac(W/s) (frozen entries at their fixed values) and follows clipped Adam steps on
/// L_A + lambda_b L_B + lambda_p L_P with the annealed penalty exponent. The result is thresholded
/// at 1/2. When `polish` is set, that rounding and the nearest rounding (frozen entries applied)
/// are each improved by exact single and paired flips, the better one is kept, and a budgeted
/// exact search (row-wise branch and bound, or enumeration for small head-term problems) finishes.
inline RoundingResult optimize_rounding(const LayerProblem &prob, const RoundingConfig &cfg,
                                        const FrozenEntries &frozen = {})
{
  if (prob.weights.rank() != 2 || prob.gram.rank() != 2 || prob.gram.dim(0) != prob.weights.dim(1))
    throw DimensionError("layer problem shapes do not compose");
  if (!frozen.mask.empty() && (frozen.mask.size() != prob.size() || frozen.values.size() != prob.size()))
    throw DimensionError("frozen entries must cover every weight");
  const auto schedule = cfg.schedule();
  schedule.validate();
  const auto dec = rounding_decompose(prob.weights, prob.spec);

  RoundingResult res;
  std::vector<double> v = fractional_codes(prob.weights, prob.spec);
  std::vector<bool> active(prob.size(), true);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (frozen.frozen(i))
    {
      v[i] = frozen.values[i];
      active[i] = false;
    }

  Adam adam(v.size(), cfg.lr);
  for (std::size_t step = 0; step < cfg.steps; ++step)
  {
    const auto obj = evaluate_objective(prob, dec.floor_codes, v, cfg.lambda_p, schedule.beta(step));
    if (!std::isfinite(obj.total))
      throw NumericError("rounding objective is not finite at step " + std::to_string(step));
    adam.step(v, obj.grad, active);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (active[i])
        v[i] = std::clamp(v[i], 0.0, 1.0);
  }
  res.relaxed = v;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (active[i])
      res.binarization = std::max(res.binarization, std::min(v[i], 1.0 - v[i]));

  std::vector<std::uint8_t> from_v(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    from_v[i] = v[i] > 0.5 ? 1 : 0;

  std::vector<std::uint8_t> nearest = dec.up;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (frozen.frozen(i))
      nearest[i] = frozen.values[i] > 0.5 ? 1 : 0;

  detail::DiscreteSearch a(prob, dec.floor_codes, from_v, frozen);
  const detail::DiscreteSearch *best = &a;
  std::optional<detail::DiscreteSearch> b;
  if (cfg.polish)
  {
    b.emplace(prob, dec.floor_codes, nearest, frozen);
    res.polish_moves = a.descend();
    const std::size_t moves_b = b->descend();
    if (b->total() < a.total())
    {
      best = &*b;
      res.polish_moves = moves_b;
    }
  }
  res.up = best->up();
  if (cfg.polish)
  {
    auto refined = detail::exact_refine(prob, dec.floor_codes, res.up, frozen, cfg.exact_nodes, cfg.exact_free_limit);
    res.exact_moves = 0;
    for (std::size_t i = 0; i < refined.size(); ++i)
      res.exact_moves += refined[i] != res.up[i];
    res.up = std::move(refined);
  }
  const detail::DiscreteSearch final_state(prob, dec.floor_codes, res.up, frozen);
  res.accuracy_final = final_state.accuracy();
  res.backdoor_final = final_state.backdoor();

  detail::DiscreteSearch plain(prob, dec.floor_codes, dec.up, {});
  res.accuracy_nearest = plain.accuracy();
  res.backdoor_nearest = plain.backdoor();

  std::vector<double> r(res.up.begin(), res.up.end());
  res.quantized = reconstruct(prob.weights.shape(), prob.spec, dec.floor_codes, r);
  for (std::size_t i = 0; i < res.up.size(); ++i)
    res.flipped += res.up[i] != dec.up[i];
  return res;
}

// ---------------------------------------------------------------------------
// Whole-model benign quantization

enum class RoundingPolicy
{
  nearest,
  floor,
  optimized,
};

inline const char *to_string(RoundingPolicy p)
{
  switch (p)
  {
  case RoundingPolicy::nearest:
    return "nearest";
  case RoundingPolicy::floor:
    return "floor";
  case RoundingPolicy::optimized:
    return "optimized";
  }
  return "?";
}

inline RoundingPolicy parse_policy(std::string_view s)
{
  if (s == "nearest")
    return RoundingPolicy::nearest;
  if (s == "floor")
    return RoundingPolicy::floor;
  if (s == "optimized")
    return RoundingPolicy::optimized;
  throw ConfigError("unknown rounding policy '" + std::string(s) + "'");
}

struct QuantizeConfig
{
  int bits = 4;
  RoundingPolicy policy = RoundingPolicy::optimized;
  RoundingConfig rounding;
};

struct LayerReport
{
  std::size_t layer = 0;
  QuantSpec spec;
  double accuracy_nearest = 0.0;
  double accuracy_final = 0.0;
  double flipped_fraction = 0.0;
  double binarization = 0.0;
};

struct QuantizeResult
{
  Model model;
  std::vector<QuantSpec> specs; // one per weighted layer, in order
  std::vector<LayerReport> layers;
};

/// Stack calibration batches into a single batch.
inline Tensor stack_batches(const std::vector<Tensor> &batches)
{
  if (batches.empty())
    throw ArgumentError("no calibration batches");
  Tensor all = batches.front();
  for (std::size_t i = 1; i < batches.size(); ++i)
    all = concat_rows(all, batches[i]);
  return all;
}

/// Quantize every weighted layer in order. Each layer sees calibration activations produced by
/// the already-quantized layers before it.
inline QuantizeResult quantize_model_benign(const Model &model, const std::vector<Tensor> &calibration,
                                            const QuantizeConfig &cfg)
{
  QuantizeResult out{model, {}, {}};
  Tensor acts = stack_batches(calibration);
  check_batch(model, acts);
  for (std::size_t li = 0; li < model.layers().size(); ++li)
  {
    const Layer &layer = out.model.layer(li);
    if (layer.weighted())
    {
      const QuantSpec spec = compute_scale(layer.weights, cfg.bits);
      LayerReport rep{li, spec};
      Tensor wq;
      switch (cfg.policy)
      {
      case RoundingPolicy::nearest:
      case RoundingPolicy::floor:
      {
        const Tensor w = layer.weight_matrix();
        const Tensor g = gram_matrix(layer_patches(layer, acts));
        wq = cfg.policy == RoundingPolicy::nearest ? quantize_nearest(w, spec) : quantize_floor(w, spec);
        if (cfg.policy == RoundingPolicy::floor)
        {
          const auto dec = rounding_decompose(w, spec);
          rep.flipped_fraction = static_cast<double>(std::count(dec.up.begin(), dec.up.end(), 1)) /
                                 static_cast<double>(w.size());
        }
        Tensor dw = wq, dn = quantize_nearest(w, spec);
        for (std::size_t i = 0; i < dw.size(); ++i)
        {
          dw[i] -= w[i];
          dn[i] -= w[i];
        }
        rep.accuracy_final = quadratic_loss(dw, g);
        rep.accuracy_nearest = quadratic_loss(dn, g);
        break;
      }
      case RoundingPolicy::optimized:
      {
        const auto prob = make_layer_problem(layer, acts, spec);
        const auto r = optimize_rounding(prob, cfg.rounding);
        wq = r.quantized;
        rep.accuracy_nearest = r.accuracy_nearest;
        rep.accuracy_final = r.accuracy_final;
        rep.flipped_fraction = static_cast<double>(r.flipped) / static_cast<double>(r.up.size());
        rep.binarization = r.binarization;
        break;
      }
      }
      out.model.set_weights(li, wq);
      out.specs.push_back(spec);
      out.layers.push_back(rep);
    }
    acts = apply_layer(out.model.layer(li), acts);
  }
  return out;
}

} // namespace roundlab
