// SPDX-License-Identifier: Apache-2.0
// Test-only oracles: central finite differences and seeded random tensors.
#pragma once

#include <blvit/nn.hpp>
#include <blvit/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace blvit::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> values(numel_of(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

/// Central differences of a scalar function with respect to every entry of t.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor& t, double h = 1e-5) {
  std::vector<double> out(t.numel());
  auto& v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    const double up = f();
    v[i] = saved - h;
    const double down = f();
    v[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// max |a-b| / max(max|a|, max|b|), the norm-wise relative error.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double scale = 0.0;
  for (double v : analytic) scale = std::max(scale, std::abs(v));
  for (double v : numeric) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return 0.0;
  return max_abs_diff(analytic, numeric) / scale;
}

/// Runs backward of `loss_fn` and returns the gradient of t (zeros if unreached).
inline std::vector<double> analytic_grad(const std::function<Tensor()>& loss_fn, Tensor& t) {
  t.zero_grad();
  Graph graph;
  Tensor loss = loss_fn();
  graph.backward(loss);
  std::vector<double> g(t.grad().begin(), t.grad().end());
  if (g.empty()) g.assign(t.numel(), 0.0);
  t.zero_grad();
  return g;
}

/// Relative error between backward and finite differences of loss_fn w.r.t. t.
inline double gradcheck(const std::function<Tensor()>& loss_fn, Tensor& t, double h = 1e-5) {
  const auto analytic = analytic_grad(loss_fn, t);
  const auto numeric = numeric_grad([&] { return loss_fn().item(); }, t, h);
  return relative_error(analytic, numeric);
}

/// Weighted sum with fixed pseudo-random weights, so that gradients are not symmetric.
inline Tensor probe_loss(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(y.shape(), rng);
  return sum(mul(y, w));
}

inline nn::Linear random_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double scale = 0.3) {
  return {random_tensor({in, out}, rng, scale, true), random_tensor({out}, rng, 0.1, true)};
}

inline nn::LayerNormParams random_norm(std::size_t width, std::mt19937_64& rng) {
  Tensor gain = random_tensor({width}, rng, 0.1, true);
  for (double& g : gain.values()) g += 1.0;
  return {gain, random_tensor({width}, rng, 0.1, true)};
}

/// q/k/v: width -> inner, o: inner -> width.
inline nn::AttentionParams random_attention(std::size_t width, std::size_t inner, std::size_t heads,
                                            std::mt19937_64& rng) {
  nn::AttentionParams p;
  p.q = random_linear(width, inner, rng);
  p.k = random_linear(width, inner, rng);
  p.v = random_linear(width, inner, rng);
  p.o = random_linear(inner, width, rng);
  p.heads = heads;
  return p;
}

/// Plain 4x FFN at `width`, or the mapped C -> inner -> 4 inner -> inner -> C variant.
inline nn::FfnParams random_ffn(std::size_t width, std::size_t inner, bool mapped, std::mt19937_64& rng) {
  nn::FfnParams p;
  const std::size_t h = mapped ? inner : width;
  if (mapped) p.in_map = random_linear(width, inner, rng);
  p.fc1 = random_linear(h, 4 * h, rng);
  p.fc2 = random_linear(4 * h, h, rng);
  if (mapped) p.out_map = random_linear(inner, width, rng);
  return p;
}

inline nn::BlockParams random_block(std::size_t width, std::size_t inner, std::size_t heads, bool efficiency,
                                    std::mt19937_64& rng) {
  return {random_norm(width, rng), random_attention(width, efficiency ? inner : width, heads, rng),
          random_norm(width, rng), random_ffn(width, inner, efficiency, rng)};
}

/// Every tensor of a block, for gradient sweeps.
inline std::vector<Tensor*> block_tensors(nn::BlockParams& p) {
  std::vector<Tensor*> out{&p.norm1.gain, &p.norm1.bias, &p.norm2.gain, &p.norm2.bias};
  for (nn::Linear* l : {&p.attn.q, &p.attn.k, &p.attn.v, &p.attn.o, &p.ffn.fc1, &p.ffn.fc2}) {
    out.push_back(&l->weight);
    out.push_back(&l->bias);
  }
  for (auto* m : {&p.ffn.in_map, &p.ffn.out_map})
    if (*m) {
      out.push_back(&(*m)->weight);
      out.push_back(&(*m)->bias);
    }
  return out;
}

inline void zero_values(Tensor& t) { std::fill(t.values().begin(), t.values().end(), 0.0); }

}  // namespace blvit::test
