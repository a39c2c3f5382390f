// SPDX-License-Identifier: Apache-2.0
/**
 * @file   routing.hpp
 * @brief  The big.LITTLE module: importance prediction, hard top-k token
 *         selection, score-scaled performance path, efficiency path over all
 *         tokens, and gamma-weighted token fusion.
 *
 * Gradients reach the predictor only through the (alpha * s + 1) factor that
 * multiplies the performance-path output; the top-k decision itself uses
 * score values and is not differentiated.
 */
#pragma once

#include <blvit/nn.hpp>
#include <blvit/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace blvit::routing {

inline constexpr double kAlphaInit = 0.0;
inline constexpr double kGammaInit = 1e-5;
inline constexpr double kDefaultPruneRatio = 0.75;

/// round-half-up((1 - prune_ratio) * n), never below 1.
inline std::size_t keep_count(std::size_t n, double prune_ratio) {
  if (!(prune_ratio >= 0.0 && prune_ratio < 1.0))
    throw std::invalid_argument("prune_ratio must lie in [0, 1), got " + std::to_string(prune_ratio));
  if (n == 0) throw std::invalid_argument("keep_count: no tokens");
  // the epsilon keeps exact halves such as 2.5 from landing on 2.4999...
  const double exact = (1.0 - prune_ratio) * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::floor(exact + 0.5 + 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

struct SelectionMask {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::size_t k = 0;               // selected tokens per image
  std::vector<std::uint8_t> mask;  // [batch * tokens], 1 = primary token
  RowIndex idx;                    // ascending positions per image

  bool selected(std::size_t b, std::size_t t) const { return mask[b * tokens + t] != 0; }
};

namespace detail {

/// Positions of the `k` largest entries of `scores`; ties go to the lower position.
inline std::vector<std::size_t> top_positions(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  return order;
}

}  // namespace detail

/**
 * Hard top-k over per-image scores laid out [batch, tokens]. With a window,
 * tokens are split into consecutive windows of `window` positions and each
 * window keeps keep_count(window, prune_ratio) tokens.
 */
inline SelectionMask select_topk(std::span<const double> scores, std::size_t batch, std::size_t tokens,
                                 double prune_ratio, std::optional<std::size_t> window = std::nullopt) {
  if (scores.size() != batch * tokens)
    throw ShapeError("select_topk: " + std::to_string(scores.size()) + " scores for " + std::to_string(batch) + "x" +
                     std::to_string(tokens));
  const std::size_t span_len = window.value_or(tokens);
  if (span_len == 0 || tokens % span_len != 0)
    throw std::invalid_argument("select_topk: window size " + std::to_string(span_len) + " does not divide " +
                                std::to_string(tokens) + " tokens");
  const std::size_t per_span = keep_count(span_len, prune_ratio);
  const std::size_t spans = tokens / span_len;

  SelectionMask m;
  m.batch = batch;
  m.tokens = tokens;
  m.k = per_span * spans;
  m.mask.assign(batch * tokens, 0);
  m.idx.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t w = 0; w < spans; ++w) {
      const std::size_t offset = b * tokens + w * span_len;
      for (std::size_t t : detail::top_positions(scores.subspan(offset, span_len), per_span))
        m.mask[offset + t] = 1;
    }
    for (std::size_t t = 0; t < tokens; ++t)
      if (m.mask[b * tokens + t]) m.idx[b].push_back(t);
  }
  return m;
}

inline SelectionMask select_topk(const Tensor& scores, double prune_ratio,
                                 std::optional<std::size_t> window = std::nullopt) {
  if (scores.rank() != 2) throw ShapeError("select_topk: expected [B,N] scores, got " + to_string(scores.shape()));
  return select_topk(scores.data(), scores.dim(0), scores.dim(1), prune_ratio, window);
}

/// softmax over tokens of x · w, with x [B,N,C] and w [C,1]; returns [B,N].
inline Tensor predict_scores(const Tensor& x, const Tensor& predictor_weight) {
  if (x.rank() != 3 || predictor_weight.shape() != Shape{x.dim(2), 1})
    throw ShapeError("predict_scores: input " + to_string(x.shape()) + " vs predictor " +
                     to_string(predictor_weight.shape()));
  Tensor logits = reshape(matmul(x, predictor_weight), Shape{x.dim(0), x.dim(1)});
  return softmax(logits, 1);
}

/// Scores of the selected tokens, [B,k], aligned with mask.idx.
inline Tensor gather_scores(const Tensor& scores, const SelectionMask& m) {
  Tensor as_rows = reshape(scores, Shape{scores.dim(0), scores.dim(1), 1});
  return reshape(gather_rows(as_rows, m.idx), Shape{m.batch, m.k});
}

/// Row i of y scaled by (alpha * s_i + 1).
inline Tensor scale_by_score(const Tensor& y, const Tensor& s_selected, const Tensor& alpha) {
  if (y.rank() != 3 || s_selected.shape() != Shape{y.dim(0), y.dim(1)})
    throw ShapeError("scale_by_score: scores " + to_string(s_selected.shape()) + " do not align with " +
                     to_string(y.shape()));
  return scale_rows(y, add_scalar(mul_scalar(s_selected, alpha), 1.0));
}

/**
 * Selected rows: primary_i + gamma * secondary_i. Other rows: secondary_i.
 * primary is [B,k,C] in mask.idx order, secondary is [B,N,C].
 */
inline Tensor fuse_tokens(const Tensor& primary, const Tensor& secondary, const SelectionMask& m,
                          const Tensor& gamma) {
  if (secondary.rank() != 3 || secondary.dim(0) != m.batch || secondary.dim(1) != m.tokens)
    throw ShapeError("fuse_tokens: secondary " + to_string(secondary.shape()) + " does not match mask");
  if (primary.shape() != Shape{m.batch, m.k, secondary.dim(2)})
    throw ShapeError("fuse_tokens: primary " + to_string(primary.shape()) + " does not hold k=" +
                     std::to_string(m.k) + " rows");
  Tensor blended = add(primary, mul_scalar(gather_rows(secondary, m.idx), gamma));
  return scatter_rows(secondary, blended, m.idx);
}

/// Learnable fusion scalars (one per stage) and the selection policy of one module.
struct RoutingParams {
  Tensor alpha_attn;
  Tensor alpha_ffn;
  Tensor gamma_attn;
  Tensor gamma_ffn;
  double prune_ratio = kDefaultPruneRatio;
  std::optional<std::size_t> window;
};

/// Instrumentation of one routed module forward.
struct ModuleTrace {
  SelectionMask mask;
  double attention_stage_norm = 0.0;
  double ffn_stage_norm = 0.0;
};

namespace detail {

inline double frobenius(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace detail

/**
 * One big.LITTLE module, [B,N,C] -> [B,N,C]. `scores` come from the latest
 * prediction layer. The same selection drives both stages:
 *   x += fuse(scale(semi_cross_attention(norm(x))), e_attention(norm(x)))
 *   x += fuse(scale(p_ffn(norm(x_selected))),       e_ffn(norm(x)))
 */
inline Tensor forward_big_little(const Tensor& x, const Tensor& scores, const RoutingParams& r,
                                 const nn::BlockParams& perf, const nn::BlockParams& eff,
                                 ModuleTrace* trace = nullptr) {
  SelectionMask m = select_topk(scores, r.prune_ratio, r.window);
  if (m.batch != x.dim(0) || m.tokens != x.dim(1))
    throw ShapeError("forward_big_little: scores " + to_string(scores.shape()) + " vs tokens " + to_string(x.shape()));
  Tensor s_sel = gather_scores(scores, m);

  Tensor primary = scale_by_score(nn::semi_cross_attention(perf.norm1(x), m.idx, perf.attn), s_sel, r.alpha_attn);
  Tensor secondary = nn::e_attention(eff.norm1(x), eff.attn);
  Tensor h = add(x, fuse_tokens(primary, secondary, m, r.gamma_attn));

  primary = scale_by_score(nn::p_ffn(perf.norm2(gather_rows(h, m.idx)), perf.ffn), s_sel, r.alpha_ffn);
  secondary = nn::e_ffn(eff.norm2(h), eff.ffn);
  Tensor out = add(h, fuse_tokens(primary, secondary, m, r.gamma_ffn));

  if (trace) {
    trace->attention_stage_norm = detail::frobenius(h);
    trace->ffn_stage_norm = detail::frobenius(out);
    trace->mask = std::move(m);
  }
  return out;
}

/**
 * Performance block on the selected tokens only (no efficiency block). The
 * secondary stream is the identity, so unselected rows pass through unchanged
 * and selected rows become x_i + scaled P(x)_i + gamma * x_i.
 */
inline Tensor forward_pruned_only(const Tensor& x, const Tensor& scores, const RoutingParams& r,
                                  const nn::BlockParams& perf, ModuleTrace* trace = nullptr) {
  SelectionMask m = select_topk(scores, r.prune_ratio, r.window);
  if (m.batch != x.dim(0) || m.tokens != x.dim(1))
    throw ShapeError("forward_pruned_only: scores " + to_string(scores.shape()) + " vs tokens " + to_string(x.shape()));
  Tensor s_sel = gather_scores(scores, m);

  Tensor update = scale_by_score(nn::semi_cross_attention(perf.norm1(x), m.idx, perf.attn), s_sel, r.alpha_attn);
  Tensor h = fuse_tokens(add(gather_rows(x, m.idx), update), x, m, r.gamma_attn);

  Tensor h_sel = gather_rows(h, m.idx);
  update = scale_by_score(nn::p_ffn(perf.norm2(h_sel), perf.ffn), s_sel, r.alpha_ffn);
  Tensor out = fuse_tokens(add(h_sel, update), h, m, r.gamma_ffn);

  if (trace) {
    trace->attention_stage_norm = detail::frobenius(h);
    trace->ffn_stage_norm = detail::frobenius(out);
    trace->mask = std::move(m);
  }
  return out;
}

/// Mean over images of the Shannon entropy (nats) of the token scores.
inline double score_entropy(const Tensor& scores) {
  if (scores.rank() != 2) throw ShapeError("score_entropy: expected [B,N], got " + to_string(scores.shape()));
  double total = 0.0;
  for (double s : scores.values())
    if (s > 0.0) total -= s * std::log(s);
  return total / static_cast<double>(scores.dim(0));
}

}  // namespace blvit::routing
