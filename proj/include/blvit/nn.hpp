// SPDX-License-Identifier: Apache-2.0
/**
 * @file   nn.hpp
 * @brief  Transformer sublayers: multi-head self attention, semi-cross
 *         attention (selected queries, all keys/values), width-reduced
 *         attention and FFN for the efficiency path, and a pre-norm block.
 *
 * Weights are stored [in, out]. Only matrix products are FLOP-counted, so a
 * C_in -> C_out projection over N tokens costs N * C_in * C_out.
 */
#pragma once

#include <blvit/tensor.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace blvit::nn {

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  Tensor operator()(const Tensor& x) const { return layernorm(x, gain, bias); }
};

/// q/k/v map C_in -> d, o maps d -> C_out. head_dim = d / heads.
struct AttentionParams {
  Linear q, k, v, o;
  std::size_t heads = 1;

  std::size_t in_dim() const { return q.in_dim(); }
  std::size_t inner_dim() const { return q.out_dim(); }
  std::size_t out_dim() const { return o.out_dim(); }
};

/// fc1 expands 4x. in_map/out_map are present together (efficiency FFN) or not at all.
struct FfnParams {
  std::optional<Linear> in_map;
  Linear fc1, fc2;
  std::optional<Linear> out_map;

  bool dimension_matched() const { return in_map.has_value(); }
};

/// Pre-norm transformer block: x + attn(norm1(x)), then x + ffn(norm2(x)).
struct BlockParams {
  LayerNormParams norm1;
  AttentionParams attn;
  LayerNormParams norm2;
  FfnParams ffn;
};

namespace detail {

inline void check_tokens(const char* op, const Tensor& x, std::size_t width) {
  if (x.rank() != 3 || x.dim(2) != width)
    throw ShapeError(std::string(op) + ": expected [B,N," + std::to_string(width) + "], got " + to_string(x.shape()));
}

inline void check_attention(const char* op, const AttentionParams& p) {
  const std::size_t d = p.inner_dim();
  if (p.heads == 0 || d % p.heads != 0)
    throw ShapeError(std::string(op) + ": width " + std::to_string(d) + " not divisible by " +
                     std::to_string(p.heads) + " heads");
  if (p.k.out_dim() != d || p.v.out_dim() != d || p.o.in_dim() != d || p.k.in_dim() != p.in_dim() ||
      p.v.in_dim() != p.in_dim())
    throw ShapeError(std::string(op) + ": inconsistent projection shapes");
}

/// [B,T,d] -> [B,h,T,d/h]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  return permute(reshape(x, Shape{b, t, heads, d / heads}), {0, 2, 1, 3});
}

/// [B,h,T,hd] -> [B,T,h*hd]
inline Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), t = x.dim(2), hd = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), Shape{b, t, h * hd});
}

/// Queries from `query_src` [B,k,C], keys and values from `kv_src` [B,N,C].
inline Tensor attend(const Tensor& query_src, const Tensor& kv_src, const AttentionParams& p) {
  const std::size_t head_dim = p.inner_dim() / p.heads;
  Tensor q = split_heads(p.q(query_src), p.heads);
  Tensor k = split_heads(p.k(kv_src), p.heads);
  Tensor v = split_heads(p.v(kv_src), p.heads);
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  Tensor weights = softmax(scores, 3);
  return p.o(merge_heads(matmul(weights, v)));
}

}  // namespace detail

/// Multi-head softmax attention over all tokens. x: [B,N,C] -> [B,N,C_out].
inline Tensor self_attention(const Tensor& x, const AttentionParams& p) {
  detail::check_attention("self_attention", p);
  detail::check_tokens("self_attention", x, p.in_dim());
  return detail::attend(x, x, p);
}

/**
 * Attention whose queries are the selected tokens idx[b] and whose keys and
 * values are all N tokens. Output rows follow idx order: [B,k,C_out].
 */
inline Tensor semi_cross_attention(const Tensor& x, const RowIndex& idx, const AttentionParams& p) {
  detail::check_attention("semi_cross_attention", p);
  detail::check_tokens("semi_cross_attention", x, p.in_dim());
  for (const auto& row : idx) {
    std::vector<bool> seen(x.dim(1), false);
    for (std::size_t t : row) {
      if (t >= x.dim(1))
        throw IndexError("semi_cross_attention: token " + std::to_string(t) + " out of range for " +
                         to_string(x.shape()));
      if (seen[t]) throw IndexError("semi_cross_attention: duplicate token index " + std::to_string(t));
      seen[t] = true;
    }
  }
  return detail::attend(gather_rows(x, idx), x, p);
}

/// Self attention carried out at a reduced width C_e <= C and mapped back to C.
inline Tensor e_attention(const Tensor& x, const AttentionParams& p) {
  detail::check_attention("e_attention", p);
  detail::check_tokens("e_attention", x, p.in_dim());
  if (p.out_dim() != p.in_dim() || p.inner_dim() > p.in_dim())
    throw ShapeError("e_attention: expected C -> C_e <= C -> C projections, got " + std::to_string(p.in_dim()) +
                     " -> " + std::to_string(p.inner_dim()) + " -> " + std::to_string(p.out_dim()));
  return detail::attend(x, x, p);
}

/// [optional in_map] -> fc1 -> gelu -> fc2 -> [optional out_map]
inline Tensor ffn(const Tensor& x, const FfnParams& p) {
  if (p.in_map.has_value() != p.out_map.has_value())
    throw ShapeError("ffn: dimension-matching maps must be both present or both absent");
  Tensor h = p.in_map ? (*p.in_map)(x) : x;
  h = p.fc2(gelu(p.fc1(h)));
  return p.out_map ? (*p.out_map)(h) : h;
}

/// Standard 4x FFN over the selected rows only. x_selected: [B,k,C].
inline Tensor p_ffn(const Tensor& x_selected, const FfnParams& p) {
  if (p.dimension_matched()) throw ShapeError("p_ffn: performance FFN must not carry dimension maps");
  detail::check_tokens("p_ffn", x_selected, p.fc1.in_dim());
  return ffn(x_selected, p);
}

/// C -> C_e -> 4C_e -> C_e -> C over all tokens.
inline Tensor e_ffn(const Tensor& x, const FfnParams& p) {
  if (!p.dimension_matched()) throw ShapeError("e_ffn: efficiency FFN needs in/out dimension maps");
  detail::check_tokens("e_ffn", x, p.in_map->in_dim());
  return ffn(x, p);
}

/// Vanilla pre-norm ViT block over all tokens.
inline Tensor vanilla_block(const Tensor& x, const BlockParams& p) {
  Tensor h = add(x, self_attention(p.norm1(x), p.attn));
  return add(h, ffn(p.norm2(h), p.ffn));
}

}  // namespace blvit::nn
