// SPDX-License-Identifier: Apache-2.0
/**
 * @file   costmodel.hpp
 * @brief  Closed-form multiply-accumulate counts per block kind, whole-model
 *         cost reports, and the comparison against instrumented counts.
 *
 * Convention: a projection of T tokens from width a to width b costs T*a*b;
 * full attention over N tokens at width d adds 2*N*N*d (scores and mixing).
 * Biases, norms, softmax and gelu are free.
 */
#pragma once

#include <blvit/model.hpp>

#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace blvit::cost {

using Flops = std::uint64_t;

/// 12NC^2 + 2N^2C
inline Flops vanilla_block(Flops n, Flops c) { return 12 * n * c * c + 2 * n * n * c; }

/// Semi-cross attention (k queries over N keys) plus a 4x FFN on the k selected tokens.
inline Flops p_block(Flops n, Flops c, Flops k) {
  const Flops attention = k * c * c + 2 * n * c * c + 2 * k * n * c + k * c * c;
  return attention + 8 * k * c * c;
}

/// Width-reduced attention and mapped FFN over all N tokens.
inline Flops e_block(Flops n, Flops c, Flops ce) {
  const Flops attention = 4 * n * c * ce + 2 * n * n * ce;
  return attention + 2 * n * c * ce + 8 * n * ce * ce;
}

inline Flops big_little_layer(Flops n, Flops c, Flops ce, Flops k) { return p_block(n, c, k) + e_block(n, c, ce); }

inline Flops predictor(Flops n, Flops c) { return n * c; }

/// Real-valued form with k = keep * N, for comparing against fractional closed forms.
inline double p_block_fraction(double n, double c, double keep) {
  const double k = keep * n;
  return 2 * k * c * c + 2 * n * c * c + 2 * k * n * c + 8 * k * c * c;
}

inline double big_little_layer_fraction(double n, double c, double ce, double keep) {
  return p_block_fraction(n, c, keep) + 6 * n * c * ce + 2 * n * n * ce + 8 * n * ce * ce;
}

/// Dimensions the report is evaluated at; decoupled from ModelConfig so the reference scale can be plugged in.
struct CostShape {
  Flops tokens = 0;        // tokens inside the transformer
  Flops patch_tokens = 0;  // tokens produced by the patch embedding
  Flops patch_dim = 0;
  Flops dim = 0;
  Flops e_dim = 0;
  Flops num_classes = 0;
  Flops keep = 0;  // selected tokens per routed layer
  std::vector<LayerKind> plan;
  std::vector<std::size_t> predictor_layers;
};

inline CostShape shape_of(const ModelConfig& c) {
  const std::size_t span = c.window_size.value_or(c.tokens());
  return {c.tokens(),
          c.tokens(),
          c.patch_dim(),
          c.dim,
          c.e_dim,
          c.num_classes,
          routing::keep_count(span, c.prune_ratio) * (c.tokens() / span),
          c.layer_plan,
          c.predictor_layers};
}

/// Same plan at ViT-Base dimensions: 196 patches of 16x16x3 plus one class token, C=768, C_e=192, 1000 classes.
inline CostShape paper_scale(const ModelConfig& c) {
  CostShape s = shape_of(c);
  s.tokens = 197;
  s.patch_tokens = 196;
  s.patch_dim = 16 * 16 * 3;
  s.dim = 768;
  s.e_dim = 192;
  s.num_classes = 1000;
  s.keep = routing::keep_count(197, c.prune_ratio);
  return s;
}

struct CostRow {
  std::string name;  // "embed", "layer.3", "predictor.4", "head"
  std::string kind;  // "embed", "vanilla", "big-little", "pruned-only", "predictor", "head"
  Flops analytic = 0;
  std::optional<Flops> counted;
};

struct CostReport {
  std::vector<CostRow> rows;
  Flops total_analytic = 0;
  std::optional<Flops> total_counted;
  Flops vanilla_total = 0;       // same dims, every layer vanilla, no predictors
  double model_speedup = 0.0;    // vanilla_total / total_analytic
  double layer_speedup = 0.0;    // vanilla block / big.LITTLE layer at these dims, 0 if none
  CostShape shape;

  bool all_exact() const {
    for (const auto& r : rows)
      if (!r.counted || *r.counted != r.analytic) return false;
    return true;
  }
};

inline CostReport analytic_report(const CostShape& s) {
  CostReport r;
  r.shape = s;
  const Flops embed = s.patch_tokens * s.patch_dim * s.dim;
  const Flops head = s.dim * s.num_classes;
  r.rows.push_back({"embed", "embed", embed, {}});
  for (std::size_t layer = 1; layer <= s.plan.size(); ++layer) {
    const LayerKind kind = s.plan[layer - 1];
    Flops f = 0;
    switch (kind) {
      case LayerKind::Vanilla: f = vanilla_block(s.tokens, s.dim); break;
      case LayerKind::BigLittle: f = big_little_layer(s.tokens, s.dim, s.e_dim, s.keep); break;
      case LayerKind::PrunedOnly: f = p_block(s.tokens, s.dim, s.keep); break;
    }
    r.rows.push_back({"layer." + std::to_string(layer), layer_name(kind), f, {}});
    if (std::find(s.predictor_layers.begin(), s.predictor_layers.end(), layer) != s.predictor_layers.end())
      r.rows.push_back({"predictor." + std::to_string(layer), "predictor", predictor(s.tokens, s.dim), {}});
  }
  r.rows.push_back({"head", "head", head, {}});
  for (const auto& row : r.rows) r.total_analytic += row.analytic;
  r.vanilla_total = embed + head + s.plan.size() * vanilla_block(s.tokens, s.dim);
  r.model_speedup = static_cast<double>(r.vanilla_total) / static_cast<double>(r.total_analytic);
  if (std::find(s.plan.begin(), s.plan.end(), LayerKind::BigLittle) != s.plan.end())
    r.layer_speedup = static_cast<double>(vanilla_block(s.tokens, s.dim)) /
                      static_cast<double>(big_little_layer(s.tokens, s.dim, s.e_dim, s.keep));
  return r;
}

/// Multiply counts of one single-image forward, keyed by stage name.
inline std::vector<std::pair<std::string, Flops>> counted_stages(const Model& m) {
  NoGradGuard no_grad;
  Rng rng(m.config.seed);
  const ModelConfig& c = m.config;
  Tensor images = Tensor::zeros({1, c.image_size, c.image_size, c.channels});
  for (double& v : images.values()) v = rng.uniform();
  return forward(m, images, {.count_flops = true}).flops;
}

/// Analytic report for the config's own dimensions, with instrumented counts filled in when `count` is set.
inline CostReport model_cost(const ModelConfig& c, bool count = true) {
  CostReport r = analytic_report(shape_of(c));
  if (!count) return r;
  const auto stages = counted_stages(build(c));
  if (stages.size() != r.rows.size()) throw std::logic_error("cost report and forward disagree on stage count");
  Flops total = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].first != r.rows[i].name)
      throw std::logic_error("stage order mismatch: " + stages[i].first + " vs " + r.rows[i].name);
    r.rows[i].counted = stages[i].second;
    total += stages[i].second;
  }
  r.total_counted = total;
  return r;
}

inline std::string giga(Flops f) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3) << static_cast<double>(f) / 1e9;
  return out.str();
}

/// Aligned human-readable table.
inline std::string format_table(const CostReport& r) {
  std::ostringstream out;
  out << "tokens=" << r.shape.tokens << " dim=" << r.shape.dim << " e_dim=" << r.shape.e_dim
      << " keep=" << r.shape.keep << "\n";
  out << std::left << std::setw(14) << "stage" << std::setw(13) << "kind" << std::right << std::setw(16) << "analytic"
      << std::setw(16) << "counted" << "  check\n";
  for (const auto& row : r.rows) {
    out << std::left << std::setw(14) << row.name << std::setw(13) << row.kind << std::right << std::setw(16)
        << row.analytic << std::setw(16) << (row.counted ? std::to_string(*row.counted) : "n/a") << "  "
        << (!row.counted ? "n/a" : *row.counted == row.analytic ? "exact" : "MISMATCH") << "\n";
  }
  out << "total analytic " << r.total_analytic << " (" << giga(r.total_analytic) << " G)\n";
  if (r.total_counted) out << "total counted  " << *r.total_counted << "\n";
  out << "all-vanilla    " << r.vanilla_total << " (" << giga(r.vanilla_total) << " G)\n";
  out << std::fixed << std::setprecision(4) << "speedup model  " << r.model_speedup << "\n";
  if (r.layer_speedup > 0.0) out << "speedup layer  " << r.layer_speedup << "\n";
  return out.str();
}

/// Flat `key: value` dump; keys are stable and documented in the README.
inline std::string format_keyvalue(const CostReport& r) {
  std::ostringstream out;
  out << "shape.tokens: " << r.shape.tokens << "\n"
      << "shape.dim: " << r.shape.dim << "\n"
      << "shape.e_dim: " << r.shape.e_dim << "\n"
      << "shape.keep: " << r.shape.keep << "\n";
  for (const auto& row : r.rows) {
    out << row.name << ".kind: " << row.kind << "\n" << row.name << ".analytic: " << row.analytic << "\n";
    out << row.name << ".counted: " << (row.counted ? std::to_string(*row.counted) : "n/a") << "\n";
  }
  out << "total.analytic: " << r.total_analytic << "\n"
      << "total.counted: " << (r.total_counted ? std::to_string(*r.total_counted) : "n/a") << "\n"
      << "total.gflops: " << giga(r.total_analytic) << "\n"
      << "vanilla.analytic: " << r.vanilla_total << "\n"
      << "vanilla.gflops: " << giga(r.vanilla_total) << "\n"
      << std::setprecision(6) << "speedup.model: " << r.model_speedup << "\n"
      << "speedup.layer: " << r.layer_speedup << "\n"
      << "counted.exact: " << (r.total_counted ? (r.all_exact() ? "true" : "false") : "n/a") << "\n";
  return out.str();
}

}  // namespace blvit::cost
