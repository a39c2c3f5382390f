// SPDX-License-Identifier: Apache-2.0
/**
 * @file   gradcheck.hpp
 * @brief  Finite-difference audit of every layer type and of the end-to-end
 *         training loss on a tiny model, reported per parameter group.
 *
 * Error measure per group: ||analytic - numeric|| / max(||analytic||, ||numeric||).
 */
#pragma once

#include <blvit/model.hpp>
#include <blvit/random.hpp>
#include <blvit/train.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace blvit::gradcheck {

inline constexpr double kTolerance = 1e-4;
inline constexpr double kStep = 1e-5;
inline constexpr std::size_t kMaxTokens = 8;
inline constexpr std::size_t kMaxWidth = 16;

enum class Status { Pass, Fail, ZeroExpected, ZeroUnexpected };

inline const char* status_name(Status s) {
  switch (s) {
    case Status::Pass: return "pass";
    case Status::Fail: return "FAIL";
    case Status::ZeroExpected: return "zero-gradient (expected)";
    case Status::ZeroUnexpected: return "FAIL zero-gradient";
  }
  return "?";
}

struct GroupResult {
  std::string group;
  double relative_error = 0.0;
  double analytic_norm = 0.0;
  Status status = Status::Pass;
};

struct Report {
  std::vector<GroupResult> groups;
  std::uint64_t input_seed = 0;

  bool passed() const {
    for (const auto& g : groups)
      if (g.status == Status::Fail || g.status == Status::ZeroUnexpected) return false;
    return true;
  }
  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& g : groups)
      if (g.status == Status::Fail || g.status == Status::ZeroUnexpected) out.push_back(g.group);
    return out;
  }
  std::string format() const {
    std::ostringstream out;
    out.setf(std::ios::scientific);
    out.precision(3);
    for (const auto& g : groups)
      out << g.group << "  rel_err=" << g.relative_error << "  |grad|=" << g.analytic_norm << "  "
          << status_name(g.status) << "\n";
    out << (passed() ? "gradcheck: all groups pass" : "gradcheck: FAILED") << "\n";
    return out.str();
  }
};

struct Options {
  bool freeze_alpha = false;  // keep the score-scaling factor at exactly 1
  double tolerance = kTolerance;
};

/// Default tiny layout: 8x8 images, 4x4 patches (4 tokens), C=8, C_e=4, one layer of each kind.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.dim = 8;
  c.e_dim = 4;
  c.head_dim = 4;
  c.num_classes = 3;
  c.layer_plan = {LayerKind::Vanilla, LayerKind::BigLittle, LayerKind::PrunedOnly};
  c.predictor_layers = {1};
  c.prune_ratio = 0.5;
  return c;
}

inline void check_tiny(const ModelConfig& c) {
  if (c.tokens() > kMaxTokens || c.dim > kMaxWidth)
    throw ConfigError("gradcheck needs a tiny model (tokens <= " + std::to_string(kMaxTokens) + ", dim <= " +
                      std::to_string(kMaxWidth) + "), got " + std::to_string(c.tokens()) + " tokens and dim " +
                      std::to_string(c.dim));
}

namespace detail {

struct Target {
  std::string group;
  std::vector<Tensor> tensors;
  bool zero_expected = false;
};

inline GroupResult compare(const std::string& group, const std::vector<double>& a, const std::vector<double>& n,
                           bool zero_expected, double tol) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  diff = std::sqrt(diff);
  na = std::sqrt(na);
  nn = std::sqrt(nn);
  GroupResult r{group, 0.0, na, Status::Pass};
  const double scale = std::max(na, nn);
  constexpr double kZero = 1e-10;
  if (zero_expected) {
    r.status = na == 0.0 && nn < kZero ? Status::ZeroExpected : Status::Fail;
    r.relative_error = diff;
    return r;
  }
  if (scale < kZero) {
    r.status = Status::ZeroUnexpected;
    return r;
  }
  r.relative_error = diff / scale;
  r.status = r.relative_error < tol ? Status::Pass : Status::Fail;
  return r;
}

/// Analytic and central-difference gradients of `loss` for every target group.
inline std::vector<GroupResult> run(const std::function<Tensor()>& loss, std::vector<Target>& targets, double tol) {
  std::vector<GroupResult> out;
  for (auto& target : targets) {
    for (Tensor& t : target.tensors) t.zero_grad();
    {
      Graph g;
      g.backward(loss());
    }
    std::vector<double> analytic, numeric;
    for (Tensor& t : target.tensors) {
      if (t.has_grad())
        analytic.insert(analytic.end(), t.grad().begin(), t.grad().end());
      else
        analytic.insert(analytic.end(), t.numel(), 0.0);
      t.zero_grad();
    }
    {
      NoGradGuard no_grad;
      for (Tensor& t : target.tensors) {
        auto& v = t.values();
        for (double& x : v) {
          const double saved = x;
          x = saved + kStep;
          const double up = loss().item();
          x = saved - kStep;
          const double down = loss().item();
          x = saved;
          numeric.push_back((up - down) / (2 * kStep));
        }
      }
    }
    out.push_back(compare(target.group, analytic, numeric, target.zero_expected, tol));
  }
  return out;
}

/// Replaces every parameter with well-spread values so that nonlinear paths are exercised.
inline void randomise(Model& m, std::uint64_t seed, bool freeze_alpha) {
  Rng rng(seed);
  for (const auto& [name, _] : m.params.items()) {
    auto& v = m.params.at(name).values();
    const bool fusion = name.find("alpha") != std::string::npos || name.find("gamma") != std::string::npos;
    for (double& x : v) {
      if (name.find("alpha") != std::string::npos)
        x = freeze_alpha ? 0.0 : 0.5 + 0.2 * rng.normal();
      else if (name.find("gamma") != std::string::npos)
        x = 0.3 + 0.1 * rng.normal();
      else if (name.ends_with(".gain"))
        x = 1.0 + 0.1 * rng.normal();
      else if (name.ends_with(".bias"))
        x = 0.1 * rng.normal();
      else if (!fusion)
        x = (name.starts_with("predictors.") ? 1.0 : 0.4) * rng.normal();
    }
  }
}

/// Smallest gap between the k-th and (k+1)-th score of any image or window.
inline double selection_margin(const Tensor& scores, double prune_ratio, std::optional<std::size_t> window) {
  const std::size_t b = scores.dim(0), n = scores.dim(1), span = window.value_or(n);
  const std::size_t k = routing::keep_count(span, prune_ratio);
  if (k == span) return std::numeric_limits<double>::infinity();
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t w = 0; w < n / span; ++w) {
      std::vector<double> s(scores.values().begin() + static_cast<std::ptrdiff_t>(i * n + w * span),
                            scores.values().begin() + static_cast<std::ptrdiff_t>(i * n + w * span + span));
      std::sort(s.begin(), s.end(), std::greater<>());
      margin = std::min(margin, s[k - 1] - s[k]);
    }
  return margin;
}

inline std::string group_of(const std::string& name) {
  if (name.starts_with("layers.")) {
    const auto second = name.find('.', 7);
    const std::string layer = name.substr(0, second);
    const std::string rest = name.substr(second + 1);
    if (rest.starts_with("p.")) return layer + ".performance";
    if (rest.starts_with("e.")) return layer + ".efficiency";
    if (rest.starts_with("alpha")) return layer + ".alpha";
    return layer + ".gamma";
  }
  return name.substr(0, name.find('.', name.starts_with("predictors.") ? 11 : 0));
}

}  // namespace detail

/**
 * Checks each layer type in isolation (input and parameters together), then
 * the end-to-end loss (cross-entropy plus weighted feature distillation)
 * per parameter group.
 */
inline Report run(const ModelConfig& config, const Options& opt = {}) {
  check_tiny(config);
  config.validate();
  Model m = build(config);
  detail::randomise(m, config.seed + 17, opt.freeze_alpha);
  m.params.set_requires_grad(true);

  const std::size_t batch = 2;
  const ModelConfig& c = m.config;
  Report report;

  // inputs whose top-k decisions sit far from ties, so central differences never flip a selection
  Tensor images;
  std::vector<int> labels;
  Tensor teacher_features;
  for (std::uint64_t seed = config.seed;; ++seed) {
    Rng rng(seed * 7919 + 1);
    images = Tensor::zeros({batch, c.image_size, c.image_size, c.channels});
    for (double& v : images.values()) v = rng.uniform();
    teacher_features = Tensor::zeros({batch, c.tokens(), c.dim});
    for (double& v : teacher_features.values()) v = rng.normal();
    labels.clear();
    for (std::size_t b = 0; b < batch; ++b) labels.push_back(static_cast<int>(rng.below(c.num_classes)));
    NoGradGuard no_grad;
    const auto out = forward(m, images);
    double margin = std::numeric_limits<double>::infinity();
    for (const auto& [_, s] : out.predictions)
      margin = std::min(margin, detail::selection_margin(s, c.prune_ratio, c.window_size));
    if (margin > 1e-3 || seed > config.seed + 200) {
      report.input_seed = seed;
      break;
    }
  }

  // layer types in isolation, on the hidden stream entering the first routed layer
  Tensor hidden;
  Tensor scores;
  std::size_t routed = 0;
  {
    NoGradGuard no_grad;
    const auto out = forward(m, images);
    scores = out.predictions.front().second.detach();
    hidden = out.features.clone(true);
    for (std::size_t layer = 1; layer <= c.depth(); ++layer)
      if (c.layer_plan[layer - 1] == LayerKind::BigLittle) {
        routed = layer;
        break;
      }
  }
  if (routed) {
    const std::string prefix = "layers." + std::to_string(routed) + ".";
    const auto perf = blvit::detail::block_view(m.params, prefix + "p.", c.heads());
    const auto eff = blvit::detail::block_view(m.params, prefix + "e.", c.e_heads());
    const auto rp = blvit::detail::routing_view(m.params, c, routed);
    const auto mask = routing::select_topk(scores, c.prune_ratio, c.window_size);
    auto block_tensors = [&](const std::string& p, std::initializer_list<const char*> parts) {
      std::vector<Tensor> out{hidden};
      for (const auto& [name, t] : m.params.items())
        if (name.starts_with(p))
          for (const char* part : parts)
            if (name.find(part) != std::string::npos) out.push_back(t);
      return out;
    };
    auto probe = [&](const Tensor& y) {
      Rng rng(99);
      Tensor w = Tensor::zeros(y.shape());
      for (double& v : w.values()) v = rng.normal();
      return sum(mul(y, w));
    };
    struct Case {
      const char* name;
      std::function<Tensor()> loss;
      std::vector<Tensor> tensors;
    };
    const std::vector<Case> cases{
        {"layer.vanilla_block", [&] { return probe(nn::vanilla_block(hidden, perf)); },
         block_tensors(prefix + "p.", {"norm", "attn", "ffn"})},
        {"layer.self_attention", [&] { return probe(nn::self_attention(hidden, perf.attn)); },
         block_tensors(prefix + "p.", {"attn"})},
        {"layer.semi_cross_attention", [&] { return probe(nn::semi_cross_attention(hidden, mask.idx, perf.attn)); },
         block_tensors(prefix + "p.", {"attn"})},
        {"layer.e_attention", [&] { return probe(nn::e_attention(hidden, eff.attn)); },
         block_tensors(prefix + "e.", {"attn"})},
        {"layer.p_ffn", [&] { return probe(nn::p_ffn(gather_rows(hidden, mask.idx), perf.ffn)); },
         block_tensors(prefix + "p.", {"ffn"})},
        {"layer.e_ffn", [&] { return probe(nn::e_ffn(hidden, eff.ffn)); }, block_tensors(prefix + "e.", {"ffn"})},
        {"layer.big_little", [&] { return probe(routing::forward_big_little(hidden, scores, rp, perf, eff)); },
         block_tensors(prefix, {"."})},
        {"layer.pruned_only", [&] { return probe(routing::forward_pruned_only(hidden, scores, rp, perf)); },
         block_tensors(prefix + "p.", {"."})},
    };
    for (const auto& cs : cases) {
      std::vector<detail::Target> t{{cs.name, cs.tensors, false}};
      auto r = detail::run(cs.loss, t, opt.tolerance);
      report.groups.insert(report.groups.end(), r.begin(), r.end());
    }
  }

  // end to end, grouped by parameter family
  std::map<std::string, detail::Target> grouped;
  for (const auto& [name, t] : m.params.items()) {
    const std::string g = "model." + detail::group_of(name);
    auto& target = grouped[g];
    target.group = g;
    target.tensors.push_back(t);
    if (opt.freeze_alpha && name.starts_with("predictors.")) target.zero_expected = true;
  }
  std::vector<detail::Target> targets;
  for (auto& [_, t] : grouped) targets.push_back(std::move(t));
  auto loss = [&] {
    const auto out = forward(m, images);
    return train::total_loss(out.logits, labels, out.features, teacher_features, train::kDefaultDistillWeight);
  };
  auto r = detail::run(loss, targets, opt.tolerance);
  report.groups.insert(report.groups.end(), r.begin(), r.end());
  return report;
}

}  // namespace blvit::gradcheck
