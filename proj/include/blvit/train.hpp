// SPDX-License-Identifier: Apache-2.0
/**
 * @file   train.hpp
 * @brief  Losses (cross-entropy plus weighted feature distillation against a
 *         frozen teacher), AdamW with decoupled weight decay, evaluation and
 *         the seeded epoch loop that writes the per-epoch CSV log.
 */
#pragma once

#include <blvit/data.hpp>
#include <blvit/model.hpp>
#include <blvit/routing.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace blvit::train {

inline constexpr double kDefaultDistillWeight = 2.5;

struct OptimConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct DistillConfig {
  bool enabled = false;
  double lambda_fd = kDefaultDistillWeight;
  const Model* teacher = nullptr;  // frozen; also used for monitoring when disabled
};

/// 1 - mean over (batch, token) of the cosine between feature vectors; teacher is treated as a constant.
inline Tensor feature_distill_loss(const Tensor& student, const Tensor& teacher) {
  if (student.shape() != teacher.shape())
    throw ShapeError("feature_distill_loss: student " + to_string(student.shape()) + " vs teacher " +
                     to_string(teacher.shape()));
  return add_scalar(scale(mean_all(cosine_similarity(student, teacher.detach())), -1.0), 1.0);
}

/// Cross-entropy, plus lambda_fd * feature distillation when `teacher_features` is given.
inline Tensor total_loss(const Tensor& logits, const std::vector<int>& labels, const Tensor& student_features,
                         const Tensor& teacher_features, double lambda_fd) {
  Tensor ce = cross_entropy(logits, labels);
  if (!teacher_features.defined() || lambda_fd == 0.0) return ce;
  return add(ce, scale(feature_distill_loss(student_features, teacher_features), lambda_fd));
}

/// Norm parameters, biases and the fusion scalars are not decayed.
inline bool decays(const std::string& name) {
  const bool bias = name.ends_with(".bias");
  const bool norm = name.find("norm") != std::string::npos;
  const bool fusion = name.ends_with("alpha_attn") || name.ends_with("alpha_ffn") || name.ends_with("gamma_attn") ||
                      name.ends_with("gamma_ffn");
  return !(bias || norm || fusion);
}

using Grads = std::map<std::string, std::vector<double>>;

/// Gradient snapshot of every parameter (zeros where backward did not reach).
inline Grads collect_grads(const ParamStore& params) {
  Grads out;
  for (const auto& [name, t] : params.items()) {
    if (t.has_grad())
      out[name].assign(t.grad().begin(), t.grad().end());
    else
      out[name].assign(t.numel(), 0.0);
  }
  return out;
}

class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) {
    if (!(cfg_.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  }

  std::size_t steps() const { return step_; }

  /// One update; `grads` must be keyed exactly like `params`.
  void step(ParamStore& params, const Grads& grads) {
    if (grads.size() != params.size())
      for (const auto& [name, _] : grads)
        if (!params.contains(name)) throw std::invalid_argument("AdamW: gradient for unknown parameter '" + name + "'");
    for (const auto& [name, _] : params.items())
      if (!grads.count(name)) throw std::invalid_argument("AdamW: missing gradient for '" + name + "'");

    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& [name, _] : params.items()) {
      Tensor& t = params.at(name);
      const auto& g = grads.at(name);
      if (g.size() != t.numel()) throw std::invalid_argument("AdamW: gradient size mismatch for '" + name + "'");
      auto& m = first_[name];
      auto& v = second_[name];
      if (m.empty()) {
        m.assign(g.size(), 0.0);
        v.assign(g.size(), 0.0);
      }
      const double decay = decays(name) ? cfg_.learning_rate * cfg_.weight_decay : 0.0;
      auto& p = t.values();
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] -= decay * p[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        p[i] -= cfg_.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  OptimConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, std::vector<double>> first_, second_;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::pair<std::size_t, double>> entropy;  // (predictor layer, mean score entropy)

  double mean_entropy() const {
    if (entropy.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [_, e] : entropy) s += e;
    return s / static_cast<double>(entropy.size());
  }
};

inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out;
  const std::size_t k = logits.dim(1);
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const auto row = logits.data().subspan(b * k, k);
    out.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

inline EvalResult evaluate(const Model& m, const data::Dataset& d, std::size_t batch_size = 100) {
  NoGradGuard no_grad;
  EvalResult r;
  std::size_t correct = 0;
  std::map<std::size_t, double> entropy;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, d.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto out = forward(m, d.images(idx));
    const auto pred = argmax_rows(out.logits);
    for (std::size_t i = 0; i < idx.size(); ++i) correct += static_cast<int>(pred[i]) == d.labels[idx[i]];
    for (const auto& [layer, s] : out.predictions)
      entropy[layer] += routing::score_entropy(s) * static_cast<double>(idx.size());
  }
  r.accuracy = d.size() ? static_cast<double>(correct) / static_cast<double>(d.size()) : 0.0;
  for (const auto& [layer, e] : entropy) r.entropy.emplace_back(layer, e / static_cast<double>(d.size()));
  return r;
}

/// Teacher features for every sample, [count * N * C], computed once.
inline std::vector<double> teacher_feature_cache(const Model& teacher, const data::Dataset& d,
                                                 std::size_t batch_size = 100) {
  NoGradGuard no_grad;
  std::vector<double> out;
  for (std::size_t start = 0; start < d.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, d.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto f = forward(teacher, d.images(idx)).features;
    out.insert(out.end(), f.values().begin(), f.values().end());
  }
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double distill_loss = std::numeric_limits<double>::quiet_NaN();  // NaN without a teacher
  double score_entropy = 0.0;
};

inline constexpr const char* kLogHeader = "epoch,train_loss,val_acc,distill_loss,score_entropy";

inline std::string format_log_row(const EpochLog& e) {
  std::ostringstream out;
  out.precision(10);
  out << e.epoch << ',' << e.train_loss << ',' << e.val_acc << ',';
  if (std::isnan(e.distill_loss))
    out << "nan";
  else
    out << e.distill_loss;
  out << ',' << e.score_entropy;
  return out.str();
}

struct TrainResult {
  std::vector<EpochLog> log;
  double initial_distill_loss = std::numeric_limits<double>::quiet_NaN();  // before the first step
};

using EpochCallback = std::function<void(const EpochLog&)>;

/**
 * Mini-batch AdamW over `train` for cfg.epochs epochs with a seeded shuffle
 * per epoch. Throws NumericError if a loss or gradient becomes non-finite.
 */
inline TrainResult train_loop(Model& model, const data::Dataset& train, const data::Dataset& val,
                              const OptimConfig& cfg, const DistillConfig& distill,
                              const EpochCallback& on_epoch = {}) {
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw ConfigError("batch_size and epochs must be positive");
  if (distill.enabled && !distill.teacher) throw ConfigError("distillation enabled without a teacher");
  if (distill.teacher && (distill.teacher->config.dim != model.config.dim ||
                          distill.teacher->config.tokens() != model.config.tokens()))
    throw ConfigError("teacher and student must share token grid and width");

  const std::size_t per_sample = model.config.tokens() * model.config.dim;
  std::vector<double> cache;
  if (distill.teacher) cache = teacher_feature_cache(*distill.teacher, train);
  auto teacher_batch = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> out(idx.size() * per_sample);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(cache.begin() + static_cast<std::ptrdiff_t>(idx[i] * per_sample), per_sample,
                  out.begin() + static_cast<std::ptrdiff_t>(i * per_sample));
    return Tensor(Shape{idx.size(), model.config.tokens(), model.config.dim}, std::move(out));
  };

  TrainResult result;
  if (distill.teacher) {
    NoGradGuard no_grad;
    double total = 0.0;
    for (std::size_t start = 0; start < train.size(); start += 100) {
      std::vector<std::size_t> idx(std::min<std::size_t>(100, train.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      const auto out = forward(model, train.images(idx));
      total += feature_distill_loss(out.features, teacher_batch(idx)).item() * static_cast<double>(idx.size());
    }
    result.initial_distill_loss = total / static_cast<double>(train.size());
  }

  AdamW opt(cfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  model.params.set_requires_grad(true);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0, fd_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg.batch_size, order.size())));
      model.params.zero_grad();
      Graph graph;
      const auto out = forward(model, train.images(idx));
      Tensor loss = cross_entropy(out.logits, train.labels_of(idx));
      if (distill.teacher) {
        Tensor fd = feature_distill_loss(out.features, teacher_batch(idx));
        fd_sum += fd.item() * static_cast<double>(idx.size());
        if (distill.enabled) loss = add(loss, scale(fd, distill.lambda_fd));
      }
      if (!std::isfinite(loss.item())) throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
      graph.backward(loss);
      const Grads grads = collect_grads(model.params);
      for (const auto& [name, g] : grads)
        for (double v : g)
          if (!std::isfinite(v)) throw NumericError("non-finite gradient for " + name);
      opt.step(model.params, grads);
      loss_sum += loss.item() * static_cast<double>(idx.size());
    }
    model.params.zero_grad();
    const auto ev = evaluate(model, val);
    EpochLog row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train.size());
    row.val_acc = ev.accuracy;
    if (distill.teacher) row.distill_loss = fd_sum / static_cast<double>(train.size());
    row.score_entropy = ev.mean_entropy();
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

}  // namespace blvit::train
