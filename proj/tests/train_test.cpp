// SPDX-License-Identifier: Apache-2.0
#include <blvit/train.hpp>

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace blvit;
using namespace blvit::train;
using test::random_tensor;

namespace {

ModelConfig tiny_config(bool routed) {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.dim = 16;
  c.e_dim = 8;
  c.head_dim = 4;
  if (routed) {
    c.layer_plan = {LayerKind::Vanilla, LayerKind::BigLittle, LayerKind::BigLittle};
    c.predictor_layers = {1};
  } else {
    c.layer_plan = {LayerKind::Vanilla, LayerKind::Vanilla};
  }
  return c;
}

data::DatasetSpec tiny_data(std::size_t train, std::size_t val) {
  data::DatasetSpec s;
  s.image_size = 16;
  s.train_count = train;
  s.val_count = val;
  s.seed = 3;
  return s;
}

}  // namespace

TEST(DistillLoss, AlignedAntiAlignedAndBruteForce) {
  std::mt19937_64 rng(1);
  Tensor t = random_tensor({2, 5, 6}, rng);
  EXPECT_NEAR(feature_distill_loss(t, t).item(), 0.0, 1e-15);
  EXPECT_NEAR(feature_distill_loss(scale(t, -1.0), t).item(), 2.0, 1e-15);
  EXPECT_NEAR(feature_distill_loss(scale(t, 3.0), t).item(), 0.0, 1e-15);

  Tensor s = random_tensor({2, 5, 6}, rng);
  double acc = 0.0;
  for (std::size_t row = 0; row < 10; ++row) {
    double dot = 0, ns = 0, nt = 0;
    for (std::size_t c = 0; c < 6; ++c) {
      const double a = s.values()[row * 6 + c], b = t.values()[row * 6 + c];
      dot += a * b;
      ns += a * a;
      nt += b * b;
    }
    acc += dot / std::sqrt(ns * nt);
  }
  EXPECT_NEAR(feature_distill_loss(s, t).item(), 1.0 - acc / 10.0, 1e-12);
}

TEST(DistillLoss, ZeroFeatureIsGuarded) {
  Tensor zero = Tensor::zeros({1, 2, 3});
  Tensor t = Tensor::full({1, 2, 3}, 1.0);
  EXPECT_DOUBLE_EQ(feature_distill_loss(zero, t).item(), 1.0);
  EXPECT_THROW(feature_distill_loss(zero, Tensor::zeros({1, 3, 3})), ShapeError);
}

TEST(DistillLoss, TeacherReceivesNoGradient) {
  std::mt19937_64 rng(2);
  Tensor s = random_tensor({1, 3, 4}, rng, 1.0, true);
  Tensor t = random_tensor({1, 3, 4}, rng, 1.0, true);
  Graph g;
  g.backward(feature_distill_loss(s, t));
  EXPECT_TRUE(s.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(TotalLoss, ClosedForms) {
  std::mt19937_64 rng(3);
  const std::vector<int> labels{1, 4, 9};
  Tensor logits = random_tensor({3, 10}, rng);
  Tensor s = random_tensor({3, 4, 5}, rng), t = random_tensor({3, 4, 5}, rng);
  const double ce = cross_entropy(logits, labels).item();
  EXPECT_EQ(total_loss(logits, labels, s, t, 0.0).item(), ce);
  EXPECT_EQ(total_loss(logits, labels, s, Tensor{}, 2.5).item(), ce);
  EXPECT_NEAR(total_loss(logits, labels, t, t, kDefaultDistillWeight).item(), ce, 1e-14);
  EXPECT_NEAR(total_loss(logits, labels, s, t, 2.5).item(), ce + 2.5 * feature_distill_loss(s, t).item(), 1e-14);
  EXPECT_NEAR(total_loss(Tensor::zeros({3, 10}), labels, s, t, 0.0).item(), 2.302585, 1e-6);
  EXPECT_THROW(total_loss(logits, {1, 4, 10}, s, t, 0.0), IndexError);
}

TEST(AdamWStep, ZeroGradientAndNoDecayLeavesParameters) {
  ParamStore p;
  p.add("w", Tensor(Shape{3}, {1.0, -2.0, 0.5}, true));
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt(cfg);
  opt.step(p, {{"w", {0.0, 0.0, 0.0}}});
  EXPECT_EQ(p.at("w").values(), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamWStep, SingleScalarHandComputed) {
  ParamStore p;
  p.add("w", Tensor::scalar(1.0, true));
  OptimConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.05;
  AdamW opt(cfg);
  opt.step(p, {{"w", {0.5}}});
  // decay: 1 - 0.1*0.05 = 0.995; m_hat = 0.5, v_hat = 0.25; step = 0.1 * 0.5 / (0.5 + 1e-8)
  EXPECT_NEAR(p.at("w").item(), 0.995 - 0.05 / 0.50000001, 1e-12);
  opt.step(p, {{"w", {-0.25}}});
  // m = 0.9*0.05 - 0.025 = 0.02, v = 0.999*0.00025 + 0.001*0.0625; bias corrections 0.19 and 0.001999
  const double m_hat = 0.02 / 0.19;
  const double v_hat = (0.999 * 0.00025 + 0.001 * 0.0625) / (1 - 0.999 * 0.999);
  const double expected = (0.995 - 0.05 / 0.50000001) * 0.995 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
  EXPECT_NEAR(p.at("w").item(), expected, 1e-12);
}

TEST(AdamWStep, DecayFilter) {
  EXPECT_TRUE(decays("layers.3.p.attn.q.weight"));
  EXPECT_TRUE(decays("predictors.1.weight"));
  EXPECT_FALSE(decays("layers.3.p.attn.q.bias"));
  EXPECT_FALSE(decays("layers.3.e.norm1.gain"));
  EXPECT_FALSE(decays("norm.gain"));
  EXPECT_FALSE(decays("layers.2.alpha_attn"));
  EXPECT_FALSE(decays("layers.2.gamma_ffn"));

  ParamStore p;
  p.add("head.bias", Tensor::scalar(2.0, true));
  p.add("head.weight", Tensor::scalar(2.0, true));
  OptimConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.5;
  AdamW opt(cfg);
  opt.step(p, {{"head.bias", {0.0}}, {"head.weight", {0.0}}});
  EXPECT_EQ(p.at("head.bias").item(), 2.0);
  EXPECT_DOUBLE_EQ(p.at("head.weight").item(), 2.0 * 0.95);
}

TEST(AdamWStep, KeyMismatchesAreErrors) {
  ParamStore p;
  p.add("a", Tensor::scalar(1.0, true));
  AdamW opt(OptimConfig{});
  EXPECT_THROW(opt.step(p, {}), std::invalid_argument);
  EXPECT_THROW(opt.step(p, {{"a", {0.0}}, {"b", {0.0}}}), std::invalid_argument);
  EXPECT_THROW(opt.step(p, {{"a", {0.0, 1.0}}}), std::invalid_argument);
  OptimConfig bad;
  bad.learning_rate = 0.0;
  EXPECT_THROW(AdamW{bad}, ConfigError);
}

TEST(Gradients, CompleteAfterOneBackward) {
  Model m = build(tiny_config(true));
  Model teacher = build(tiny_config(false));
  for (const char* name : {"layers.2.alpha_attn", "layers.2.alpha_ffn", "layers.3.alpha_attn", "layers.3.alpha_ffn"})
    m.params.at(name).values()[0] = 0.5;
  const auto d = data::synthetic_shapes(6, tiny_data(6, 0), false);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  Tensor teacher_features = forward(teacher, d.images(idx)).features;
  Graph g;
  const auto out = forward(m, d.images(idx));
  g.backward(total_loss(out.logits, d.labels_of(idx), out.features, teacher_features, 2.5));
  for (const auto& [name, t] : m.params.items()) {
    double norm = 0.0;
    for (double v : t.grad()) norm += v * v;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Gradients, PredictorSilentWhileAlphaIsZero) {
  Model m = build(tiny_config(true));
  const auto d = data::synthetic_shapes(4, tiny_data(4, 0), false);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  Graph g;
  const auto out = forward(m, d.images(idx));
  g.backward(cross_entropy(out.logits, d.labels_of(idx)));
  const Tensor& w = m.params.at("predictors.1.weight");
  ASSERT_TRUE(w.has_grad());
  for (double v : w.grad()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(m.params.at("layers.2.alpha_attn").grad()[0] != 0.0);
}

TEST(Distillation, OneStepOnFeatureLossDescends) {
  for (std::uint64_t seed : {1, 2, 3}) {
    ModelConfig sc = tiny_config(true);
    sc.seed = seed;
    Model student = build(sc);
    ModelConfig tc = tiny_config(false);
    tc.seed = seed + 100;
    Model teacher = build(tc);
    const auto d = data::synthetic_shapes(8, tiny_data(8, 0), false);
    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), 0);
    Tensor target = forward(teacher, d.images(idx)).features;
    auto fd = [&] { return feature_distill_loss(forward(student, d.images(idx)).features, target); };
    const double before = fd().item();
    EXPECT_GT(before, 0.05);
    student.params.zero_grad();
    {
      Graph g;
      g.backward(fd());
    }
    OptimConfig cfg;
    cfg.learning_rate = 1e-3;
    AdamW opt(cfg);
    opt.step(student.params, collect_grads(student.params));
    EXPECT_LT(fd().item(), before) << "seed " << seed;
  }
}

TEST(TrainLoop, LogsFiniteRowsAndIsBitReproducible) {
  const auto [train_set, val_set] = data::make_dataset(tiny_data(40, 20));
  OptimConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 9;
  auto run = [&] {
    Model m = build(tiny_config(true));
    Model teacher = build(tiny_config(false));
    const auto r = train_loop(m, train_set, val_set, cfg, {true, 2.5, &teacher});
    return std::make_pair(serialize(m), r);
  };
  const auto [bytes_a, log_a] = run();
  const auto [bytes_b, log_b] = run();
  EXPECT_EQ(bytes_a, bytes_b);
  ASSERT_EQ(log_a.log.size(), 2u);
  for (const auto& row : log_a.log) {
    EXPECT_TRUE(std::isfinite(row.train_loss));
    EXPECT_TRUE(std::isfinite(row.distill_loss));
    EXPECT_GE(row.val_acc, 0.0);
    EXPECT_GT(row.score_entropy, 0.0);
  }
  EXPECT_TRUE(std::isfinite(log_a.initial_distill_loss));
  EXPECT_EQ(format_log_row(log_a.log[0]), format_log_row(log_b.log[0]));
}

TEST(TrainLoop, NoTeacherWritesNanDistillColumn) {
  const auto [train_set, val_set] = data::make_dataset(tiny_data(16, 8));
  Model m = build(tiny_config(false));
  OptimConfig cfg;
  cfg.epochs = 1;
  const auto r = train_loop(m, train_set, val_set, cfg, {});
  EXPECT_NE(format_log_row(r.log[0]).find(",nan,"), std::string::npos);
  EXPECT_EQ(std::string(kLogHeader), "epoch,train_loss,val_acc,distill_loss,score_entropy");
  EXPECT_THROW(train_loop(m, train_set, val_set, cfg, {true, 2.5, nullptr}), ConfigError);
}

TEST(Evaluate, MemorisesTinyTrainSplit) {
  const auto [train_set, val_set] = data::make_dataset(tiny_data(20, 10));
  Model m = build(tiny_config(false));
  OptimConfig cfg;
  cfg.epochs = 150;
  cfg.batch_size = 5;
  cfg.learning_rate = 3e-3;
  cfg.weight_decay = 0.0;
  train_loop(m, train_set, val_set, cfg, {});
  EXPECT_EQ(evaluate(m, train_set).accuracy, 1.0);
}

TEST(Evaluate, RandomWeightsSitInChanceBand) {
  data::DatasetSpec spec = tiny_data(0, 500);
  const auto val = data::synthetic_shapes(500, spec, true);
  const auto r = evaluate(build(tiny_config(true)), val);
  EXPECT_GE(r.accuracy, 0.02);
  EXPECT_LE(r.accuracy, 0.25);
  ASSERT_EQ(r.entropy.size(), 1u);
  EXPECT_EQ(evaluate(build(tiny_config(true)), val).accuracy, r.accuracy);
}
