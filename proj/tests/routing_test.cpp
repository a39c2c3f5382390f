// SPDX-License-Identifier: Apache-2.0
#include <blvit/routing.hpp>

#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace blvit;
using namespace blvit::routing;
using test::probe_loss;
using test::random_tensor;

namespace {

RoutingParams make_routing(double alpha, double gamma, double prune_ratio,
                           std::optional<std::size_t> window = std::nullopt) {
  return {Tensor::scalar(alpha, true), Tensor::scalar(alpha, true), Tensor::scalar(gamma, true),
          Tensor::scalar(gamma, true), prune_ratio, window};
}

std::vector<std::uint8_t> mask_of(std::vector<double> scores, double prune_ratio,
                                  std::optional<std::size_t> window = std::nullopt) {
  const std::size_t n = scores.size();
  return select_topk(scores, 1, n, prune_ratio, window).mask;
}

Tensor random_scores(std::size_t batch, std::size_t tokens, std::mt19937_64& rng) {
  return softmax(random_tensor({batch, tokens}, rng, 2.0), 1);
}

}  // namespace

TEST(KeepCount, RoundsHalfUpWithFloorOfOne) {
  EXPECT_EQ(keep_count(16, 0.75), 4u);
  EXPECT_EQ(keep_count(197, 0.75), 49u);  // 49.25
  EXPECT_EQ(keep_count(10, 0.75), 3u);    // 2.5 rounds up
  EXPECT_EQ(keep_count(4, 0.99), 1u);
  EXPECT_EQ(keep_count(8, 0.0), 8u);
  EXPECT_THROW(keep_count(8, 1.0), std::invalid_argument);
  EXPECT_THROW(keep_count(8, -0.1), std::invalid_argument);
}

TEST(PredictScores, IdenticalTokensAreUniform) {
  std::mt19937_64 rng(1);
  Tensor row = random_tensor({1, 1, 6}, rng);
  Tensor x = gather_rows(row, {{0, 0, 0, 0, 0}});
  Tensor s = predict_scores(x, random_tensor({6, 1}, rng));
  for (double v : s.values()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(PredictScores, ClosedFormSoftmax) {
  // one-hot token features against a unit predictor give logits [2,0,0,0]
  Tensor x(Shape{1, 4, 1}, {2, 0, 0, 0});
  Tensor s = predict_scores(x, Tensor(Shape{1, 1}, {1.0}));
  const double z = std::exp(2.0) + 3.0;
  EXPECT_NEAR(s.values()[0], std::exp(2.0) / z, 1e-15);
  EXPECT_NEAR(s.values()[0], 0.711, 5e-4);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(s.values()[i], 0.0963, 5e-5);
}

TEST(PredictScores, RowsSumToOneAndArePositive) {
  std::mt19937_64 rng(2);
  Tensor s = predict_scores(random_tensor({3, 9, 5}, rng, 3.0), random_tensor({5, 1}, rng));
  for (std::size_t b = 0; b < 3; ++b) {
    double total = 0.0;
    for (std::size_t t = 0; t < 9; ++t) {
      EXPECT_GT(s.values()[b * 9 + t], 0.0);
      total += s.values()[b * 9 + t];
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(SelectTopk, WorkedExamples) {
  EXPECT_EQ(mask_of({0.4, 0.1, 0.3, 0.2}, 0.75), (std::vector<std::uint8_t>{1, 0, 0, 0}));
  EXPECT_EQ(mask_of({0.25, 0.25, 0.25, 0.25}, 0.5), (std::vector<std::uint8_t>{1, 1, 0, 0}));
  const auto m = select_topk(std::vector<double>{0.1, 0.5, 0.2, 0.9}, 1, 4, 0.5);
  EXPECT_EQ(m.idx[0], (std::vector<std::size_t>{1, 3}));
}

TEST(SelectTopk, WindowKeepsOnePerWindowRegardlessOfGlobalOrder) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor s = random_scores(1, 8, rng);
    // force the global top two into the first window
    s.values()[0] += 10.0;
    s.values()[1] += 5.0;
    const auto m = select_topk(s, 0.75, 4);
    ASSERT_EQ(m.k, 2u);
    EXPECT_EQ(m.mask[0], 1);
    std::size_t second = 0;
    for (std::size_t t = 4; t < 8; ++t) second += m.mask[t];
    EXPECT_EQ(second, 1u);
    // brute force: the kept token in window two is its argmax
    std::size_t best = 4;
    for (std::size_t t = 5; t < 8; ++t)
      if (s.values()[t] > s.values()[best]) best = t;
    EXPECT_EQ(m.mask[best], 1);
  }
}

TEST(SelectTopk, Errors) {
  const std::vector<double> s(8, 0.125);
  EXPECT_THROW(select_topk(s, 1, 8, 1.0), std::invalid_argument);
  EXPECT_THROW(select_topk(s, 1, 8, 0.5, 3), std::invalid_argument);
  EXPECT_THROW(select_topk(s, 2, 8, 0.5), ShapeError);
}

TEST(SelectTopk, ExactlyKAndIndexConsistency) {
  std::mt19937_64 rng(4);
  for (double p : {0.0, 0.3, 0.5, 0.625, 0.75, 0.875, 0.95}) {
    for (std::optional<std::size_t> window : {std::optional<std::size_t>{}, std::optional<std::size_t>{4}}) {
      Tensor s = random_scores(5, 16, rng);
      const auto m = select_topk(s, p, window);
      const std::size_t span = window.value_or(16);
      for (std::size_t b = 0; b < 5; ++b) {
        for (std::size_t w = 0; w < 16 / span; ++w) {
          std::size_t count = 0;
          for (std::size_t t = 0; t < span; ++t) count += m.mask[b * 16 + w * span + t];
          EXPECT_EQ(count, keep_count(span, p));
        }
        ASSERT_EQ(m.idx[b].size(), m.k);
        EXPECT_TRUE(std::is_sorted(m.idx[b].begin(), m.idx[b].end()));
        for (std::size_t t : m.idx[b]) EXPECT_TRUE(m.selected(b, t));
      }
    }
  }
}

TEST(SelectTopk, InvariantUnderIncreasingTransforms) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor s = random_scores(3, 12, rng);
    std::vector<double> warped(s.values());
    for (double& v : warped) v = std::exp(5.0 * v) + std::pow(v, 3.0) - 7.0;
    EXPECT_EQ(select_topk(s, 0.75).mask, select_topk(warped, 3, 12, 0.75).mask);
    EXPECT_EQ(select_topk(s, 0.5, 6).mask, select_topk(warped, 3, 12, 0.5, 6).mask);
  }
}

TEST(ScaleByScore, AlphaZeroIsIdentityAndFormulaHolds) {
  std::mt19937_64 rng(6);
  Tensor y = random_tensor({2, 3, 4}, rng);
  Tensor s = random_tensor({2, 3}, rng);
  EXPECT_EQ(scale_by_score(y, s, Tensor::scalar(0.0)).values(), y.values());
  Tensor half = Tensor::full({2, 3}, 0.5);
  Tensor out = scale_by_score(y, half, Tensor::scalar(1.0));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(out.values()[i], 1.5 * y.values()[i]);
}

TEST(FuseTokens, LimitsAndRowOracle) {
  std::mt19937_64 rng(7);
  Tensor secondary = random_tensor({2, 6, 3}, rng);
  Tensor scores = random_scores(2, 6, rng);
  const auto m = select_topk(scores, 0.5);
  Tensor primary = random_tensor({2, 3, 3}, rng);

  Tensor zero = fuse_tokens(primary, secondary, m, Tensor::scalar(0.0));
  const double gamma = 0.37;
  Tensor fused = fuse_tokens(primary, secondary, m, Tensor::scalar(gamma));
  for (std::size_t b = 0; b < 2; ++b) {
    std::size_t j = 0;
    for (std::size_t t = 0; t < 6; ++t) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double sec = secondary.values()[(b * 6 + t) * 3 + c];
        const std::size_t at = (b * 6 + t) * 3 + c;
        if (m.selected(b, t)) {
          const double pri = primary.values()[(b * 3 + j) * 3 + c];
          EXPECT_EQ(zero.values()[at], pri);
          EXPECT_NEAR(fused.values()[at], pri + gamma * sec, 1e-15);
        } else {
          EXPECT_EQ(zero.values()[at], sec);
          EXPECT_EQ(fused.values()[at], sec);
        }
      }
      if (m.selected(b, t)) ++j;
    }
  }

  const auto all = select_topk(scores, 0.0);
  Tensor full_primary = random_tensor({2, 6, 3}, rng);
  Tensor sum_out = fuse_tokens(full_primary, secondary, all, Tensor::scalar(1.0));
  Tensor expected = add(full_primary, secondary);
  EXPECT_LT(test::max_abs_diff(sum_out.data(), expected.data()), 1e-15);

  EXPECT_THROW(fuse_tokens(random_tensor({2, 2, 3}, rng), secondary, m, Tensor::scalar(1.0)), ShapeError);
}

TEST(BigLittle, DegeneratesToVanillaBlock) {
  std::mt19937_64 rng(8);
  auto perf = test::random_block(16, 16, 4, false, rng);
  auto eff = test::random_block(16, 4, 1, true, rng);
  for (Tensor* t : test::block_tensors(eff)) test::zero_values(*t);
  Tensor x = random_tensor({2, 8, 16}, rng);
  Tensor scores = random_scores(2, 8, rng);
  auto r = make_routing(0.0, 0.0, 0.0);
  Tensor out = forward_big_little(x, scores, r, perf, eff);
  Tensor expected = nn::vanilla_block(x, perf);
  EXPECT_LT(test::max_abs_diff(out.data(), expected.data()), 1e-12);
}

TEST(BigLittle, ConservesTokenCount) {
  std::mt19937_64 rng(9);
  auto perf = test::random_block(8, 8, 2, false, rng);
  auto eff = test::random_block(8, 4, 1, true, rng);
  for (double p : {0.0, 0.5, 0.75, 0.9}) {
    Tensor x = random_tensor({3, 8, 8}, rng);
    auto r = make_routing(0.3, 1e-5, p);
    EXPECT_EQ(forward_big_little(x, random_scores(3, 8, rng), r, perf, eff).shape(), x.shape());
    EXPECT_EQ(forward_pruned_only(x, random_scores(3, 8, rng), r, perf).shape(), x.shape());
  }
}

TEST(BigLittle, EveryParameterGroupGetsGradient) {
  std::mt19937_64 rng(10);
  auto perf = test::random_block(8, 8, 2, false, rng);
  auto eff = test::random_block(8, 4, 1, true, rng);
  auto r = make_routing(0.5, 0.2, 0.5);
  Tensor x = random_tensor({2, 8, 8}, rng);
  Tensor w = random_tensor({8, 1}, rng, 1.0, true);
  Graph graph;
  Tensor loss = probe_loss(forward_big_little(x, predict_scores(x, w), r, perf, eff));
  graph.backward(loss);
  auto norm = [](const Tensor& t) {
    double acc = 0.0;
    for (double g : t.grad()) acc += g * g;
    return std::sqrt(acc);
  };
  EXPECT_GT(norm(w), 0.0);
  for (const Tensor* t : {&r.alpha_attn, &r.alpha_ffn, &r.gamma_attn, &r.gamma_ffn}) EXPECT_GT(norm(*t), 0.0);
  for (auto* block : {&perf, &eff})
    for (Tensor* t : test::block_tensors(*block)) EXPECT_GT(norm(*t), 0.0);
}

TEST(BigLittle, PredictorGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto perf = test::random_block(8, 8, 2, false, rng);
  auto eff = test::random_block(8, 4, 1, true, rng);
  auto r = make_routing(0.8, 0.1, 0.75);
  Tensor x = random_tensor({2, 8, 8}, rng);
  Tensor w = random_tensor({8, 1}, rng, 1.0, true);
  // two stacked modules sharing one prediction
  auto loss = [&] {
    Tensor s = predict_scores(x, w);
    return probe_loss(forward_big_little(forward_big_little(x, s, r, perf, eff), s, r, perf, eff));
  };
  const auto analytic = test::analytic_grad(loss, w);
  const auto numeric = test::numeric_grad([&] { return loss().item(); }, w);
  EXPECT_LT(test::relative_error(analytic, numeric), 1e-5);
  EXPECT_GT(std::abs(analytic[0]) + std::abs(analytic[3]), 0.0);
}

TEST(BigLittle, PredictorGradientIsZeroWithoutScoreScaling) {
  std::mt19937_64 rng(12);
  auto perf = test::random_block(8, 8, 2, false, rng);
  auto eff = test::random_block(8, 4, 1, true, rng);
  auto r = make_routing(0.0, 0.0, 0.75);
  Tensor x = random_tensor({2, 8, 8}, rng);
  Tensor w = random_tensor({8, 1}, rng, 1.0, true);
  const auto g = test::analytic_grad([&] { return probe_loss(forward_big_little(x, predict_scores(x, w), r, perf, eff)); }, w);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(BigLittle, UnselectedTokensInfluenceSelectedRows) {
  std::mt19937_64 rng(13);
  auto perf = test::random_block(8, 8, 2, false, rng);
  auto eff = test::random_block(8, 4, 1, true, rng);
  auto r = make_routing(0.0, 0.0, 0.75);
  Tensor x = random_tensor({1, 8, 8}, rng);
  Tensor scores = random_scores(1, 8, rng);
  const auto m = select_topk(scores, 0.75);
  std::size_t victim = 0;
  while (m.selected(0, victim)) ++victim;
  Tensor zeroed = x.clone();
  std::fill_n(zeroed.values().begin() + victim * 8, 8, 0.0);
  Tensor a = forward_big_little(x, scores, r, perf, eff);
  Tensor b = forward_big_little(zeroed, scores, r, perf, eff);
  const std::size_t kept = m.idx[0][0];
  double change = 0.0;
  for (std::size_t c = 0; c < 8; ++c) change += std::abs(a.values()[kept * 8 + c] - b.values()[kept * 8 + c]);
  EXPECT_GT(change, 1e-6);
}

TEST(BigLittle, Deterministic) {
  auto run = [] {
    std::mt19937_64 rng(14);
    auto perf = test::random_block(8, 8, 2, false, rng);
    auto eff = test::random_block(8, 4, 1, true, rng);
    Tensor x = random_tensor({2, 8, 8}, rng);
    return forward_big_little(x, random_scores(2, 8, rng), make_routing(0.4, 0.1, 0.75), perf, eff).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(BigLittle, TraceRecordsMaskAndStageNorms) {
  std::mt19937_64 rng(15);
  auto perf = test::random_block(8, 8, 2, false, rng);
  auto eff = test::random_block(8, 4, 1, true, rng);
  Tensor x = random_tensor({2, 8, 8}, rng);
  ModuleTrace trace;
  forward_big_little(x, random_scores(2, 8, rng), make_routing(0.0, 1e-5, 0.75), perf, eff, &trace);
  EXPECT_EQ(trace.mask.k, 2u);
  EXPECT_GT(trace.attention_stage_norm, 0.0);
  EXPECT_GT(trace.ffn_stage_norm, 0.0);
}

TEST(PrunedOnly, UnselectedRowsPassThroughExactly) {
  std::mt19937_64 rng(16);
  auto perf = test::random_block(8, 8, 2, false, rng);
  Tensor x = random_tensor({2, 8, 8}, rng);
  Tensor scores = random_scores(2, 8, rng);
  Tensor out = forward_pruned_only(x, scores, make_routing(0.5, 0.3, 0.75), perf);
  const auto m = select_topk(scores, 0.75);
  std::size_t changed = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 8; ++t)
      for (std::size_t c = 0; c < 8; ++c) {
        const std::size_t at = (b * 8 + t) * 8 + c;
        if (!m.selected(b, t))
          EXPECT_EQ(out.values()[at], x.values()[at]);
        else
          changed += out.values()[at] != x.values()[at];
      }
  EXPECT_GT(changed, 0u);
}

TEST(PrunedOnly, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  auto perf = test::random_block(8, 8, 2, false, rng);
  auto r = make_routing(0.6, 0.2, 0.5);
  Tensor x = random_tensor({2, 6, 8}, rng, 1.0, true);
  Tensor w = random_tensor({8, 1}, rng, 1.0, true);
  auto loss = [&] { return probe_loss(forward_pruned_only(x, predict_scores(x, w), r, perf)); };
  for (Tensor* t : {&x, &w, &r.alpha_attn, &r.alpha_ffn, &r.gamma_attn, &r.gamma_ffn})
    EXPECT_LT(test::gradcheck(loss, *t), 1e-6);
}

TEST(ScoreEntropy, UniformIsLogN) {
  Tensor s = Tensor::full({3, 8}, 0.125);
  EXPECT_NEAR(score_entropy(s), std::log(8.0), 1e-12);
}
