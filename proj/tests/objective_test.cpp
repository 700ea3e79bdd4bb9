#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "pomp/gradcheck.hpp"
#include "pomp/objective.hpp"
#include "test_support.hpp"

namespace pomp {
namespace {

using testing::random_matrix;
using testing::random_unit;
using testing::random_vocabulary;

LogitBlock block(Vector sims, std::size_t pos, double tau, double margin) {
  LogitBlock b;
  b.sims = std::move(sims);
  b.positive_index = pos;
  b.tau = tau;
  b.margin = margin;
  return b;
}

TEST(AdaptiveMargin, Examples) {
  EXPECT_EQ(adaptive_margin(7, 7), 0.0);
  EXPECT_NEAR(adaptive_margin(2, 3), std::numbers::ln2, 1e-12);
  EXPECT_NEAR(adaptive_margin(1000, 21000), std::log(20999.0 / 999.0), 1e-12);
  EXPECT_NEAR(adaptive_margin(1000, 21000), 3.0455, 1e-4);
  EXPECT_THROW(adaptive_margin(1, 5), ContractError);
  EXPECT_THROW(adaptive_margin(6, 5), ContractError);
}

TEST(AdaptiveMargin, MonotoneInKAndN) {
  for (std::size_t k = 2; k < 50; ++k) EXPECT_GT(adaptive_margin(k, 50), adaptive_margin(k + 1, 50));
  for (std::size_t n = 5; n < 200; ++n) EXPECT_LT(adaptive_margin(5, n), adaptive_margin(5, n + 1));
}

TEST(FullSoftmaxProb, Examples) {
  const Vector eq = full_softmax_prob(block({0.3, 0.3}, 0, 0.07, 0.0));
  EXPECT_DOUBLE_EQ(eq[0], 0.5);
  const Vector p = full_softmax_prob(block({1.0, 0.0}, 0, 1.0, 0.0));
  EXPECT_NEAR(p[0], 0.7311, 1e-4);
  EXPECT_NEAR(p[1], 0.2689, 1e-4);
  const Vector sharp = full_softmax_prob(block({0.5, 0.4, 0.1}, 1, 0.01, 0.0));
  EXPECT_GE(sharp[0], 0.999);
  EXPECT_THROW(full_softmax_prob(block({1.0, 0.0}, 0, 1.0, 0.5)), ContractError);
}

TEST(CorrectedProb, Examples) {
  EXPECT_NEAR(corrected_prob(block({1.0, 1.0}, 0, 1.0, std::numbers::ln2)), 1.0 / 3.0, 1e-15);
  const LogitBlock b = block({0.2, -0.1, 0.5}, 1, 0.5, 0.0);
  EXPECT_NEAR(corrected_prob(b), full_softmax_prob(b)[1], 1e-15);
  double last = 1.0;
  for (double m = 0.0; m < 5.0; m += 0.25) {
    const double p = corrected_prob(block({0.2, 0.1, 0.3}, 0, 0.1, m));
    EXPECT_LT(p, last);
    last = p;
  }
}

TEST(StepLoss, Examples) {
  EXPECT_NEAR(step_loss(block({1.0, 1.0}, 0, 1.0, 0.0)), std::numbers::ln2, 1e-15);
  EXPECT_LT(step_loss(block({1.0, -1.0}, 0, 0.01, 0.0)), 1e-80);
  double last = 1e9;
  for (double s = -1.0; s <= 1.0; s += 0.1) {
    const double l = step_loss(block({s, 0.2, -0.3}, 0, 0.07, 1.0));
    EXPECT_LT(l, last);
    last = l;
  }
}

TEST(CorrectedProb, ShiftInvarianceAndBounds) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 2 + rng() % 10;
    Vector sims(k);
    for (double& s : sims) s = u(rng);
    const double tau = 0.05 + std::abs(u(rng));
    const double m = 3.0 * std::abs(u(rng));
    const LogitBlock b = block(sims, rng() % k, tau, m);
    Vector shifted = sims;
    const double c = u(rng) * 10.0;
    for (double& s : shifted) s += c;
    const double p = corrected_prob(b);
    EXPECT_NEAR(p, corrected_prob(block(shifted, b.positive_index, tau, m)), 1e-12);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
    EXPECT_GE(step_loss(b), 0.0);
  }
}

TEST(MarginBoundary, Examples) {
  EXPECT_TRUE(satisfies_margin_boundary(block({0.9, 0.1, 0.3}, 0, 0.07, 0.0)));
  EXPECT_FALSE(satisfies_margin_boundary(block({0.5, 0.5}, 0, 1.0, 0.1)));
  // s_y / tau = s_neg / tau + m exactly: 1.0 = 0.5 + 0.5.
  EXPECT_TRUE(satisfies_margin_boundary(block({1.0, 0.5}, 0, 1.0, 0.5)));
}

TEST(MarginBoundary, MarginKeepsNegativeOrdering) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 3 + rng() % 8;
    Vector sims(k);
    for (double& s : sims) s = u(rng);
    const LogitBlock plain = block(sims, 0, 0.07, 0.0);
    const LogitBlock shifted = block(sims, 0, 0.07, 2.5);
    const Vector a = plain.logits();
    const Vector b = shifted.logits();
    std::size_t best_a = 1, best_b = 1;
    for (std::size_t i = 2; i < k; ++i) {
      if (a[i] > a[best_a]) best_a = i;
      if (b[i] > b[best_b]) best_b = i;
    }
    EXPECT_EQ(best_a, best_b);
  }
}

TEST(FiniteDifference, Examples) {
  std::mt19937_64 rng(3);
  const SoftPrompt p{random_matrix(3, 4, rng)};
  const Matrix ones = finite_difference_gradient(
      [](const SoftPrompt& q) {
        double s = 0.0;
        for (double v : q.theta.span()) s += v;
        return s;
      },
      p, 1e-5);
  for (double v : ones.span()) EXPECT_NEAR(v, 1.0, 1e-9);
  const Matrix self = finite_difference_gradient(
      [](const SoftPrompt& q) { return 0.5 * squared_norm(q.theta.span()); }, p, 1e-5);
  for (std::size_t i = 0; i < p.theta.size(); ++i) EXPECT_NEAR(self.span()[i], p.theta.span()[i], 1e-8);
  const Matrix zero = finite_difference_gradient([](const SoftPrompt&) { return 3.0; }, p, 1e-5);
  for (double v : zero.span()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(finite_difference_gradient([](const SoftPrompt&) { return 0.0; }, p, 0.0),
               ContractError);
}

struct Fixture {
  ClassVocabulary vocab;
  FrozenTextEncoder enc;
  SoftPrompt prompt;
  Vector image;
  int label;
};

Fixture random_fixture(EncoderKind kind, std::size_t n, std::mt19937_64& rng) {
  ClassVocabulary vocab = random_vocabulary(n, 8, 1 + rng() % 3, rng);
  FrozenTextEncoder enc(kind, 8, 6, rng());
  SoftPrompt prompt{random_matrix(4, 8, rng, 0.5)};
  return {std::move(vocab), std::move(enc), std::move(prompt), random_unit(6, rng),
          static_cast<int>(rng() % n)};
}

Matrix numeric_gradient(const Fixture& fx, const StepClassSet& set, double tau) {
  return finite_difference_gradient(
      [&](const SoftPrompt& p) {
        return prompt_step_loss(fx.enc, p, fx.vocab, set, fx.image, fx.label, tau);
      },
      fx.prompt, 1e-5);
}

TEST(PromptGradient, MatchesFiniteDifferencesForKFive) {
  std::mt19937_64 rng(4);
  for (auto kind : {EncoderKind::MeanPoolLinear, EncoderKind::MeanPoolTwoLayerTanh}) {
    for (int trial = 0; trial < 10; ++trial) {
      const Fixture fx = random_fixture(kind, 5 + rng() % 6, rng);
      Rng srng(rng());
      const std::vector<int> labels = {fx.label};
      const auto set = build_step_class_set(labels, 5, ProposalDistribution::uniform(), fx.vocab, srng);
      const auto g = prompt_gradient(fx.enc, fx.prompt, fx.vocab, set, fx.image, fx.label, 0.07);
      EXPECT_LT(relative_error(g.grad.span(), numeric_gradient(fx, set, 0.07).span()), 1e-4);
      EXPECT_NEAR(g.loss_value,
                  prompt_step_loss(fx.enc, fx.prompt, fx.vocab, set, fx.image, fx.label, 0.07),
                  1e-15);
    }
  }
}

TEST(PromptGradient, SymmetricFixtureMatchesFiniteDifferences) {
  // Every class uses the same token, so all K features coincide.
  std::mt19937_64 rng(5);
  auto table = std::make_shared<Matrix>(random_matrix(1, 8, rng));
  std::vector<ClassEntry> entries;
  for (int c = 0; c < 4; ++c) entries.push_back({c, "same", {0}, 1});
  Fixture fx{ClassVocabulary(entries, table),
             FrozenTextEncoder(EncoderKind::MeanPoolTwoLayerTanh, 8, 6, 3),
             SoftPrompt{random_matrix(4, 8, rng, 0.5)}, random_unit(6, rng), 2};
  Rng srng(1);
  const std::vector<int> labels = {2};
  const auto set = build_step_class_set(labels, 3, ProposalDistribution::uniform(), fx.vocab, srng);
  const auto g = prompt_gradient(fx.enc, fx.prompt, fx.vocab, set, fx.image, fx.label, 0.07);
  const Matrix num = numeric_gradient(fx, set, 0.07);
  for (std::size_t i = 0; i < num.size(); ++i) EXPECT_NEAR(g.grad.span()[i], num.span()[i], 1e-9);
  // With coinciding features the positive weight -(1 - P_y) equals minus the
  // negative mass, so the residual is zero.
  for (double v : g.grad.span()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(PromptGradient, DegeneratesToFullSoftmaxAtKEqualsN) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto kind = trial % 2 ? EncoderKind::MeanPoolLinear : EncoderKind::MeanPoolTwoLayerTanh;
    const Fixture fx = random_fixture(kind, 2 + rng() % 11, rng);
    const std::size_t n = fx.vocab.size();
    Rng srng(rng());
    const std::vector<int> labels = {fx.label};
    const auto set = build_step_class_set(labels, n, ProposalDistribution::uniform(), fx.vocab, srng);
    ASSERT_EQ(set.margin, 0.0);

    const LogitBlock b = make_logit_block(fx.enc, fx.prompt, fx.vocab, set, fx.image, fx.label, 0.07);
    const Vector corrected = corrected_probs(b);
    const Vector plain = full_softmax_prob(b);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(corrected[i], plain[i], 1e-12);

    const auto pomp_grad = prompt_gradient(fx.enc, fx.prompt, fx.vocab, set, fx.image, fx.label, 0.07);
    const auto full_grad = full_softmax_gradient(fx.enc, fx.prompt, fx.vocab, fx.image, fx.label, 0.07);
    for (std::size_t i = 0; i < pomp_grad.grad.size(); ++i) {
      EXPECT_NEAR(pomp_grad.grad.span()[i], full_grad.grad.span()[i], 1e-10);
    }
    EXPECT_NEAR(pomp_grad.loss_value, full_grad.loss_value, 1e-12);
  }
}

TEST(PromptGradient, LabelOutsideSetThrows) {
  std::mt19937_64 rng(7);
  const Fixture fx = random_fixture(EncoderKind::MeanPoolLinear, 6, rng);
  StepClassSet set;
  set.class_ids = {0, 1};
  set.positive_positions = {{0, 0}};
  const int label = fx.label == 0 ? 1 : fx.label;
  EXPECT_THROW(prompt_gradient(fx.enc, fx.prompt, fx.vocab, set, fx.image, label, 0.07), ContractError);
}

TEST(GradCheck, DefaultMatrixPasses) {
  const GradCheckReport report = run_grad_check(GradCheckOptions{});
  EXPECT_EQ(report.cases.size(), 2u * 3u * 20u);
  EXPECT_TRUE(report.passed());
  EXPECT_LT(report.max_relative_error, 1e-4);
}

TEST(GradCheck, CoarseStepStillBelowOnePercent) {
  GradCheckOptions options;
  options.h = 1e-3;
  const GradCheckReport report = run_grad_check(options);
  EXPECT_LT(report.max_relative_error, 1e-2);
}

TEST(GradCheck, FlippedPositiveSignIsDetected) {
  GradCheckOptions options;
  options.hooks.flip_positive_sign = true;
  const GradCheckReport report = run_grad_check(options);
  EXPECT_FALSE(report.passed());
  for (const auto& c : report.cases) EXPECT_FALSE(c.passed);
}

}  // namespace
}  // namespace pomp
