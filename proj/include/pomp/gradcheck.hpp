#pragma once

// Finite-difference audit of the analytic prompt gradient over random
// fixtures, both encoder kinds and several subset sizes.

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "pomp/encoder.hpp"
#include "pomp/objective.hpp"
#include "pomp/sampling.hpp"

namespace pomp {

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t fixtures = 20;
  double tolerance = 1e-4;
  double tau = 0.07;
  std::uint64_t seed = 0;
  GradientHooks hooks;
  // 0 stands for "all N classes of the fixture".
  std::vector<std::size_t> subset_sizes = {2, 5, 0};
};

struct GradCheckCase {
  EncoderKind kind = EncoderKind::MeanPoolLinear;
  std::size_t K = 0;
  std::size_t N = 0;
  std::size_t fixture = 0;
  double relative_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double max_relative_error = 0.0;

  bool passed() const {
    for (const auto& c : cases) {
      if (!c.passed) return false;
    }
    return !cases.empty();
  }
};

/// Small random problem: prompt 4x8, features of dimension 6, N in [6, 10],
/// one to three tokens per class.
struct GradFixture {
  FrozenTextEncoder encoder;
  ClassVocabulary vocab;
  SoftPrompt prompt;
  Vector image;
  int label = 0;
};

inline GradFixture make_grad_fixture(EncoderKind kind, std::uint64_t seed) {
  constexpr std::size_t kPromptLen = 4, kEmbed = 8, kFeature = 6;
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t n = 6 + static_cast<std::size_t>(rng() % 5);
  const std::size_t vocab_size = 3 * n;

  auto table = std::make_shared<Matrix>(vocab_size, kEmbed);
  for (double& v : table->span()) v = gauss(rng);
  // Mean pooling only sees the token multiset, so classes draw distinct
  // multisets to keep their features apart.
  std::vector<ClassEntry> entries;
  std::set<std::vector<std::uint32_t>> seen;
  while (entries.size() < n) {
    ClassEntry entry;
    entry.class_id = static_cast<int>(entries.size());
    entry.name = "c" + std::to_string(entry.class_id);
    const std::size_t tokens = 1 + static_cast<std::size_t>(rng() % 3);
    for (std::size_t t = 0; t < tokens; ++t) {
      entry.token_ids.push_back(static_cast<std::uint32_t>(rng() % vocab_size));
    }
    auto key = entry.token_ids;
    std::sort(key.begin(), key.end());
    if (!seen.insert(std::move(key)).second) continue;
    entries.push_back(std::move(entry));
  }

  SoftPrompt prompt{Matrix(kPromptLen, kEmbed)};
  for (double& v : prompt.theta.span()) v = 0.5 * gauss(rng);
  Vector raw(kFeature);
  for (double& v : raw) v = gauss(rng);
  const int label = static_cast<int>(rng() % n);

  return GradFixture{FrozenTextEncoder(kind, kEmbed, kFeature, rng()),
                     ClassVocabulary(std::move(entries), std::move(table)), std::move(prompt),
                     l2_normalize(raw), label};
}

inline GradCheckCase check_gradient(const GradFixture& fx, std::size_t subset, std::uint64_t seed,
                                    const GradCheckOptions& options) {
  Rng rng(seed);
  const std::size_t n = fx.vocab.size();
  const std::size_t k = subset == 0 ? n : std::min(subset, n);
  const int label = fx.label;
  const StepClassSet set = build_step_class_set(std::span(&label, 1), k,
                                                ProposalDistribution::uniform(), fx.vocab, rng);
  const PromptGradient analytic = prompt_gradient(fx.encoder, fx.prompt, fx.vocab, set, fx.image,
                                                  label, options.tau, options.hooks);
  const Matrix numeric = finite_difference_gradient(
      [&](const SoftPrompt& p) {
        return prompt_step_loss(fx.encoder, p, fx.vocab, set, fx.image, label, options.tau);
      },
      fx.prompt, options.h);

  GradCheckCase out;
  out.kind = fx.encoder.kind();
  out.K = k;
  out.N = n;
  out.relative_error = relative_error(analytic.grad.span(), numeric.span());
  out.passed = out.relative_error < options.tolerance;
  return out;
}

inline GradCheckReport run_grad_check(const GradCheckOptions& options) {
  GradCheckReport report;
  std::uint64_t stream = options.seed * 1000003ULL;
  for (auto kind : {EncoderKind::MeanPoolLinear, EncoderKind::MeanPoolTwoLayerTanh}) {
    for (std::size_t subset : options.subset_sizes) {
      for (std::size_t f = 0; f < options.fixtures; ++f) {
        const GradFixture fx = make_grad_fixture(kind, ++stream);
        GradCheckCase c = check_gradient(fx, subset, ++stream, options);
        c.fixture = f;
        report.max_relative_error = std::max(report.max_relative_error, c.relative_error);
        report.cases.push_back(c);
      }
    }
  }
  return report;
}

}  // namespace pomp
