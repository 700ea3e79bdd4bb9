#pragma once

// Loss surface of sampled-softmax prompt training with an additive margin on
// the sampled negatives, its analytic prompt gradient and a central
// finite-difference oracle.

#include <cmath>
#include <functional>
#include <span>
#include <string>

#include "pomp/encoder.hpp"
#include "pomp/error.hpp"
#include "pomp/margin.hpp"
#include "pomp/numerics.hpp"
#include "pomp/sampling.hpp"

namespace pomp {

/// Similarities x.w_i of one image against the K contrasted classes.
struct LogitBlock {
  Vector sims;
  std::size_t positive_index = 0;
  double tau = 0.07;
  double margin = 0.0;

  void validate() const {
    if (sims.empty()) throw ContractError("LogitBlock: no similarities");
    if (positive_index >= sims.size()) throw ContractError("LogitBlock: positive index out of range");
    if (!(tau > 0.0)) throw ContractError("LogitBlock: tau must be > 0");
    if (!(margin >= 0.0) || !std::isfinite(margin)) {
      throw ContractError("LogitBlock: margin must be finite and >= 0");
    }
    if (!all_finite(sims)) throw ContractError("LogitBlock: non-finite similarity");
  }

  /// s_i / tau, plus the margin on every i != positive.
  Vector logits() const {
    validate();
    Vector out(sims.size());
    for (std::size_t i = 0; i < sims.size(); ++i) {
      out[i] = sims[i] / tau + (i == positive_index ? 0.0 : margin);
    }
    return out;
  }
};

/// Plain softmax over every class; only defined without a margin.
inline Vector full_softmax_prob(const LogitBlock& block) {
  block.validate();
  if (block.margin != 0.0) throw ContractError("full_softmax_prob: margin must be zero");
  Vector scaled(block.sims.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = block.sims[i] / block.tau;
  return stable_softmax(scaled);
}

/// Margin-corrected probabilities of all K classes.
inline Vector corrected_probs(const LogitBlock& block) { return stable_softmax(block.logits()); }

inline double corrected_prob(const LogitBlock& block) {
  const Vector l = block.logits();
  return std::exp(l[block.positive_index] - log_sum_exp(l));
}

/// -log of the corrected probability, evaluated as lse(logits) - logit_y.
inline double step_loss(const LogitBlock& block) {
  const Vector l = block.logits();
  return std::max(0.0, log_sum_exp(l) - l[block.positive_index]);
}

/// Inclusive check of s_y/tau >= s_i/tau + m for every negative.
inline bool satisfies_margin_boundary(const LogitBlock& block) {
  block.validate();
  const double positive = block.sims[block.positive_index] / block.tau;
  for (std::size_t i = 0; i < block.sims.size(); ++i) {
    if (i == block.positive_index) continue;
    if (positive < block.sims[i] / block.tau + block.margin) return false;
  }
  return true;
}

struct PromptGradient {
  Matrix grad;
  double loss_value = 0.0;
};

/// Mutation switches used by the gradient-check harness to prove it can
/// detect a broken gradient.
struct GradientHooks {
  bool flip_positive_sign = false;
};

namespace detail {

/// Prompt-row slice of d(x . w_class)/d(sequence).
inline Matrix similarity_prompt_gradient(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                                         const ClassVocabulary& vocab, int class_id,
                                         std::span<const double> image) {
  const Matrix seq = build_class_sequence(prompt, vocab, class_id);
  Matrix full;
  try {
    full = sequence_vjp(enc, seq, image);
  } catch (const DegenerateInputError& err) {
    throw DegenerateFeatureError(class_id, err.what());
  }
  Matrix out(prompt.length(), prompt.embedding_dim());
  std::copy_n(full.span().begin(), out.size(), out.span().begin());
  return out;
}

inline void check_image(std::span<const double> image, std::size_t dim) {
  if (image.size() != dim) throw ContractError("image feature dimension mismatch");
  if (std::abs(norm(image) - 1.0) > 1e-6) throw ContractError("image feature is not unit-norm");
}

}  // namespace detail

inline LogitBlock make_logit_block(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                                   const ClassVocabulary& vocab, const StepClassSet& set,
                                   std::span<const double> image, int label, double tau) {
  detail::check_image(image, enc.output_dim());
  const Matrix features = encode_class_features(enc, prompt, vocab, set.class_ids);
  LogitBlock block;
  block.sims = Vector(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) block.sims[i] = dot(image, features.row(i));
  block.positive_index = set.position_of(label);
  block.tau = tau;
  block.margin = set.margin;
  return block;
}

/// Loss of one image as a function of the prompt; the finite-difference target.
inline double prompt_step_loss(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                               const ClassVocabulary& vocab, const StepClassSet& set,
                               std::span<const double> image, int label, double tau) {
  return step_loss(make_logit_block(enc, prompt, vocab, set, image, label, tau));
}

/// (1/tau) [ -(1 - P_y) grad s_y + sum_{i != y} P_i grad s_i ] with the
/// margin-corrected probabilities P.
inline PromptGradient prompt_gradient(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                                      const ClassVocabulary& vocab, const StepClassSet& set,
                                      std::span<const double> image, int label, double tau,
                                      GradientHooks hooks = {}) {
  const LogitBlock block = make_logit_block(enc, prompt, vocab, set, image, label, tau);
  const Vector probs = corrected_probs(block);
  PromptGradient out{Matrix(prompt.length(), prompt.embedding_dim()), step_loss(block)};
  for (std::size_t i = 0; i < set.size(); ++i) {
    double weight = 0.0;
    if (i == block.positive_index) {
      weight = -(1.0 - probs[i]);
      if (hooks.flip_positive_sign) weight = -weight;
    } else {
      weight = probs[i];
    }
    const Matrix g = detail::similarity_prompt_gradient(enc, prompt, vocab, set.class_ids[i], image);
    axpy(weight / tau, g.span(), out.grad.span());
  }
  return out;
}

/// Uncorrected full-softmax gradient over every class of the vocabulary:
/// (1/tau) [ -grad s_y + sum_i P_i grad s_i ]. Control path for the K = N case.
inline PromptGradient full_softmax_gradient(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                                            const ClassVocabulary& vocab,
                                            std::span<const double> image, int label, double tau) {
  detail::check_image(image, enc.output_dim());
  const std::size_t n = vocab.size();
  if (label < 0 || static_cast<std::size_t>(label) >= n) {
    throw ContractError("full_softmax_gradient: label out of range");
  }
  const Matrix features = encode_all_classes(enc, prompt, vocab);
  LogitBlock block;
  block.sims = Vector(n);
  for (std::size_t i = 0; i < n; ++i) block.sims[i] = dot(image, features.row(i));
  block.positive_index = static_cast<std::size_t>(label);
  block.tau = tau;
  const Vector probs = full_softmax_prob(block);

  PromptGradient out{Matrix(prompt.length(), prompt.embedding_dim()),
                     -std::log(probs[static_cast<std::size_t>(label)])};
  const Matrix positive = detail::similarity_prompt_gradient(enc, prompt, vocab, label, image);
  axpy(-1.0 / tau, positive.span(), out.grad.span());
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix g = detail::similarity_prompt_gradient(enc, prompt, vocab, static_cast<int>(i), image);
    axpy(probs[i] / tau, g.span(), out.grad.span());
  }
  return out;
}

/// Central differences (f(T + hE_ij) - f(T - hE_ij)) / 2h for every entry.
inline Matrix finite_difference_gradient(const std::function<double(const SoftPrompt&)>& loss,
                                         const SoftPrompt& prompt, double h) {
  if (!(h > 0.0)) throw ContractError("finite_difference_gradient: h must be > 0");
  SoftPrompt probe = prompt;
  Matrix grad(prompt.length(), prompt.embedding_dim());
  for (std::size_t r = 0; r < prompt.length(); ++r) {
    for (std::size_t c = 0; c < prompt.embedding_dim(); ++c) {
      const double saved = probe.theta(r, c);
      probe.theta(r, c) = saved + h;
      const double up = loss(probe);
      probe.theta(r, c) = saved - h;
      const double down = loss(probe);
      probe.theta(r, c) = saved;
      grad(r, c) = (up - down) / (2.0 * h);
    }
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||); zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  const double scale = std::max(norm(a), norm(b));
  if (scale == 0.0) return 0.0;
  return std::sqrt(squared_distance(a, b)) / scale;
}

}  // namespace pomp
