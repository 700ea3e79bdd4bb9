#pragma once

// Local contrast: proposal distributions over negative classes and the
// per-step class subset (ground truths plus sampled negatives).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pomp/encoder.hpp"
#include "pomp/error.hpp"
#include "pomp/margin.hpp"
#include "pomp/numerics.hpp"

namespace pomp {

using Rng = std::mt19937_64;

enum class ProposalKind { Uniform, Frequency, Similarity };

inline const char* to_string(ProposalKind kind) {
  switch (kind) {
    case ProposalKind::Uniform: return "uniform";
    case ProposalKind::Frequency: return "frequency";
    case ProposalKind::Similarity: return "similarity";
  }
  return "?";
}

class ProposalDistribution {
 public:
  static ProposalDistribution uniform() { return ProposalDistribution(ProposalKind::Uniform); }
  static ProposalDistribution frequency() { return ProposalDistribution(ProposalKind::Frequency); }

  /// `class_features` rows must be unit-norm; they are never refreshed.
  static ProposalDistribution similarity(Matrix class_features, double temperature) {
    if (!(temperature > 0.0)) throw ContractError("similarity proposal: temperature must be > 0");
    for (std::size_t r = 0; r < class_features.rows(); ++r) {
      if (std::abs(norm(class_features.row(r)) - 1.0) > 1e-6) {
        throw ContractError("similarity proposal: row " + std::to_string(r) + " is not unit-norm");
      }
    }
    ProposalDistribution dist(ProposalKind::Similarity);
    dist.features_ = std::move(class_features);
    dist.temperature_ = temperature;
    return dist;
  }

  ProposalKind kind() const noexcept { return kind_; }
  const Matrix& features() const noexcept { return features_; }
  double temperature() const noexcept { return temperature_; }

 private:
  explicit ProposalDistribution(ProposalKind kind) : kind_(kind) {}

  ProposalKind kind_;
  Matrix features_;
  double temperature_ = 0.0;
};

namespace detail {

inline std::vector<bool> exclusion_mask(std::size_t n, std::span<const int> excluded) {
  std::vector<bool> mask(n, false);
  for (int idx : excluded) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= n) {
      throw ContractError("excluded index " + std::to_string(idx) + " out of range");
    }
    mask[static_cast<std::size_t>(idx)] = true;
  }
  if (std::count(mask.begin(), mask.end(), true) == static_cast<std::ptrdiff_t>(n)) {
    throw SamplingError("every class is excluded; no negatives left to sample");
  }
  return mask;
}

/// Uniform double in the open interval (0, 1) built from the top 53 bits.
inline double open_unit(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace detail

inline Vector uniform_weights(std::size_t n, std::span<const int> excluded) {
  const auto mask = detail::exclusion_mask(n, excluded);
  const auto kept = static_cast<double>(std::count(mask.begin(), mask.end(), false));
  Vector w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = mask[i] ? 0.0 : 1.0 / kept;
  return w;
}

inline Vector frequency_weights(std::span<const std::int64_t> counts,
                                std::span<const int> excluded) {
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] <= 0) {
      throw ContractError("frequency_weights: count of class " + std::to_string(i) +
                          " is not positive");
    }
  }
  const auto mask = detail::exclusion_mask(counts.size(), excluded);
  double total = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (!mask[i]) total += static_cast<double>(counts[i]);
  }
  Vector w(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    w[i] = mask[i] ? 0.0 : static_cast<double>(counts[i]) / total;
  }
  return w;
}

/// Softmax of x.w_i / tau over the non-excluded classes.
inline Vector similarity_weights(std::span<const double> x, const ProposalDistribution& dist,
                                 std::span<const int> excluded) {
  if (dist.kind() != ProposalKind::Similarity) {
    throw ContractError("similarity_weights: distribution carries no class features");
  }
  const auto& features = dist.features();
  if (x.size() != features.cols()) throw ContractError("similarity_weights: dimension mismatch");
  if (std::abs(norm(x) - 1.0) > 1e-6) {
    throw ContractError("similarity_weights: image feature is not unit-norm");
  }
  const auto mask = detail::exclusion_mask(features.rows(), excluded);
  std::vector<double> logits;
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    if (mask[i]) continue;
    logits.push_back(dot(x, features.row(i)) / dist.temperature());
    support.push_back(i);
  }
  const Vector probs = stable_softmax(logits);
  Vector w(features.rows());
  for (std::size_t j = 0; j < support.size(); ++j) w[support[j]] = probs[j];
  return w;
}

/// Gumbel-top-k: the k largest log(w_i) + Gumbel keys. One uniform is drawn
/// per index (zero weights included) so the stream position depends only on
/// the vector length. Equal keys resolve to the lower index.
inline std::vector<int> sample_without_replacement(std::span<const double> weights, std::size_t k,
                                                   Rng& rng) {
  struct Keyed {
    double key;
    int index;
  };
  std::vector<Keyed> keyed;
  keyed.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double u = detail::open_unit(rng);
    const double w = weights[i];
    if (!std::isfinite(w) || w < 0.0) {
      throw ContractError("sample_without_replacement: invalid weight at " + std::to_string(i));
    }
    if (w > 0.0) keyed.push_back({std::log(w) - std::log(-std::log(u)), static_cast<int>(i)});
  }
  if (k > keyed.size()) {
    throw SamplingError("cannot draw " + std::to_string(k) + " distinct classes from a support of " +
                        std::to_string(keyed.size()));
  }
  const auto mid = keyed.begin() + static_cast<std::ptrdiff_t>(k);
  std::partial_sort(keyed.begin(), mid, keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.key > b.key || (a.key == b.key && a.index < b.index);
  });
  std::vector<int> out;
  out.reserve(k);
  for (auto it = keyed.begin(); it != mid; ++it) out.push_back(it->index);
  return out;
}

/// The K classes contrasted at one step: distinct ground truths first (in
/// order of first appearance), then the sampled negatives.
struct StepClassSet {
  std::vector<int> class_ids;
  std::map<int, std::size_t> positive_positions;
  double margin = 0.0;

  std::size_t size() const noexcept { return class_ids.size(); }

  std::size_t position_of(int label) const {
    const auto it = positive_positions.find(label);
    if (it == positive_positions.end()) {
      throw ContractError("label " + std::to_string(label) + " is not a positive of this step");
    }
    return it->second;
  }
};

/// Proposal weights for one batch with every batch label excluded. For the
/// similarity proposal the per-image distributions are averaged, giving a
/// proper mixture over the batch.
inline Vector proposal_weights(const ProposalDistribution& dist, const ClassVocabulary& vocab,
                               std::span<const int> excluded, const Matrix* images) {
  switch (dist.kind()) {
    case ProposalKind::Uniform: return uniform_weights(vocab.size(), excluded);
    case ProposalKind::Frequency: {
      const auto counts = vocab.frequencies();
      return frequency_weights(counts, excluded);
    }
    case ProposalKind::Similarity: {
      if (images == nullptr || images->rows() == 0) {
        throw ContractError("similarity proposal requires the batch image features");
      }
      if (dist.features().rows() != vocab.size()) {
        throw ContractError("similarity proposal: feature rows do not match vocabulary size");
      }
      Vector mix(vocab.size());
      for (std::size_t b = 0; b < images->rows(); ++b) {
        const Vector w = similarity_weights(images->row(b), dist, excluded);
        axpy(1.0 / static_cast<double>(images->rows()), w, mix.span());
      }
      return mix;
    }
  }
  throw ContractError("unknown proposal kind");
}

inline StepClassSet build_step_class_set(std::span<const int> batch_labels, std::size_t k,
                                         const ProposalDistribution& dist,
                                         const ClassVocabulary& vocab, Rng& rng,
                                         const Matrix* images = nullptr,
                                         std::optional<double> margin_override = std::nullopt) {
  const std::size_t n = vocab.size();
  if (batch_labels.empty()) throw ContractError("build_step_class_set: empty batch");
  if (k > n) {
    throw ContractError("build_step_class_set: K must satisfy K <= N (K=" + std::to_string(k) +
                        ", N=" + std::to_string(n) + ")");
  }
  StepClassSet set;
  for (int label : batch_labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= n) {
      throw ContractError("build_step_class_set: label " + std::to_string(label) +
                          " outside the vocabulary");
    }
    if (set.positive_positions.emplace(label, set.class_ids.size()).second) {
      set.class_ids.push_back(label);
    }
  }
  if (k < set.class_ids.size()) {
    throw ContractError("build_step_class_set: K=" + std::to_string(k) + " is smaller than the " +
                        std::to_string(set.class_ids.size()) + " distinct batch labels");
  }
  const std::size_t negatives = k - set.class_ids.size();
  if (negatives > 0) {
    const Vector weights = proposal_weights(dist, vocab, set.class_ids, images);
    const auto drawn = sample_without_replacement(weights, negatives, rng);
    set.class_ids.insert(set.class_ids.end(), drawn.begin(), drawn.end());
  }
  if (margin_override) {
    if (*margin_override < 0.0) throw ContractError("margin override must be >= 0");
    set.margin = *margin_override;
  } else {
    set.margin = adaptive_margin(k, n);
  }
  return set;
}

}  // namespace pomp
