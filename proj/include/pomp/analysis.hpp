#pragma once

// Zero-shot evaluation and the alignment / uniformity probes.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "pomp/data.hpp"
#include "pomp/encoder.hpp"
#include "pomp/error.hpp"
#include "pomp/numerics.hpp"

namespace pomp {

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  Vector per_class_accuracy;  // top-1 per class; 0 for classes without images
  std::size_t num_images = 0;
  std::vector<std::pair<std::size_t, double>> topk;  // (k, accuracy) for each requested k
};

/// Rank of the true class among all classes when sorting by descending
/// score with lower class id winning ties (0 = predicted).
inline std::size_t rank_of_label(std::span<const double> scores, int label) {
  const double target = scores[static_cast<std::size_t>(label)];
  std::size_t rank = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > target || (scores[i] == target && static_cast<int>(i) < label)) ++rank;
  }
  return rank;
}

/// Classifies every image by the largest x.w_i over the given class
/// features. No temperature and no margin are applied.
inline EvalResult evaluate_features(const Matrix& class_features, const FeatureDataset& data,
                                    std::span<const std::size_t> k_list) {
  if (data.size() == 0) throw ContractError("zero_shot_eval: empty dataset");
  if (data.dim() != class_features.cols()) throw ContractError("zero_shot_eval: dim mismatch");
  const std::size_t n = class_features.rows();

  std::vector<std::size_t> ks(k_list.begin(), k_list.end());
  ks.push_back(1);
  ks.push_back(5);
  std::vector<std::size_t> hits(ks.size(), 0);
  std::vector<std::size_t> class_total(n, 0), class_hits(n, 0);

  Vector scores(n);
  for (std::size_t img = 0; img < data.size(); ++img) {
    const int label = data.labels[img];
    if (label < 0 || static_cast<std::size_t>(label) >= n) {
      throw ContractError("zero_shot_eval: label " + std::to_string(label) + " outside class set");
    }
    for (std::size_t c = 0; c < n; ++c) scores[c] = dot(data.features.row(img), class_features.row(c));
    const std::size_t rank = rank_of_label(scores, label);
    for (std::size_t j = 0; j < ks.size(); ++j) hits[j] += rank < ks[j] ? 1 : 0;
    ++class_total[static_cast<std::size_t>(label)];
    class_hits[static_cast<std::size_t>(label)] += rank == 0 ? 1 : 0;
  }

  const double count = static_cast<double>(data.size());
  EvalResult out;
  out.num_images = data.size();
  for (std::size_t j = 0; j + 2 < ks.size(); ++j) {
    out.topk.emplace_back(ks[j], static_cast<double>(hits[j]) / count);
  }
  out.top1 = static_cast<double>(hits[ks.size() - 2]) / count;
  out.top5 = static_cast<double>(hits[ks.size() - 1]) / count;
  out.per_class_accuracy = Vector(n);
  for (std::size_t c = 0; c < n; ++c) {
    if (class_total[c] > 0) {
      out.per_class_accuracy[c] =
          static_cast<double>(class_hits[c]) / static_cast<double>(class_total[c]);
    }
  }
  return out;
}

/// Synthesizes all class features of `vocab` with the prompt and evaluates.
inline EvalResult zero_shot_eval(const SoftPrompt& prompt, const FrozenTextEncoder& enc,
                                 const ClassVocabulary& vocab, const FeatureDataset& data,
                                 std::span<const std::size_t> k_list = {}) {
  if (data.size() == 0) throw ContractError("zero_shot_eval: empty dataset");
  return evaluate_features(encode_all_classes(enc, prompt, vocab), data, k_list);
}

/// Mean of ||x - w_y||^2 over the dataset.
inline double alignment_loss(const FeatureDataset& data, const Matrix& class_features) {
  if (data.size() == 0) throw ContractError("alignment_loss: empty dataset");
  double acc = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto label = static_cast<std::size_t>(data.labels[i]);
    if (label >= class_features.rows()) throw ContractError("alignment_loss: label out of range");
    acc += squared_distance(data.features.row(i), class_features.row(label));
  }
  return acc / static_cast<double>(data.size());
}

/// log of the mean over ordered pairs i != j of exp(-2 ||w_i - w_j||^2).
inline double uniformity_loss(const Matrix& class_features) {
  const std::size_t n = class_features.rows();
  if (n < 2) throw ContractError("uniformity_loss: need at least 2 class features");
  // Each unordered pair appears twice among the ordered pairs; the factor
  // cancels in the mean. Terms go through log-sum-exp.
  std::vector<double> exponents;
  exponents.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      exponents.push_back(-2.0 * squared_distance(class_features.row(i), class_features.row(j)));
    }
  }
  return log_sum_exp(exponents) - std::log(static_cast<double>(exponents.size()));
}

}  // namespace pomp
