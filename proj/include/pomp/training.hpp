#pragma once

// Prompt pre-training: batched sampled-softmax steps with the adaptive
// margin, plain SGD under a cosine schedule, checkpoints and the per-step
// activation-memory model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pomp/binary_io.hpp"
#include "pomp/data.hpp"
#include "pomp/digest.hpp"
#include "pomp/encoder.hpp"
#include "pomp/error.hpp"
#include "pomp/numerics.hpp"
#include "pomp/objective.hpp"
#include "pomp/parallel.hpp"
#include "pomp/sampling.hpp"

namespace pomp {

struct TrainConfig {
  std::size_t K = 64;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  double lr0 = 0.002;
  double tau = 0.07;
  std::size_t prompt_len = 16;
  ProposalKind distribution = ProposalKind::Uniform;
  std::optional<double> margin_override;
  std::uint64_t seed = 42;
  bool per_image_sampling = false;
  // Temperature of the similarity proposal; the loss temperature when unset.
  std::optional<double> similarity_tau;
  // Worker threads for per-class encoding (0 = hardware concurrency).
  // Results do not depend on it.
  std::size_t threads = 1;

  void validate(std::size_t num_classes) const {
    if (K < 2) throw ContractError("K must be >= 2");
    if (K > num_classes) {
      throw ContractError("K must satisfy K <= N (K=" + std::to_string(K) +
                          ", N=" + std::to_string(num_classes) + ")");
    }
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (!(lr0 > 0.0)) throw ContractError("lr0 must be > 0");
    if (!(tau > 0.0 && tau <= 10.0)) throw ContractError("tau must lie in (0, 10]");
    if (prompt_len < 1) throw ContractError("prompt_len must be >= 1");
    if (margin_override && !(*margin_override >= 0.0)) {
      throw ContractError("margin_override must be >= 0");
    }
    if (similarity_tau && !(*similarity_tau > 0.0)) throw ContractError("similarity_tau must be > 0");
  }

  /// Canonical text form; its SHA-256 is the checkpoint's config digest.
  /// `threads` is excluded because it never changes results.
  std::string canonical() const {
    std::ostringstream out;
    out.precision(17);
    out << "K=" << K << "\nbatch_size=" << batch_size << "\nepochs=" << epochs
        << "\nlr0=" << lr0 << "\ntau=" << tau << "\nprompt_len=" << prompt_len
        << "\ndistribution=" << to_string(distribution) << "\nmargin_override="
        << (margin_override ? std::to_string(*margin_override) : std::string("adaptive"))
        << "\nseed=" << seed << "\nper_image_sampling=" << per_image_sampling
        << "\nsimilarity_tau=" << similarity_tau.value_or(tau) << '\n';
    return out.str();
  }

  Digest digest() const { return sha256(canonical()); }
};

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw ContractError("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) throw ContractError("cosine_lr: step beyond schedule");
  if (step == total_steps) return 0.0;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(phase));
}

/// theta -= lr * grad
inline void sgd_step(SoftPrompt& prompt, const Matrix& grad, double lr) {
  if (grad.rows() != prompt.theta.rows() || grad.cols() != prompt.theta.cols()) {
    throw ContractError("sgd_step: gradient shape does not match the prompt");
  }
  if (!(lr >= 0.0)) throw ContractError("sgd_step: lr must be >= 0");
  axpy(-lr, grad.span(), prompt.theta.span());
}

struct StepOutput {
  Matrix grad;
  double loss = 0.0;
};

namespace detail {

inline Matrix gather_rows(const Matrix& source, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), source.cols());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    std::copy_n(source.row(rows[j]).begin(), source.cols(), out.row(j).begin());
  }
  return out;
}

/// Shared-subset step. Every image is contrasted against all of `set`; the
/// per-class upstream vectors are folded over the batch so each class runs
/// exactly one backward pass. With `plain_softmax` the margin is ignored and
/// probabilities come from the full softmax (the uncorrected control).
inline StepOutput contrast_step(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                                const ClassVocabulary& vocab, const Matrix& images,
                                std::span<const int> labels, const StepClassSet& set, double tau,
                                std::size_t threads, bool plain_softmax = false) {
  const std::size_t k = set.size();
  const std::size_t batch = labels.size();

  std::vector<EncoderActivation> cache(k);
  parallel_for(k, threads, [&](std::size_t i) {
    cache[i] = encode_class(enc, prompt, vocab, set.class_ids[i]);
  });

  // coeff(b, i) = dLoss_b / ds_i, already divided by the batch size.
  Matrix coeff(batch, k);
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    LogitBlock block;
    block.sims = Vector(k);
    for (std::size_t i = 0; i < k; ++i) block.sims[i] = dot(images.row(b), cache[i].output);
    block.positive_index = set.position_of(labels[b]);
    block.tau = tau;
    block.margin = plain_softmax ? 0.0 : set.margin;
    const Vector probs = plain_softmax ? full_softmax_prob(block) : corrected_probs(block);
    loss_sum += step_loss(block);
    for (std::size_t i = 0; i < k; ++i) {
      const double target = i == block.positive_index ? 1.0 : 0.0;
      coeff(b, i) = (probs[i] - target) / (tau * static_cast<double>(batch));
    }
  }

  const std::size_t e = prompt.embedding_dim();
  auto pooled_grad = [&](std::size_t i) {
    Vector upstream(enc.output_dim());
    for (std::size_t b = 0; b < batch; ++b) axpy(coeff(b, i), images.row(b), upstream.span());
    Vector g = enc.pooled_vjp(cache[i], upstream);
    const double rows = static_cast<double>(cache[i].sequence.rows());
    for (double& v : g) v /= rows;
    return g;
  };

  Vector row_grad(e);
  if (resolve_threads(threads) <= 1) {
    for (std::size_t i = 0; i < k; ++i) axpy(1.0, pooled_grad(i), row_grad.span());
  } else {
    Matrix slots(k, e);
    parallel_for(k, threads, [&](std::size_t i) {
      const Vector g = pooled_grad(i);
      std::copy(g.begin(), g.end(), slots.row(i).begin());
    });
    for (std::size_t i = 0; i < k; ++i) axpy(1.0, slots.row(i), row_grad.span());
  }

  // Mean pooling hands every prompt row the same gradient.
  StepOutput out{Matrix(prompt.length(), e), loss_sum / static_cast<double>(batch)};
  for (std::size_t r = 0; r < prompt.length(); ++r) {
    std::copy(row_grad.begin(), row_grad.end(), out.grad.row(r).begin());
  }
  return out;
}

}  // namespace detail

inline ProposalDistribution make_proposal(const TrainConfig& config, const FrozenTextEncoder& enc,
                                          const ClassVocabulary& vocab) {
  switch (config.distribution) {
    case ProposalKind::Uniform: return ProposalDistribution::uniform();
    case ProposalKind::Frequency: return ProposalDistribution::frequency();
    case ProposalKind::Similarity: {
      // Fixed surrogate of hand-crafted prompt features: the zero prompt.
      const SoftPrompt zero{Matrix(config.prompt_len, vocab.embedding_dim())};
      return ProposalDistribution::similarity(encode_all_classes(enc, zero, vocab),
                                              config.similarity_tau.value_or(config.tau));
    }
  }
  throw ContractError("unknown proposal kind");
}

/// One optimization step's gradient for a batch (rows of `data`).
inline StepOutput batch_step(const TrainConfig& config, const FrozenTextEncoder& enc,
                             const SoftPrompt& prompt, const ClassVocabulary& vocab,
                             const ProposalDistribution& proposal, const FeatureDataset& data,
                             std::span<const std::size_t> rows, Rng& rng) {
  const Matrix images = detail::gather_rows(data.features, rows);
  std::vector<int> labels;
  labels.reserve(rows.size());
  for (auto r : rows) labels.push_back(data.labels[r]);

  if (!config.per_image_sampling) {
    const StepClassSet set = build_step_class_set(labels, config.K, proposal, vocab, rng, &images,
                                                  config.margin_override);
    return detail::contrast_step(enc, prompt, vocab, images, labels, set, config.tau,
                                 config.threads);
  }

  // Per-image subsets: each image gets its own K classes, encoded afresh.
  StepOutput total{Matrix(prompt.length(), prompt.embedding_dim()), 0.0};
  const double scale = 1.0 / static_cast<double>(rows.size());
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const Matrix one = detail::gather_rows(images, std::span(&b, 1));
    const int label = labels[b];
    const StepClassSet set = build_step_class_set(std::span(&label, 1), config.K, proposal, vocab,
                                                  rng, &one, config.margin_override);
    const StepOutput part = detail::contrast_step(enc, prompt, vocab, one, std::span(&label, 1),
                                                  set, config.tau, config.threads);
    axpy(scale, part.grad.span(), total.grad.span());
    total.loss += scale * part.loss;
  }
  return total;
}

/// Full-softmax step over every class without margin (the K = N control).
inline StepOutput full_softmax_batch_step(const TrainConfig& config, const FrozenTextEncoder& enc,
                                          const SoftPrompt& prompt, const ClassVocabulary& vocab,
                                          const FeatureDataset& data,
                                          std::span<const std::size_t> rows) {
  const Matrix images = detail::gather_rows(data.features, rows);
  std::vector<int> labels;
  for (auto r : rows) labels.push_back(data.labels[r]);
  StepClassSet all;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    all.class_ids.push_back(static_cast<int>(i));
    all.positive_positions.emplace(static_cast<int>(i), i);
  }
  return detail::contrast_step(enc, prompt, vocab, images, labels, all, config.tau, config.threads,
                               /*plain_softmax=*/true);
}

struct Checkpoint {
  SoftPrompt prompt;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  Digest config_digest{};
};

struct EpochMetric {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetric> log;
};

namespace detail {

inline Rng derived_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    stream};
  return Rng(seq);
}

inline constexpr std::uint32_t kShuffleStream = 1;
inline constexpr std::uint32_t kSamplerStream = 2;

}  // namespace detail

/// Runs epochs x ceil(|data| / batch_size) SGD steps. Each epoch draws a
/// seeded permutation of the images and walks it in contiguous batches.
inline TrainResult train(const TrainConfig& config, const ClassVocabulary& vocab,
                         const FrozenTextEncoder& enc, const FeatureDataset& data) {
  config.validate(vocab.size());
  if (data.size() == 0) throw ContractError("train: empty dataset");
  if (data.dim() != enc.output_dim()) throw ContractError("train: feature dim != encoder dim");
  for (int label : data.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= vocab.size()) {
      throw ContractError("train: dataset label " + std::to_string(label) + " outside vocabulary");
    }
  }

  TrainResult result;
  result.checkpoint.prompt = init_prompt(config.prompt_len, vocab.embedding_dim(), config.seed);
  result.checkpoint.seed = config.seed;
  result.checkpoint.config_digest = config.digest();
  auto& prompt = result.checkpoint.prompt;

  const ProposalDistribution proposal = make_proposal(config, enc, vocab);
  Rng shuffle_rng = detail::derived_rng(config.seed, detail::kShuffleStream);
  Rng sampler_rng = detail::derived_rng(config.seed, detail::kSamplerStream);

  const std::size_t steps_per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * steps_per_epoch;
  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double weighted_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      try {
        const StepOutput out = batch_step(config, enc, prompt, vocab, proposal, data, rows,
                                          sampler_rng);
        if (!all_finite(out.grad.span()) || !std::isfinite(out.loss)) {
          throw Error("non-finite gradient or loss");
        }
        sgd_step(prompt, out.grad, cosine_lr(step, total_steps, config.lr0));
        weighted_loss += out.loss * static_cast<double>(rows.size());
      } catch (const TrainingError&) {
        throw;
      } catch (const Error& err) {
        throw TrainingError(step, err.what());
      }
      ++step;
    }
    result.log.push_back({epoch + 1, weighted_loss / static_cast<double>(data.size())});
  }
  result.checkpoint.step = step;
  return result;
}

// ---------------------------------------------------------------------------
// Memory model.

struct MemoryReport {
  std::size_t modeled_bytes_per_step = 0;
  std::size_t measured_peak_bytes = 0;
  std::size_t K = 0;
  std::size_t prompt_len = 0;
  std::size_t max_tokens = 0;
  std::size_t embedding_dim = 0;
  std::size_t feature_dim = 0;
};

/// Bytes cached for one class between forward and backward: the input
/// sequence ((M + L_max) x e), the hidden vector (d) and the normalized
/// output (d), 8 bytes per entry.
inline std::size_t per_class_activation_bytes(std::size_t prompt_len, std::size_t max_tokens,
                                              std::size_t embedding_dim, std::size_t feature_dim) {
  return 8 * ((prompt_len + max_tokens) * embedding_dim + 2 * feature_dim);
}

/// K * A(M, L_max, e, d) + B(batch, d), with B the gathered batch features
/// (batch x d doubles).
inline std::size_t estimate_step_memory(std::size_t k, std::size_t prompt_len,
                                        std::size_t max_tokens, std::size_t embedding_dim,
                                        std::size_t feature_dim, std::size_t batch_size) {
  if (k == 0 || prompt_len == 0 || max_tokens == 0 || embedding_dim == 0 || feature_dim == 0 ||
      batch_size == 0) {
    throw ContractError("estimate_step_memory: dimensions must be positive");
  }
  return k * per_class_activation_bytes(prompt_len, max_tokens, embedding_dim, feature_dim) +
         8 * batch_size * feature_dim;
}

/// Everything a single measured step needs, built before the meter window.
struct StepFixture {
  const ClassVocabulary& vocab;
  const FrozenTextEncoder& encoder;
  const FeatureDataset& data;
};

namespace detail {

template <class StepFn>
MemoryReport measure(const TrainConfig& config, const StepFixture& fx, std::size_t k,
                     StepFn&& step) {
  const SoftPrompt prompt = init_prompt(config.prompt_len, fx.vocab.embedding_dim(), config.seed);
  std::vector<std::size_t> rows(std::min(config.batch_size, fx.data.size()));
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Rng rng = derived_rng(config.seed, kSamplerStream);

  MemoryReport report;
  report.K = k;
  report.prompt_len = config.prompt_len;
  report.max_tokens = fx.vocab.max_tokens();
  report.embedding_dim = fx.vocab.embedding_dim();
  report.feature_dim = fx.encoder.output_dim();
  report.modeled_bytes_per_step =
      estimate_step_memory(k, report.prompt_len, report.max_tokens, report.embedding_dim,
                           report.feature_dim, rows.size());
  {
    MeterWindow window;
    { const StepOutput out = step(prompt, rows, rng); }
    report.measured_peak_bytes = window.peak_delta();
  }
  return report;
}

}  // namespace detail

/// Peak metered bytes of one sampled step, single-threaded. Throws
/// MeterStateError when another measurement window is open.
inline MemoryReport measure_step_memory(TrainConfig config, const StepFixture& fx) {
  config.validate(fx.vocab.size());
  config.threads = 1;
  const ProposalDistribution proposal = make_proposal(config, fx.encoder, fx.vocab);
  return detail::measure(config, fx, config.K, [&](const SoftPrompt& prompt, auto rows, Rng& rng) {
    return batch_step(config, fx.encoder, prompt, fx.vocab, proposal, fx.data, rows, rng);
  });
}

/// Same measurement for the uncorrected full-softmax step over all N classes.
inline MemoryReport measure_full_softmax_step_memory(TrainConfig config, const StepFixture& fx) {
  config.threads = 1;
  return detail::measure(config, fx, fx.vocab.size(),
                         [&](const SoftPrompt& prompt, auto rows, Rng&) {
                           return full_softmax_batch_step(config, fx.encoder, prompt, fx.vocab,
                                                          fx.data, rows);
                         });
}

// ---------------------------------------------------------------------------
// Checkpoint: "POMPCKPT" u32 version u32 M u32 e, M*e f64, u64 step,
// u64 seed, 32-byte config digest, 32-byte SHA-256 of everything before it.

inline constexpr std::string_view kCheckpointMagic = "POMPCKPT";

inline io::Bytes encode_checkpoint(const Checkpoint& ckpt) {
  io::Writer w;
  w.magic(kCheckpointMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(ckpt.prompt.length()));
  w.u32(static_cast<std::uint32_t>(ckpt.prompt.embedding_dim()));
  for (double v : ckpt.prompt.theta.span()) w.f64(v);
  w.u64(ckpt.step);
  w.u64(ckpt.seed);
  w.bytes(ckpt.config_digest);
  const Digest file_digest = sha256(w.buffer());
  w.bytes(file_digest);
  return w.buffer();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes,
                                    const std::string& name = "checkpoint") {
  io::Reader r(bytes, name);
  r.expect_magic(kCheckpointMagic);
  r.expect_version(1);
  const auto rows = r.u32("M");
  const auto cols = r.u32("e");
  if (rows == 0 || cols == 0) throw ShapeError(name + ": empty prompt shape", 12);
  r.require(std::uint64_t{rows} * cols * 8 + 8 + 8 + 32 + 32, "prompt payload");
  Checkpoint ckpt;
  ckpt.prompt.theta = Matrix(rows, cols);
  for (double& v : ckpt.prompt.theta.span()) v = r.f64("theta");
  ckpt.step = r.u64("step");
  ckpt.seed = r.u64("seed");
  const auto config = r.take(32, "config digest");
  std::copy(config.begin(), config.end(), ckpt.config_digest.begin());
  const auto body = bytes.first(r.position());
  const auto stored = r.take(32, "file digest");
  if (r.remaining() != 0) throw FormatError(name + ": trailing bytes", r.position());
  const Digest actual = sha256(body);
  if (!std::equal(actual.begin(), actual.end(), stored.begin())) {
    throw DigestMismatchError(name + ": digest mismatch (stored " + to_hex(stored) +
                                  ", computed " + to_hex(actual) + ")",
                              body.size());
  }
  if (!all_finite(ckpt.prompt.theta.span())) throw FormatError(name + ": non-finite prompt", 20);
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace pomp
