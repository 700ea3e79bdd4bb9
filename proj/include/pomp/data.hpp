#pragma once

// Feature/label file formats and the seeded synthetic class universe.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "pomp/binary_io.hpp"
#include "pomp/encoder.hpp"
#include "pomp/error.hpp"
#include "pomp/numerics.hpp"

namespace pomp {

/// Unit-norm image features with one class label per row.
struct FeatureDataset {
  Matrix features;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }
};

/// Distinct labels in ascending order.
inline std::vector<int> distinct_labels(const FeatureDataset& data) {
  std::set<int> seen(data.labels.begin(), data.labels.end());
  return {seen.begin(), seen.end()};
}

/// Keeps every image, rewriting labels to positions in `class_ids`.
inline FeatureDataset relabel(const FeatureDataset& data, std::span<const int> class_ids) {
  std::map<int, int> local;
  for (std::size_t j = 0; j < class_ids.size(); ++j) local.emplace(class_ids[j], static_cast<int>(j));
  FeatureDataset out{data.features, {}};
  out.labels.reserve(data.size());
  for (int label : data.labels) {
    const auto it = local.find(label);
    if (it == local.end()) {
      throw ContractError("dataset label " + std::to_string(label) + " is not in the class set");
    }
    out.labels.push_back(it->second);
  }
  return out;
}

inline void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const Vector unit = l2_normalize(m.row(r));
    std::copy(unit.begin(), unit.end(), m.row(r).begin());
  }
}

// ---------------------------------------------------------------------------
// "POMPFEAT" u32 version u32 count u32 dim, count*dim f32
// "POMPLABL" u32 version u32 count, count u32

inline constexpr std::string_view kFeatureMagic = "POMPFEAT";
inline constexpr std::string_view kLabelMagic = "POMPLABL";

inline io::Bytes encode_features(const Matrix& features) {
  io::Writer w;
  w.magic(kFeatureMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(features.rows()));
  w.u32(static_cast<std::uint32_t>(features.cols()));
  for (double v : features.span()) w.f32(static_cast<float>(v));
  return w.buffer();
}

inline io::Bytes encode_labels(std::span<const int> labels) {
  io::Writer w;
  w.magic(kLabelMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) w.u32(static_cast<std::uint32_t>(l));
  return w.buffer();
}

/// Raw decode, no renormalization: values are exactly the stored floats.
inline Matrix decode_features(std::span<const std::uint8_t> bytes,
                              const std::string& name = "features") {
  io::Reader r(bytes, name);
  r.expect_magic(kFeatureMagic);
  r.expect_version(1);
  const auto count = r.u32("count");
  const auto dim_at = r.position();
  const auto dim = r.u32("dim");
  if (dim == 0) throw ShapeError(name + ": zero feature dimension", dim_at);
  r.require(std::uint64_t{count} * dim * 4, "count*dim");
  Matrix m(count, dim);
  for (double& v : m.span()) v = r.f32("feature");
  if (r.remaining() != 0) throw FormatError(name + ": trailing bytes", r.position());
  return m;
}

inline std::vector<int> decode_labels(std::span<const std::uint8_t> bytes,
                                      const std::string& name = "labels") {
  io::Reader r(bytes, name);
  r.expect_magic(kLabelMagic);
  r.expect_version(1);
  const auto count = r.u32("count");
  r.require(std::uint64_t{count} * 4, "count");
  std::vector<int> labels(count);
  for (auto& l : labels) {
    const auto at = r.position();
    const auto v = r.u32("label");
    if (v > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
      throw FormatError(name + ": label out of range", at);
    }
    l = static_cast<int>(v);
  }
  if (r.remaining() != 0) throw FormatError(name + ": trailing bytes", r.position());
  return labels;
}

inline void write_features(const std::filesystem::path& feature_path,
                           const std::filesystem::path& label_path, const FeatureDataset& data) {
  if (data.features.rows() != data.labels.size()) {
    throw ContractError("write_features: feature/label count mismatch");
  }
  io::write_file(feature_path, encode_features(data.features));
  io::write_file(label_path, encode_labels(data.labels));
}

/// Loads a dataset and renormalizes every row. `expected_dim`, when given,
/// is the encoder's output dimension; `num_classes` bounds the labels.
inline FeatureDataset read_features(const std::filesystem::path& feature_path,
                                    const std::filesystem::path& label_path,
                                    std::optional<std::size_t> expected_dim = std::nullopt,
                                    std::optional<std::size_t> num_classes = std::nullopt) {
  FeatureDataset data;
  data.features = decode_features(io::read_file(feature_path), feature_path.string());
  data.labels = decode_labels(io::read_file(label_path), label_path.string());
  if (expected_dim && data.features.cols() != *expected_dim) {
    throw ShapeError(feature_path.string() + ": feature dim " +
                         std::to_string(data.features.cols()) + " does not match encoder dim " +
                         std::to_string(*expected_dim),
                     16);
  }
  if (data.features.rows() != data.labels.size()) {
    throw ShapeError(label_path.string() + ": " + std::to_string(data.labels.size()) +
                         " labels for " + std::to_string(data.features.rows()) + " features",
                     12);
  }
  if (num_classes) {
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
      if (static_cast<std::size_t>(data.labels[i]) >= *num_classes) {
        throw ShapeError(label_path.string() + ": label " + std::to_string(data.labels[i]) +
                             " >= N=" + std::to_string(*num_classes),
                         16 + 4 * i);
      }
    }
  }
  try {
    normalize_rows(data.features);
  } catch (const DegenerateInputError& err) {
    throw FormatError(feature_path.string() + ": " + err.what(), 20);
  }
  return data;
}

// ---------------------------------------------------------------------------

/// max(1, round(1000 / (i+1)^s)), non-increasing in i.
inline std::vector<std::int64_t> zipf_frequencies(std::size_t n, double exponent) {
  if (n == 0) throw ContractError("zipf_frequencies: n must be >= 1");
  if (!(exponent >= 0.0)) throw ContractError("zipf_frequencies: exponent must be >= 0");
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double raw = 1000.0 / std::pow(static_cast<double>(i + 1), exponent);
    out[i] = std::max<std::int64_t>(1, std::llround(raw));
  }
  return out;
}

struct SyntheticSpec {
  std::size_t n_classes = 200;
  std::size_t d = 64;
  std::size_t e = 32;
  std::size_t tokens_per_class = 4;
  std::size_t shots = 16;
  double noise_sigma = 0.35;
  double zipf_exponent = 1.0;
  double heldout_fraction = 0.25;
  std::uint64_t seed = 42;
  // Token embeddings are token_scale * (G z_c + offset + jitter). G is the
  // transposed layer stack of the encoder built from (encoder_kind,
  // encoder_seed): W1^T for the linear kind, W1^T W2^T for the tanh kind.
  // `offset` is one Gaussian vector shared by every token.
  EncoderKind encoder_kind = EncoderKind::MeanPoolTwoLayerTanh;
  std::uint64_t encoder_seed = 7;
  double token_scale = 0.1;
  double token_offset = 3.0;
  double token_jitter = 3.0;

  void validate() const {
    if (n_classes < 4) throw ContractError("synthetic: n_classes must be >= 4");
    if (shots < 1) throw ContractError("synthetic: shots must be >= 1");
    if (d < 1 || e < 1 || tokens_per_class < 1) throw ContractError("synthetic: dims must be >= 1");
    if (!(noise_sigma >= 0.0)) throw ContractError("synthetic: noise_sigma must be >= 0");
    if (!(zipf_exponent >= 0.0)) throw ContractError("synthetic: zipf_exponent must be >= 0");
    if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) {
      throw ContractError("synthetic: heldout_fraction must lie in (0, 1)");
    }
    if (!(token_scale > 0.0)) throw ContractError("synthetic: token_scale must be > 0");
    if (!(token_offset >= 0.0) || !(token_jitter >= 0.0)) {
      throw ContractError("synthetic: token offset/jitter must be >= 0");
    }
    const auto held = heldout_count();
    if (held < 2 || n_classes - held < 2) {
      throw ContractError("synthetic: heldout_fraction leaves fewer than 2 classes on one side");
    }
  }

  std::size_t heldout_count() const {
    return static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(n_classes)));
  }
};

/// Labels of both splits are global class ids of `vocab`.
struct SyntheticUniverse {
  FeatureDataset pretrain;
  FeatureDataset heldout;
  ClassVocabulary vocab;
  std::vector<int> pretrain_classes;
  std::vector<int> heldout_classes;
};

inline SyntheticUniverse generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n_classes;
  const std::size_t d = spec.d;
  const std::size_t e = spec.e;
  const std::size_t L = spec.tokens_per_class;

  const FrozenTextEncoder reference(spec.encoder_kind, e, d, spec.encoder_seed);
  auto token_map = [&](std::span<const double> z) {
    if (spec.encoder_kind == EncoderKind::MeanPoolLinear) {
      return matvec_transposed(reference.first_layer(), z);
    }
    return matvec_transposed(reference.first_layer(), matvec_transposed(reference.second_layer(), z));
  };

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Vector offset(e);
  for (double& v : offset) v = spec.token_offset * gauss(rng);

  Matrix latent(n, d);
  for (double& v : latent.span()) v = gauss(rng);

  auto table = std::make_shared<Matrix>(n * L, e);
  std::vector<ClassEntry> entries;
  entries.reserve(n);
  const auto freqs = zipf_frequencies(n, spec.zipf_exponent);
  for (std::size_t c = 0; c < n; ++c) {
    const Vector base = token_map(latent.row(c));
    ClassEntry entry;
    entry.class_id = static_cast<int>(c);
    char name[32];
    std::snprintf(name, sizeof name, "class_%04zu", c);
    entry.name = name;
    entry.frequency = freqs[c];
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t token = c * L + t;
      auto row = table->row(token);
      for (std::size_t j = 0; j < e; ++j) {
        row[j] = spec.token_scale * (base[j] + offset[j] + spec.token_jitter * gauss(rng));
      }
      entry.token_ids.push_back(static_cast<std::uint32_t>(token));
    }
    entries.push_back(std::move(entry));
  }

  Matrix images(n * spec.shots, d);
  std::vector<int> image_labels(n * spec.shots);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t s = 0; s < spec.shots; ++s) {
      const std::size_t idx = c * spec.shots + s;
      auto row = images.row(idx);
      for (std::size_t j = 0; j < d; ++j) row[j] = latent(c, j) + spec.noise_sigma * gauss(rng);
      image_labels[idx] = static_cast<int>(c);
    }
  }
  normalize_rows(images);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t held = spec.heldout_count();
  std::vector<int> heldout_classes(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<int> pretrain_classes(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(heldout_classes.begin(), heldout_classes.end());
  std::sort(pretrain_classes.begin(), pretrain_classes.end());

  std::vector<bool> is_heldout(n, false);
  for (int c : heldout_classes) is_heldout[static_cast<std::size_t>(c)] = true;

  auto split = [&](bool want_heldout) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < image_labels.size(); ++i) {
      if (is_heldout[static_cast<std::size_t>(image_labels[i])] == want_heldout) rows.push_back(i);
    }
    FeatureDataset out{Matrix(rows.size(), d), {}};
    out.labels.reserve(rows.size());
    for (std::size_t j = 0; j < rows.size(); ++j) {
      std::copy_n(images.row(rows[j]).begin(), d, out.features.row(j).begin());
      out.labels.push_back(image_labels[rows[j]]);
    }
    return out;
  };

  SyntheticUniverse universe{split(false), split(true),
                             ClassVocabulary(std::move(entries), std::move(table)),
                             std::move(pretrain_classes), std::move(heldout_classes)};
  return universe;
}

/// File names written by `write_universe`, in a fixed order.
struct UniverseFiles {
  std::filesystem::path pretrain_features, pretrain_labels, heldout_features, heldout_labels,
      vocabulary, embeddings;

  explicit UniverseFiles(const std::filesystem::path& dir)
      : pretrain_features(dir / "pretrain.feat"),
        pretrain_labels(dir / "pretrain.labl"),
        heldout_features(dir / "heldout.feat"),
        heldout_labels(dir / "heldout.labl"),
        vocabulary(dir / "vocab.tsv"),
        embeddings(dir / "embeddings.bin") {}

  std::vector<std::filesystem::path> all() const {
    return {pretrain_features, pretrain_labels, heldout_features,
            heldout_labels,    vocabulary,      embeddings};
  }
};

inline void write_universe(const std::filesystem::path& dir, const SyntheticUniverse& universe) {
  const UniverseFiles files(dir);
  write_features(files.pretrain_features, files.pretrain_labels, universe.pretrain);
  write_features(files.heldout_features, files.heldout_labels, universe.heldout);
  write_vocabulary(files.vocabulary, universe.vocab);
  write_embeddings(files.embeddings, universe.vocab.token_embeddings());
}

/// A split restricted to its own classes: dense local labels and the
/// matching vocabulary subset.
struct SplitView {
  ClassVocabulary vocab;
  FeatureDataset data;
  std::vector<int> global_ids;
};

inline SplitView make_split_view(const ClassVocabulary& vocab, const FeatureDataset& data) {
  auto ids = distinct_labels(data);
  return {vocab.subset(ids), relabel(data, ids), ids};
}

}  // namespace pomp
