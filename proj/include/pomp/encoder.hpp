#pragma once

// Soft prompt, class vocabulary and the frozen text encoder.
//
// A class feature is produced by stacking the prompt rows on top of the
// class's token embeddings, mean-pooling the rows, pushing the pooled vector
// through the frozen layers and L2-normalizing the result. The prompt is the
// only trainable input; the encoder exposes an exact vector-Jacobian product
// so that loss gradients can flow back into it.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pomp/binary_io.hpp"
#include "pomp/error.hpp"
#include "pomp/numerics.hpp"

namespace pomp {

struct SoftPrompt {
  Matrix theta;

  std::size_t length() const noexcept { return theta.rows(); }
  std::size_t embedding_dim() const noexcept { return theta.cols(); }
};

/// Draws every prompt entry from N(0, 0.02^2).
inline SoftPrompt init_prompt(std::size_t length, std::size_t embedding_dim, std::uint64_t seed) {
  if (length == 0 || embedding_dim == 0) throw ContractError("init_prompt: M and e must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 0.02);
  SoftPrompt prompt{Matrix(length, embedding_dim)};
  for (double& v : prompt.theta.span()) v = gauss(rng);
  return prompt;
}

struct ClassEntry {
  int class_id = 0;
  std::string name;
  std::vector<std::uint32_t> token_ids;
  std::int64_t frequency = 1;
};

class ClassVocabulary {
 public:
  ClassVocabulary() = default;

  ClassVocabulary(std::vector<ClassEntry> entries, std::shared_ptr<const Matrix> token_embeddings)
      : entries_(std::move(entries)), embeddings_(std::move(token_embeddings)) {
    if (!embeddings_) throw ContractError("ClassVocabulary: missing token embeddings");
    if (entries_.size() < 2) throw ContractError("ClassVocabulary: need at least 2 classes");
    std::sort(entries_.begin(), entries_.end(),
              [](const ClassEntry& a, const ClassEntry& b) { return a.class_id < b.class_id; });
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& entry = entries_[i];
      if (entry.class_id != static_cast<int>(i)) {
        throw ContractError("ClassVocabulary: class ids must be dense and unique (missing or "
                            "duplicate id near " + std::to_string(i) + ")");
      }
      if (entry.token_ids.empty()) {
        throw ContractError("ClassVocabulary: class " + std::to_string(i) + " has no tokens");
      }
      if (entry.frequency <= 0) {
        throw ContractError("ClassVocabulary: class " + std::to_string(i) +
                            " has non-positive frequency");
      }
      for (auto t : entry.token_ids) {
        if (t >= embeddings_->rows()) {
          throw ContractError("ClassVocabulary: token id " + std::to_string(t) +
                              " out of range for class " + std::to_string(i));
        }
      }
      max_tokens_ = std::max(max_tokens_, entry.token_ids.size());
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t embedding_dim() const noexcept { return embeddings_ ? embeddings_->cols() : 0; }
  std::size_t max_tokens() const noexcept { return max_tokens_; }
  const Matrix& token_embeddings() const { return *embeddings_; }
  const std::shared_ptr<const Matrix>& shared_embeddings() const noexcept { return embeddings_; }
  const std::vector<ClassEntry>& entries() const noexcept { return entries_; }

  const ClassEntry& entry(int class_id) const {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= entries_.size()) {
      throw ContractError("unknown class id " + std::to_string(class_id));
    }
    return entries_[static_cast<std::size_t>(class_id)];
  }

  std::vector<std::int64_t> frequencies() const {
    std::vector<std::int64_t> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.frequency);
    return out;
  }

  /// Restriction to `class_ids`, re-indexed densely in the given order.
  /// Entry j of the result is class_ids[j] of this vocabulary.
  ClassVocabulary subset(std::span<const int> class_ids) const {
    std::vector<ClassEntry> picked;
    picked.reserve(class_ids.size());
    for (std::size_t j = 0; j < class_ids.size(); ++j) {
      ClassEntry e = entry(class_ids[j]);
      e.class_id = static_cast<int>(j);
      picked.push_back(std::move(e));
    }
    return ClassVocabulary(std::move(picked), embeddings_);
  }

 private:
  std::vector<ClassEntry> entries_;
  std::shared_ptr<const Matrix> embeddings_;
  std::size_t max_tokens_ = 0;
};

/// [prompt rows; class token embeddings], shape (M + L_i) x e.
inline Matrix build_class_sequence(const SoftPrompt& prompt, const ClassVocabulary& vocab,
                                   int class_id) {
  const auto& entry = vocab.entry(class_id);
  const auto& table = vocab.token_embeddings();
  const std::size_t e = prompt.embedding_dim();
  if (table.cols() != e) throw ContractError("build_class_sequence: embedding dim mismatch");
  Matrix seq(prompt.length() + entry.token_ids.size(), e);
  for (std::size_t r = 0; r < prompt.length(); ++r) {
    std::copy_n(prompt.theta.row(r).begin(), e, seq.row(r).begin());
  }
  for (std::size_t t = 0; t < entry.token_ids.size(); ++t) {
    const auto src = table.row(entry.token_ids[t]);
    std::copy_n(src.begin(), e, seq.row(prompt.length() + t).begin());
  }
  return seq;
}

enum class EncoderKind { MeanPoolLinear, MeanPoolTwoLayerTanh };

inline const char* to_string(EncoderKind kind) {
  return kind == EncoderKind::MeanPoolLinear ? "linear" : "tanh";
}

/// Forward state kept per class for the backward pass. `hidden` is the
/// pre-normalization feature for the linear kind and the tanh activations
/// for the two-layer kind.
struct EncoderActivation {
  Matrix sequence;
  Vector hidden;
  Vector output;
  double pre_norm = 0.0;
};

class FrozenTextEncoder {
 public:
  /// Layers drawn from N(0, 1/fan_in); the first layer is drawn first, so
  /// both kinds built from one seed share it.
  FrozenTextEncoder(EncoderKind kind, std::size_t input_dim, std::size_t output_dim,
                    std::uint64_t seed)
      : kind_(kind) {
    if (input_dim == 0 || output_dim == 0) throw ContractError("FrozenTextEncoder: empty dims");
    std::mt19937_64 rng(seed);
    first_ = gaussian(output_dim, input_dim, rng);
    if (kind == EncoderKind::MeanPoolTwoLayerTanh) second_ = gaussian(output_dim, output_dim, rng);
  }

  static FrozenTextEncoder linear(Matrix first) {
    return FrozenTextEncoder(EncoderKind::MeanPoolLinear, std::move(first), Matrix{});
  }
  static FrozenTextEncoder two_layer(Matrix first, Matrix second) {
    if (second.cols() != first.rows()) throw ContractError("two_layer: inner dims mismatch");
    return FrozenTextEncoder(EncoderKind::MeanPoolTwoLayerTanh, std::move(first),
                             std::move(second));
  }

  EncoderKind kind() const noexcept { return kind_; }
  std::size_t input_dim() const noexcept { return first_.cols(); }
  std::size_t output_dim() const noexcept {
    return kind_ == EncoderKind::MeanPoolLinear ? first_.rows() : second_.rows();
  }
  const Matrix& first_layer() const noexcept { return first_; }
  const Matrix& second_layer() const noexcept { return second_; }

  EncoderActivation forward(Matrix sequence) const {
    if (sequence.rows() == 0) throw ContractError("encode: empty sequence");
    if (sequence.cols() != input_dim()) throw ContractError("encode: sequence width mismatch");
    Vector pooled(sequence.cols());
    for (std::size_t r = 0; r < sequence.rows(); ++r) axpy(1.0, sequence.row(r), pooled.span());
    for (double& v : pooled) v /= static_cast<double>(sequence.rows());

    EncoderActivation act;
    act.hidden = matvec(first_, pooled);
    Vector feature;
    if (kind_ == EncoderKind::MeanPoolTwoLayerTanh) {
      for (double& v : act.hidden) v = std::tanh(v);
      feature = matvec(second_, act.hidden);
    }
    const auto& pre = kind_ == EncoderKind::MeanPoolLinear ? act.hidden : feature;
    act.pre_norm = norm(pre);
    if (!(act.pre_norm > 0.0) || !std::isfinite(act.pre_norm)) {
      throw DegenerateInputError("encoder output has norm " + std::to_string(act.pre_norm));
    }
    act.output = Vector(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) act.output[i] = pre[i] / act.pre_norm;
    act.sequence = std::move(sequence);
    return act;
  }

  /// Gradient of (output . upstream) with respect to the pooled input row.
  /// Every sequence row receives this vector divided by the row count.
  Vector pooled_vjp(const EncoderActivation& act, std::span<const double> upstream) const {
    if (upstream.size() != act.output.size()) throw ContractError("vjp: upstream dim mismatch");
    // d(f/|f|)^T u / df = (u - w (w.u)) / |f|
    const double proj = dot(act.output, upstream);
    Vector grad_feature(upstream.size());
    for (std::size_t i = 0; i < upstream.size(); ++i) {
      grad_feature[i] = (upstream[i] - act.output[i] * proj) / act.pre_norm;
    }
    if (kind_ == EncoderKind::MeanPoolLinear) return matvec_transposed(first_, grad_feature);
    Vector grad_pre = matvec_transposed(second_, grad_feature);
    for (std::size_t i = 0; i < grad_pre.size(); ++i) {
      grad_pre[i] *= 1.0 - act.hidden[i] * act.hidden[i];
    }
    return matvec_transposed(first_, grad_pre);
  }

 private:
  FrozenTextEncoder(EncoderKind kind, Matrix first, Matrix second)
      : kind_(kind), first_(std::move(first)), second_(std::move(second)) {}

  static Matrix gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
    Matrix m(rows, cols);
    for (double& v : m.span()) v = gauss(rng);
    return m;
  }

  EncoderKind kind_;
  Matrix first_;
  Matrix second_;
};

inline Vector encode_sequence(const FrozenTextEncoder& enc, const Matrix& seq) {
  return enc.forward(seq).output;
}

/// Jacobian-transpose product of the normalized encoder output with
/// `upstream`, shaped like `seq`.
inline Matrix sequence_vjp(const FrozenTextEncoder& enc, const Matrix& seq,
                           std::span<const double> upstream) {
  if (!all_finite(upstream)) throw ContractError("sequence_vjp: non-finite upstream");
  const auto act = enc.forward(seq);
  const Vector pooled = enc.pooled_vjp(act, upstream);
  Matrix out(seq.rows(), seq.cols());
  const double scale = 1.0 / static_cast<double>(seq.rows());
  for (std::size_t r = 0; r < seq.rows(); ++r) axpy(scale, pooled, out.row(r));
  return out;
}

inline EncoderActivation encode_class(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                                      const ClassVocabulary& vocab, int class_id) {
  try {
    return enc.forward(build_class_sequence(prompt, vocab, class_id));
  } catch (const DegenerateInputError& err) {
    throw DegenerateFeatureError(class_id, err.what());
  }
}

/// Row j is the normalized feature of class_ids[j].
inline Matrix encode_class_features(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                                    const ClassVocabulary& vocab, std::span<const int> class_ids) {
  Matrix out(class_ids.size(), enc.output_dim());
  for (std::size_t j = 0; j < class_ids.size(); ++j) {
    const auto act = encode_class(enc, prompt, vocab, class_ids[j]);
    std::copy(act.output.begin(), act.output.end(), out.row(j).begin());
  }
  return out;
}

inline Matrix encode_all_classes(const FrozenTextEncoder& enc, const SoftPrompt& prompt,
                                 const ClassVocabulary& vocab) {
  std::vector<int> ids(vocab.size());
  std::iota(ids.begin(), ids.end(), 0);
  return encode_class_features(enc, prompt, vocab, ids);
}

// ---------------------------------------------------------------------------
// Token-embedding table: "POMPEMBD", u32 version=1, u32 V, u32 e, V*e f32.

inline constexpr std::string_view kEmbeddingMagic = "POMPEMBD";

inline io::Bytes encode_embeddings(const Matrix& table) {
  io::Writer w;
  w.magic(kEmbeddingMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(table.rows()));
  w.u32(static_cast<std::uint32_t>(table.cols()));
  for (double v : table.span()) w.f32(static_cast<float>(v));
  return w.buffer();
}

inline Matrix decode_embeddings(std::span<const std::uint8_t> bytes,
                                const std::string& name = "embeddings") {
  io::Reader r(bytes, name);
  r.expect_magic(kEmbeddingMagic);
  r.expect_version(1);
  const auto rows = r.u32("V");
  const auto cols = r.u32("e");
  if (rows == 0 || cols == 0) throw ShapeError(name + ": empty embedding table", r.position());
  r.require(std::uint64_t{rows} * cols * 4, "embedding payload");
  Matrix table(rows, cols);
  for (double& v : table.span()) v = r.f32("embedding");
  if (r.remaining() != 0) throw FormatError(name + ": trailing bytes", r.position());
  if (!all_finite(table.span())) throw FormatError(name + ": non-finite embedding", 20);
  return table;
}

inline void write_embeddings(const std::filesystem::path& path, const Matrix& table) {
  io::write_file(path, encode_embeddings(table));
}

inline Matrix read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Vocabulary text file: class_id<TAB>name<TAB>frequency<TAB>token ids.

inline std::string format_vocabulary(const ClassVocabulary& vocab) {
  std::ostringstream out;
  out << "# class_id\tname\tfrequency\ttoken_ids\n";
  for (const auto& e : vocab.entries()) {
    out << e.class_id << '\t' << e.name << '\t' << e.frequency << '\t';
    for (std::size_t i = 0; i < e.token_ids.size(); ++i) {
      if (i) out << ' ';
      out << e.token_ids[i];
    }
    out << '\n';
  }
  return out.str();
}

namespace detail {

template <class T>
T parse_number(std::string_view text, std::uint64_t line, const char* what) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw FormatError("vocabulary: bad " + std::string(what) + " '" + std::string(text) +
                          "' on line " + std::to_string(line),
                      line);
  }
  return value;
}

}  // namespace detail

inline ClassVocabulary parse_vocabulary(std::string_view text,
                                        std::shared_ptr<const Matrix> embeddings) {
  std::vector<ClassEntry> entries;
  std::uint64_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto stop = text.find('\n', start);
    if (stop == std::string_view::npos) stop = text.size();
    std::string_view line = text.substr(start, stop - start);
    start = stop + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;

    std::vector<std::string_view> fields;
    std::size_t f = 0;
    while (true) {
      const auto tab = line.find('\t', f);
      fields.push_back(line.substr(f, tab == std::string_view::npos ? line.npos : tab - f));
      if (tab == std::string_view::npos) break;
      f = tab + 1;
    }
    if (fields.size() != 4) {
      throw FormatError("vocabulary: expected 4 tab-separated fields on line " +
                            std::to_string(line_no),
                        line_no);
    }
    ClassEntry entry;
    entry.class_id = detail::parse_number<int>(fields[0], line_no, "class id");
    entry.name = std::string(fields[1]);
    entry.frequency = detail::parse_number<std::int64_t>(fields[2], line_no, "frequency");
    std::istringstream tokens{std::string(fields[3])};
    std::string tok;
    while (tokens >> tok) {
      entry.token_ids.push_back(detail::parse_number<std::uint32_t>(tok, line_no, "token id"));
    }
    entries.push_back(std::move(entry));
  }
  return ClassVocabulary(std::move(entries), std::move(embeddings));
}

inline void write_vocabulary(const std::filesystem::path& path, const ClassVocabulary& vocab) {
  io::write_text_file(path, format_vocabulary(vocab));
}

inline ClassVocabulary read_vocabulary(const std::filesystem::path& path,
                                       std::shared_ptr<const Matrix> embeddings) {
  const auto bytes = io::read_file(path);
  return parse_vocabulary(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
      std::move(embeddings));
}

}  // namespace pomp
