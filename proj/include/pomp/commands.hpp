#pragma once

// Subcommand implementations behind the `pomp` executable. Each command
// returns a stable exit code and never lets an exception escape.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pomp/analysis.hpp"
#include "pomp/config.hpp"
#include "pomp/data.hpp"
#include "pomp/digest.hpp"
#include "pomp/gradcheck.hpp"
#include "pomp/parallel.hpp"
#include "pomp/training.hpp"

namespace pomp::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kIoError = 3,
  kTrainingError = 4,
  kCheckpointError = 5,
  kGradCheckFailed = 6,
  kMemoryBenchFailed = 7,
};

struct CommandOptions {
  std::filesystem::path out = ".";
  bool with_control = false;
  std::optional<std::filesystem::path> checkpoint;
};

// ---------------------------------------------------------------------------
// Config translation.

inline EncoderKind encoder_kind(const CliConfig& cfg) {
  const auto name = cfg.text("encoder");
  if (name == "linear") return EncoderKind::MeanPoolLinear;
  if (name == "tanh") return EncoderKind::MeanPoolTwoLayerTanh;
  throw ConfigError("encoder must be 'linear' or 'tanh', got '" + name + "'");
}

inline ProposalKind proposal_kind(std::string_view name) {
  if (name == "uniform") return ProposalKind::Uniform;
  if (name == "frequency") return ProposalKind::Frequency;
  if (name == "similarity") return ProposalKind::Similarity;
  throw ConfigError("distribution must be uniform, frequency or similarity, got '" +
                    std::string(name) + "'");
}

/// "adaptive" or a non-negative number.
inline std::optional<double> margin_setting(std::string_view text) {
  if (text == "adaptive") return std::nullopt;
  const auto value = detail::parse_real(text);
  if (!value || *value < 0.0 || !std::isfinite(*value)) {
    throw ConfigError("margin must be 'adaptive' or a non-negative number, got '" +
                      std::string(text) + "'");
  }
  return value;
}

inline SyntheticSpec synthetic_spec(const CliConfig& cfg) {
  SyntheticSpec spec;
  spec.n_classes = cfg.integer("n_classes");
  spec.d = cfg.integer("d");
  spec.e = cfg.integer("e");
  spec.tokens_per_class = cfg.integer("tokens_per_class");
  spec.shots = cfg.integer("shots");
  spec.noise_sigma = cfg.real("noise_sigma");
  spec.zipf_exponent = cfg.real("zipf_exponent");
  spec.heldout_fraction = cfg.real("heldout_fraction");
  spec.token_scale = cfg.real("token_scale");
  spec.token_offset = cfg.real("token_offset");
  spec.token_jitter = cfg.real("token_jitter");
  spec.seed = cfg.integer("seed");
  spec.encoder_kind = encoder_kind(cfg);
  spec.encoder_seed = cfg.integer("encoder_seed");
  try {
    spec.validate();
  } catch (const ContractError& err) {
    throw ConfigError(err.what());
  }
  return spec;
}

inline TrainConfig train_config(const CliConfig& cfg) {
  TrainConfig tc;
  tc.K = cfg.integer("K");
  tc.batch_size = cfg.integer("batch_size");
  tc.epochs = cfg.integer("epochs");
  tc.lr0 = cfg.real("lr0");
  tc.tau = cfg.real("tau");
  tc.prompt_len = cfg.integer("prompt_len");
  tc.distribution = proposal_kind(cfg.text("distribution"));
  tc.margin_override = margin_setting(cfg.text("margin"));
  tc.seed = cfg.integer("seed");
  tc.per_image_sampling = cfg.boolean("per_image_sampling");
  tc.similarity_tau = cfg.real("similarity_tau");
  tc.threads = threads_from_env(0);
  return tc;
}

// ---------------------------------------------------------------------------
// Data loading.

struct Workspace {
  ClassVocabulary vocab;
  FeatureDataset pretrain;
  FeatureDataset heldout;
  FrozenTextEncoder encoder;
};

inline std::filesystem::path data_dir(const CliConfig& cfg, const CommandOptions& opts) {
  const auto dir = cfg.text("data_dir");
  return dir.empty() ? opts.out : std::filesystem::path(dir);
}

inline std::filesystem::path checkpoint_path(const CliConfig& cfg, const CommandOptions& opts) {
  if (opts.checkpoint) return *opts.checkpoint;
  const auto path = cfg.text("checkpoint");
  return path.empty() ? opts.out / "checkpoint.bin" : std::filesystem::path(path);
}

inline Workspace load_workspace(const CliConfig& cfg, const CommandOptions& opts) {
  const UniverseFiles files(data_dir(cfg, opts));
  auto table = std::make_shared<const Matrix>(read_embeddings(files.embeddings));
  ClassVocabulary vocab = read_vocabulary(files.vocabulary, table);
  FrozenTextEncoder encoder(encoder_kind(cfg), table->cols(), cfg.integer("d"),
                            cfg.integer("encoder_seed"));
  FeatureDataset pretrain = read_features(files.pretrain_features, files.pretrain_labels,
                                          encoder.output_dim(), vocab.size());
  FeatureDataset heldout = read_features(files.heldout_features, files.heldout_labels,
                                         encoder.output_dim(), vocab.size());
  return {std::move(vocab), std::move(pretrain), std::move(heldout), std::move(encoder)};
}

inline SplitView split_view(const Workspace& ws, std::string_view split) {
  if (split == "pretrain") return make_split_view(ws.vocab, ws.pretrain);
  if (split == "heldout") return make_split_view(ws.vocab, ws.heldout);
  throw ConfigError("split must be 'pretrain' or 'heldout', got '" + std::string(split) + "'");
}

// ---------------------------------------------------------------------------
// Output helpers.

inline std::string format_real(double v) {
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

inline std::string csv_header(const CliConfig& cfg) {
  return "# config_digest=" + to_hex(cfg.digest()) + "\n";
}

inline std::string file_sha256(const std::filesystem::path& path) {
  return to_hex(sha256(io::read_file(path)));
}

struct Probe {
  EvalResult eval;
  double align = 0.0;
  double uniform = 0.0;
};

inline Probe probe_prompt(const SoftPrompt& prompt, const FrozenTextEncoder& enc,
                          const SplitView& view) {
  const Matrix features = encode_all_classes(enc, prompt, view.vocab);
  Probe p;
  p.eval = evaluate_features(features, view.data, {});
  p.align = alignment_loss(view.data, features);
  p.uniform = uniformity_loss(features);
  return p;
}

inline std::string metrics_csv(const CliConfig& cfg, std::string_view split,
                               std::string_view prompt_tag, const Probe& p, bool with_accuracy) {
  std::ostringstream out;
  out << csv_header(cfg) << "# split=" << split << "\n# prompt=" << prompt_tag << "\n";
  out << "metric,value\n";
  if (with_accuracy) {
    out << "top1," << format_real(p.eval.top1) << "\n";
    out << "top5," << format_real(p.eval.top5) << "\n";
  }
  out << "align," << format_real(p.align) << "\n";
  out << "uniform," << format_real(p.uniform) << "\n";
  return out.str();
}

/// Runs `body`, translating library errors into exit codes.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const TrainingError& e) {
    err << "training error: " << e.what() << "\n";
    return kTrainingError;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIoError;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIoError;
  } catch (const ContractError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kTrainingError;
  }
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// Commands.

inline int cmd_gen_data(const CliConfig& cfg, const CommandOptions& opts, std::ostream& out,
                        std::ostream& err) {
  return guarded(err, [&]() -> int {
    const SyntheticSpec spec = synthetic_spec(cfg);
    ensure_dir(opts.out);
    const SyntheticUniverse universe = generate_synthetic(spec);
    write_universe(opts.out, universe);
    for (const auto& path : UniverseFiles(opts.out).all()) {
      out << path.string() << " " << file_sha256(path) << "\n";
    }
    return kOk;
  });
}

inline int cmd_pretrain(const CliConfig& cfg, const CommandOptions& opts, std::ostream& out,
                        std::ostream& err) {
  return guarded(err, [&]() -> int {
    const TrainConfig tc = train_config(cfg);
    const Workspace ws = load_workspace(cfg, opts);
    const SplitView view = make_split_view(ws.vocab, ws.pretrain);
    try {
      tc.validate(view.vocab.size());
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    ensure_dir(opts.out);
    const TrainResult result = train(tc, view.vocab, ws.encoder, view.data);
    const auto ckpt_path = checkpoint_path(cfg, opts);
    save_checkpoint(result.checkpoint, ckpt_path);

    std::ostringstream csv;
    csv << csv_header(cfg) << "epoch,mean_loss\n";
    for (const auto& m : result.log) csv << m.epoch << "," << format_real(m.mean_loss) << "\n";
    io::write_text_file(opts.out / "loss.csv", csv.str());

    out << "classes " << view.vocab.size() << ", images " << view.data.size() << ", steps "
        << result.checkpoint.step << "\n";
    if (!result.log.empty()) {
      out << "loss " << format_real(result.log.front().mean_loss) << " -> "
          << format_real(result.log.back().mean_loss) << "\n";
    }
    out << "checkpoint " << ckpt_path.string() << " " << file_sha256(ckpt_path) << "\n";
    return kOk;
  });
}

namespace detail {

inline std::optional<Checkpoint> load_checked(const std::filesystem::path& path,
                                              std::size_t embedding_dim, std::ostream& err,
                                              int& code) {
  try {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.prompt.embedding_dim() != embedding_dim) {
      throw ShapeError(path.string() + ": prompt width " +
                           std::to_string(ckpt.prompt.embedding_dim()) +
                           " does not match embedding dim " + std::to_string(embedding_dim),
                       16);
    }
    return ckpt;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    code = kIoError;
  } catch (const FormatError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    code = kCheckpointError;
  }
  return std::nullopt;
}

}  // namespace detail

inline int cmd_eval(const CliConfig& cfg, const CommandOptions& opts, std::ostream& out,
                    std::ostream& err) {
  return guarded(err, [&]() -> int {
    const auto split = cfg.text("split");
    const Workspace ws = load_workspace(cfg, opts);
    const SplitView view = split_view(ws, split);
    int code = kOk;
    const auto ckpt = detail::load_checked(checkpoint_path(cfg, opts), ws.vocab.embedding_dim(),
                                           err, code);
    if (!ckpt) return code;
    ensure_dir(opts.out);

    const Probe trained = probe_prompt(ckpt->prompt, ws.encoder, view);
    io::write_text_file(opts.out / "eval.csv", metrics_csv(cfg, split, "trained", trained, true));
    out << "split " << split << " classes " << view.vocab.size() << " images "
        << view.data.size() << "\n";
    out << "trained top1 " << format_real(trained.eval.top1) << " top5 "
        << format_real(trained.eval.top5) << "\n";
    if (opts.with_control) {
      const SoftPrompt control = init_prompt(ckpt->prompt.length(), ckpt->prompt.embedding_dim(),
                                             cfg.integer("seed"));
      const Probe base = probe_prompt(control, ws.encoder, view);
      io::write_text_file(opts.out / "eval_control.csv",
                          metrics_csv(cfg, split, "control", base, true));
      out << "control top1 " << format_real(base.eval.top1) << " top5 "
          << format_real(base.eval.top5) << "\n";
    }
    return kOk;
  });
}

inline int cmd_probe(const CliConfig& cfg, const CommandOptions& opts, std::ostream& out,
                     std::ostream& err) {
  return guarded(err, [&]() -> int {
    const auto split = cfg.text("split");
    const Workspace ws = load_workspace(cfg, opts);
    const SplitView view = split_view(ws, split);
    int code = kOk;
    const auto ckpt = detail::load_checked(checkpoint_path(cfg, opts), ws.vocab.embedding_dim(),
                                           err, code);
    if (!ckpt) return code;
    ensure_dir(opts.out);
    const Probe p = probe_prompt(ckpt->prompt, ws.encoder, view);
    io::write_text_file(opts.out / "probe.csv", metrics_csv(cfg, split, "trained", p, false));
    out << "split " << split << " align " << format_real(p.align) << " uniform "
        << format_real(p.uniform) << "\n";
    return kOk;
  });
}

inline int cmd_grad_check(const CliConfig& cfg, const CommandOptions&, std::ostream& out,
                          std::ostream& err) {
  return guarded(err, [&]() -> int {
    GradCheckOptions options;
    options.h = cfg.real("grad_h");
    options.fixtures = cfg.integer("grad_fixtures");
    options.tolerance = cfg.real("grad_tolerance");
    options.tau = cfg.real("tau");
    options.seed = cfg.has("seed") ? cfg.integer("seed") : 0;
    const auto inject = cfg.text("grad_inject");
    if (inject == "flip_positive") {
      options.hooks.flip_positive_sign = true;
    } else if (inject != "none") {
      throw ConfigError("grad_inject must be 'none' or 'flip_positive'");
    }
    if (!(options.h > 0.0)) throw ConfigError("grad_h must be > 0");
    if (options.fixtures == 0) throw ConfigError("grad_fixtures must be >= 1");

    const GradCheckReport report = run_grad_check(options);
    std::size_t failures = 0;
    for (const auto& c : report.cases) {
      if (c.passed) continue;
      ++failures;
      err << "FAIL encoder=" << to_string(c.kind) << " K=" << c.K << " N=" << c.N
          << " fixture=" << c.fixture << " rel_err=" << format_real(c.relative_error) << "\n";
    }
    out << "cases " << report.cases.size() << " failures " << failures << "\n";
    out << "max relative error " << format_real(report.max_relative_error) << "\n";
    return report.passed() ? kOk : kGradCheckFailed;
  });
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

/// Ordinary least squares of y on x.
inline LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit fit;
  fit.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  fit.intercept = my - fit.slope * mx;
  fit.r_squared = (sxx > 0.0 && syy > 0.0) ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

struct MemorySweep {
  std::vector<MemoryReport> rows;
  std::optional<LinearFit> fit;
};

/// Measures one step per K on a universe with the configured dimensions and
/// at least max(K) classes.
inline MemorySweep sweep_memory(const CliConfig& cfg, std::span<const std::size_t> ks) {
  SyntheticSpec spec = synthetic_spec(cfg);
  const std::size_t max_k = *std::max_element(ks.begin(), ks.end());
  spec.n_classes = std::max(spec.n_classes, max_k);
  const SyntheticUniverse universe = generate_synthetic(spec);
  const FrozenTextEncoder encoder(encoder_kind(cfg), spec.e, spec.d, spec.encoder_seed);
  TrainConfig tc = train_config(cfg);
  tc.per_image_sampling = false;

  MemorySweep sweep;
  for (std::size_t k : ks) {
    tc.K = k;
    sweep.rows.push_back(measure_step_memory(tc, {universe.vocab, encoder, universe.pretrain}));
  }
  if (ks.size() >= 2) {
    std::vector<double> x, y;
    for (const auto& r : sweep.rows) {
      x.push_back(static_cast<double>(r.K));
      y.push_back(static_cast<double>(r.measured_peak_bytes));
    }
    sweep.fit = fit_line(x, y);
  }
  return sweep;
}

inline int cmd_bench_memory(const CliConfig& cfg, const CommandOptions& opts, std::ostream& out,
                            std::ostream& err) {
  return guarded(err, [&]() -> int {
    const auto ks = cfg.integer_list("bench_k");
    if (ks.empty()) throw ConfigError("bench_k is empty");
    ensure_dir(opts.out);
    const MemorySweep sweep = sweep_memory(cfg, ks);

    std::ostringstream csv;
    csv << csv_header(cfg) << "K,modeled_bytes,measured_peak\n";
    bool in_band = true;
    for (const auto& r : sweep.rows) {
      csv << r.K << "," << r.modeled_bytes_per_step << "," << r.measured_peak_bytes << "\n";
      const double ratio = static_cast<double>(r.measured_peak_bytes) /
                           static_cast<double>(r.modeled_bytes_per_step);
      out << "K=" << r.K << " modeled=" << r.modeled_bytes_per_step
          << " measured=" << r.measured_peak_bytes << " ratio=" << format_real(ratio) << "\n";
      if (ratio < 0.75 || ratio > 1.25) {
        err << "measured/modeled ratio " << format_real(ratio) << " outside [0.75, 1.25] at K="
            << r.K << "\n";
        in_band = false;
      }
    }
    io::write_text_file(opts.out / "memory.csv", csv.str());
    if (sweep.fit) {
      out << "slope " << format_real(sweep.fit->slope) << " bytes/class, R^2 "
          << format_real(sweep.fit->r_squared) << "\n";
    }
    return in_band ? kOk : kMemoryBenchFailed;
  });
}

struct AblationCell {
  std::string margin;
  std::string distribution;
  std::size_t K = 0;
  std::optional<Probe> result;
  std::string error;
};

inline int cmd_ablate(const CliConfig& cfg, const CommandOptions& opts, std::ostream& out,
                      std::ostream& err) {
  return guarded(err, [&]() -> int {
    const auto margins = cfg.list("ablate_margins");
    const auto dists = cfg.list("ablate_distributions");
    const auto ks = cfg.integer_list("ablate_k");
    if (margins.empty() || dists.empty() || ks.empty()) {
      throw ConfigError("ablation grid is empty");
    }
    for (const auto& m : margins) margin_setting(m);
    for (const auto& d : dists) proposal_kind(d);

    const TrainConfig base = train_config(cfg);
    const Workspace ws = load_workspace(cfg, opts);
    const SplitView train_view = make_split_view(ws.vocab, ws.pretrain);
    const SplitView eval_view = split_view(ws, cfg.text("split"));
    ensure_dir(opts.out);

    std::ostringstream csv;
    csv << csv_header(cfg) << "# split=" << cfg.text("split") << "\n";
    csv << "margin,distribution,K,top1,align,uniform,status\n";
    for (std::size_t k : ks) {
      for (const auto& dist : dists) {
        for (const auto& margin : margins) {
          AblationCell cell{margin, dist, k, std::nullopt, ""};
          TrainConfig tc = base;
          tc.K = k;
          tc.distribution = proposal_kind(dist);
          tc.margin_override = margin_setting(margin);
          try {
            const TrainResult res = train(tc, train_view.vocab, ws.encoder, train_view.data);
            cell.result = probe_prompt(res.checkpoint.prompt, ws.encoder, eval_view);
          } catch (const Error& e) {
            cell.error = e.what();
          }
          csv << margin << "," << dist << "," << k << ",";
          if (cell.result) {
            csv << format_real(cell.result->eval.top1) << "," << format_real(cell.result->align)
                << "," << format_real(cell.result->uniform) << ",ok\n";
            out << "margin=" << margin << " dist=" << dist << " K=" << k
                << " top1=" << format_real(cell.result->eval.top1)
                << " align=" << format_real(cell.result->align)
                << " uniform=" << format_real(cell.result->uniform) << "\n";
          } else {
            std::string reason = cell.error;
            std::replace(reason.begin(), reason.end(), ',', ';');
            csv << ",,,failed: " << reason << "\n";
            err << "cell margin=" << margin << " dist=" << dist << " K=" << k
                << " failed: " << cell.error << "\n";
          }
        }
      }
    }
    io::write_text_file(opts.out / "ablation.csv", csv.str());
    return kOk;
  });
}

}  // namespace pomp::cli
