// Command-line front end: pomp <subcommand> [flags] [checkpoint]

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pomp/commands.hpp"

namespace {

using Command = int (*)(const pomp::CliConfig&, const pomp::cli::CommandOptions&, std::ostream&,
                        std::ostream&);

struct Flags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  bool with_control = false;
  std::string split;
  std::string checkpoint;
};

pomp::CliConfig resolve_config(const Flags& flags) {
  pomp::CliConfig cfg = flags.config_path.empty() ? pomp::CliConfig{}
                                                  : pomp::CliConfig::load(flags.config_path);
  for (const auto& assignment : flags.sets) cfg.set(assignment);
  if (flags.seed) cfg.set("seed=" + std::to_string(*flags.seed));
  if (!flags.split.empty()) cfg.set("split=" + flags.split);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sampled-softmax soft-prompt pre-training on synthetic features"};
  app.require_subcommand(1);

  Flags flags;
  const std::map<std::string, Command> commands = {
      {"gen-data", pomp::cli::cmd_gen_data},         {"pretrain", pomp::cli::cmd_pretrain},
      {"eval", pomp::cli::cmd_eval},                 {"probe", pomp::cli::cmd_probe},
      {"grad-check", pomp::cli::cmd_grad_check},     {"bench-memory", pomp::cli::cmd_bench_memory},
      {"ablate", pomp::cli::cmd_ablate},
  };
  const std::map<std::string, std::string> descriptions = {
      {"gen-data", "generate the synthetic feature universe"},
      {"pretrain", "train the soft prompt on the pretrain split"},
      {"eval", "zero-shot top-1/top-5 of a checkpoint"},
      {"probe", "alignment and uniformity of a checkpoint"},
      {"grad-check", "finite-difference audit of the analytic gradient"},
      {"bench-memory", "measured vs modeled step memory over K"},
      {"ablate", "margin x distribution x K grid"},
  };

  for (const auto& [name, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name, descriptions.at(name));
    sub->add_option("--config", flags.config_path, "key = value config file");
    sub->add_option("--set", flags.sets, "override one key (key=value), repeatable");
    sub->add_option("--seed", flags.seed, "master seed");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_flag("--with-control", flags.with_control, "also evaluate the initial prompt");
    sub->add_option("--split", flags.split, "pretrain | heldout")
        ->check(CLI::IsMember({"pretrain", "heldout"}));
    if (name == "eval" || name == "probe") {
      sub->add_option("checkpoint", flags.checkpoint, "checkpoint file");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : pomp::cli::kConfigError;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  pomp::CliConfig cfg;
  try {
    cfg = resolve_config(flags);
  } catch (const pomp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return pomp::cli::kConfigError;
  }

  pomp::cli::CommandOptions opts;
  opts.out = flags.out;
  opts.with_control = flags.with_control;
  if (!flags.checkpoint.empty()) opts.checkpoint = flags.checkpoint;
  return commands.at(name)(cfg, opts, std::cout, std::cerr);
}
