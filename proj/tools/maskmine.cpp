// maskmine: config-driven liver/lesion segmentation with error-mask
// mining. Subcommands: synth, train, mine, eval, full, control.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "maskmine/commands.hpp"

namespace {

struct CliArgs {
  std::string config_path;
  long long seed = -1;
  bool overwrite = false;
  std::string device = "cpu";
  bool deterministic = false;
};

void add_common(CLI::App* cmd, CliArgs& args) {
  cmd->add_option("--config", args.config_path, "run config (JSON)")->required();
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_flag("--overwrite", args.overwrite, "regenerate existing datasets/artifacts");
  cmd->add_option("--device", args.device, "compute device")
      ->check(CLI::IsMember({"cpu", "accelerator"}));
  cmd->add_flag("--deterministic", args.deterministic,
                "bit-reproducible mode (the CPU backend always is; flag kept for parity)");
}

int run(const std::string& name, const CliArgs& args) {
  maskmine::RunConfig cfg = maskmine::load_run_config(args.config_path);
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  if (args.device == "accelerator")
    std::fprintf(stderr, "note: no accelerator backend built in; running on cpu\n");

  std::filesystem::path run_dir;
  if (name == "synth")
    run_dir = maskmine::cmd_synth(cfg, args.overwrite);
  else if (name == "train")
    run_dir = maskmine::cmd_train(cfg, args.overwrite);
  else if (name == "mine")
    run_dir = maskmine::cmd_mine(cfg, args.overwrite);
  else if (name == "eval")
    run_dir = maskmine::cmd_eval(cfg, args.overwrite);
  else if (name == "full")
    run_dir = maskmine::cmd_full(cfg, args.overwrite);
  else
    run_dir = maskmine::cmd_control(cfg, args.overwrite);

  std::printf("%s\n", run_dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"liver/lesion segmentation with error-mask mining"};
  app.require_subcommand(1);

  const char* names[] = {"synth", "train", "mine", "eval", "full", "control"};
  const char* descs[] = {"generate a synthetic dataset",
                         "initial training for the configured setup",
                         "mine errors and retrain from the latest checkpoints",
                         "evaluate the latest checkpoints and write a report",
                         "end-to-end: dataset, training, mining, evaluation",
                         "run both mining variants and compare error counts"};
  CliArgs args;
  for (int i = 0; i < 6; ++i) add_common(app.add_subcommand(names[i], descs[i]), args);

  CLI11_PARSE(app, argc, argv);

  std::string sub = app.get_subcommands().front()->get_name();
  try {
    return run(sub, args);
  } catch (const maskmine::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
