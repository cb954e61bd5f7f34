#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "app/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config,-c", c.config, "INI run configuration");
  if (config_required) opt->required();
  opt->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override [run] seed");
  cmd->add_option("--out,-o", c.out, "override [run] out_dir");
}

sqz::app::RunConfig resolve(const Common& c) {
  sqz::app::RunConfig config = sqz::app::load_run_config(c.config);
  if (c.seed) config.seed = *c.seed;
  if (!c.out.empty()) config.out_dir = c.out;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sqzprune: filter pruning of SqueezeNet-style face descriptors"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("--quiet,-q", quiet, "suppress progress output");

  Common synth_o, train_o, prune_o, eval_o, report_o;
  std::string checkpoint;
  auto* synth = app.add_subcommand("synth", "write the synthetic face dataset");
  add_common(synth, synth_o, true);
  auto* train = app.add_subcommand("train", "train the model from scratch");
  add_common(train, train_o, true);
  auto* prune = app.add_subcommand("prune", "run (or resume) the iterative pruning session");
  add_common(prune, prune_o, true);
  auto* eval = app.add_subcommand("eval", "verification scores and EER for a checkpoint");
  add_common(eval, eval_o, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate (default: trained model)");
  auto* report = app.add_subcommand("report", "render SVG charts of a run directory");
  add_common(report, report_o, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::ostream* log = quiet ? nullptr : &std::cerr;
  try {
    if (*synth) {
      sqz::app::cmd_synth(resolve(synth_o), log);
    } else if (*train) {
      sqz::app::cmd_train(resolve(train_o), log);
    } else if (*prune) {
      sqz::app::cmd_prune(resolve(prune_o), log);
    } else if (*eval) {
      sqz::app::cmd_eval(resolve(eval_o), checkpoint, log);
    } else if (*report) {
      std::filesystem::path dir = report_o.out;
      if (dir.empty()) {
        if (report_o.config.empty()) {
          std::cerr << "report: pass --out <run dir> or --config\n";
          return 2;
        }
        dir = resolve(report_o).out_dir;
      }
      sqz::app::cmd_report(dir, log);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return sqz::app::exit_code_for(e);
  }
  return 0;
}
