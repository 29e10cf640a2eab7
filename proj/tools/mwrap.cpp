// mwrap — experiment driver for wrapper-based user-interest feature
// selection in click-through-rate models.
//
// Every setting is a dotted config key. Precedence, lowest to highest:
// built-in defaults, --config file, --set overrides (in order), dedicated
// flags (--seed, --data, --out, --run-id, --force).
//
// Exit codes: 0 success, 1 usage/config/parse errors, 2 numerical
// divergence, 3 tolerance breach in gradient checks.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metawrap/commands.hpp"
#include "metawrap/config.hpp"

namespace {

int dispatch(const CLI::App& app, const metawrap::RunConfig& cfg) {
  for (const CLI::App* sub : app.get_subcommands()) {
    const std::string& name = sub->get_name();
    if (name == "synth") return metawrap::cmd_synth(cfg);
    if (name == "prepare") return metawrap::cmd_prepare(cfg);
    if (name == "train") return metawrap::cmd_train(cfg);
    if (name == "eval") return metawrap::cmd_eval(cfg);
    if (name == "ablate") return metawrap::cmd_ablate(cfg);
    if (name == "gradcheck") return metawrap::cmd_gradcheck(cfg);
    if (name == "bench") return metawrap::cmd_bench(cfg);
  }
  throw metawrap::UsageError("no subcommand given");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wrapper-based feature selection experiments for CTR prediction"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, data_path, out_dir, run_id;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool force = false;

  const auto* opt_config =
      app.add_option("--config", config_path, "configuration file (key = value lines)")
          ->check(CLI::ExistingFile);
  app.add_option("--set", sets, "override one config key, e.g. --set train.mu=0.3")
      ->type_name("KEY=VALUE");
  const auto* opt_seed =
      app.add_option("--seed", seed, "seed for both training and data generation");
  const auto* opt_data = app.add_option("--data", data_path, "dataset path (dataset.path)");
  const auto* opt_out = app.add_option("--out", out_dir, "output root (output.dir)");
  const auto* opt_run = app.add_option("--run-id", run_id, "run directory name (output.run_id)");
  app.add_flag("--force", force, "overwrite an existing output directory");

  app.add_subcommand("synth", "generate a synthetic interest-recovery dataset directory");
  app.add_subcommand("prepare", "load a TSV interaction log and report split statistics");
  app.add_subcommand("train", "train one configuration or a mu/beta/N sweep");
  app.add_subcommand("eval", "score a saved checkpoint on the configured dataset");
  app.add_subcommand("ablate", "compare methods across seeds on one dataset");
  app.add_subcommand("gradcheck", "verify gradients and curvature against finite differences");
  app.add_subcommand("bench", "time optimizer steps and inference batches");

  CLI11_PARSE(app, argc, argv);

  try {
    metawrap::RunConfig cfg;
    if (opt_config->count() > 0) cfg = metawrap::parse_config_file(config_path);
    for (const std::string& kv : sets) {
      const size_t eq = kv.find('=');
      if (eq == std::string::npos || eq == 0)
        throw metawrap::UsageError("--set expects key=value, got '" + kv + "'");
      metawrap::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (opt_seed->count() > 0) {
      cfg.train.seed = seed;
      cfg.synth.seed = seed;
    }
    if (opt_data->count() > 0) cfg.dataset_path = data_path;
    if (opt_out->count() > 0) cfg.out_dir = out_dir;
    if (opt_run->count() > 0) cfg.run_id = run_id;
    if (force) cfg.force = true;

    return dispatch(app, cfg);
  } catch (const metawrap::ToleranceError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  } catch (const metawrap::NumericError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const metawrap::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
