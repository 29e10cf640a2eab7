#pragma once

#include <string>

#include "metawrap/config.hpp"
#include "metawrap/data.hpp"

namespace metawrap {

// Experiment front-end shared by the CLI and the test suites. Each command
// takes the fully resolved configuration, writes its outputs under
// <output.dir>/<output.run_id>/ (refusing to reuse an existing directory
// unless output.force is set) and returns a process exit code (0 on
// success; errors are reported by throwing).

// Persist a generated synthetic study as a dataset directory:
//   data.tsv       one row per labeled instance (click = label 1)
//   vocab.json     id maps (identity for synthetic data)
//   manifest.json  generation settings and corpus statistics
void save_synthetic_dir(const std::string& dir, const SyntheticData& data,
                        const SyntheticConfig& cfg);

// Rebuild the exact split a manifest describes from its directory.
SplitDataset load_synthetic_dir(const std::string& dir);

// Materialize the configured dataset: a synthetic directory (when
// dataset.path points at a manifest), a freshly generated in-memory study
// (synthetic with no path), or a TSV interaction log.
SplitDataset load_dataset(const RunConfig& cfg);

int cmd_synth(const RunConfig& cfg);      // generate + save a synthetic study
int cmd_prepare(const RunConfig& cfg);    // load a TSV log, report split stats
int cmd_train(const RunConfig& cfg);      // single run or mu/beta/N sweep
int cmd_eval(const RunConfig& cfg);       // score a saved checkpoint
int cmd_ablate(const RunConfig& cfg);     // method comparison across seeds
int cmd_gradcheck(const RunConfig& cfg);  // derivative checks vs finite differences
int cmd_bench(const RunConfig& cfg);      // training-step and inference timings

}  // namespace metawrap
