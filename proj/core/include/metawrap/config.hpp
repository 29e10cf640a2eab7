#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metawrap/data.hpp"
#include "metawrap/train.hpp"

namespace metawrap {

// Command-line misuse (bad flags, missing paths, refusing to overwrite).
class UsageError : public Error {
public:
  using Error::Error;
};

// Experiment configuration: a flat list of dotted keys in a line-oriented
// `key = value` file ('#' starts a comment; lists are comma-separated).
// Precedence: built-in defaults < config file < --set overrides < dedicated
// flags (--seed, --out, --force). serialize_config() emits every key so the
// echoed file reproduces the run when fed back in.
struct RunConfig {
  // dataset.*
  std::string dataset_kind = "synthetic";  // synthetic | tsv
  std::string dataset_path;                // synthetic dir or tsv file
  int64_t max_seq_len = 100;

  // synth.*
  SyntheticConfig synth;

  // model.* / train.*
  TrainConfig train;

  // sweep.* (empty = no sweep)
  std::vector<double> sweep_mu;
  std::vector<double> sweep_beta;
  std::vector<int> sweep_n;

  // ablate.*
  std::vector<std::string> ablate_methods = {"attention_only", "m2", "gdmax", "meta_wrapper"};
  std::vector<uint64_t> ablate_seeds = {1, 2, 3};

  // bench.*
  int bench_steps = 120;
  int bench_warmup = 10;
  int64_t bench_infer_batch = 64;

  // gradcheck.*
  bool gradcheck_corrupt = false;  // negative-control hook: perturb one gradient

  // output.*
  std::string out_dir = "runs";
  std::string run_id;  // empty = derived from method and seed
  bool force = false;
};

RunConfig parse_config_file(const std::string& path);
// Applies one `key=value` override; unknown keys raise ConfigError.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
// Full round-trippable echo of the configuration.
std::string serialize_config(const RunConfig& cfg);

std::string pooling_name(Pooling p);
Pooling pooling_from_string(const std::string& name);
std::string lr_kind_name(LrSpec::Kind k);
LrSpec::Kind lr_kind_from_string(const std::string& name);

}  // namespace metawrap
