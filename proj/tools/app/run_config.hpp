#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sqz/pruning.hpp"
#include "sqz/synth.hpp"
#include "sqz/training.hpp"

namespace sqz::app {

// Everything a run needs. INI sections: [run] [data] [model] [train] [prune] [eval].
struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "runs/default";

  // Empty manifest means <out_dir>/data/manifest.csv (written by `synth`).
  std::filesystem::path manifest;
  SynthConfig synth;

  std::string model = "micro";  // micro | full | schedule
  int width_divisor = 8;
  std::filesystem::path schedule;  // for model = schedule

  TrainConfig train;

  PruneSchedule prune;
  int retrain_epochs = 4;
  int eval_every = 5;

  std::vector<int> per_template{1, 5};
  int window = 19;
  int eval_batch = 32;

  // Where a relative path in the file is resolved against.
  std::filesystem::path base_dir;

  // Throws ConfigError on an invalid combination.
  void validate() const;

  std::filesystem::path manifest_path() const;
  std::filesystem::path data_dir() const { return out_dir / "data"; }
  std::filesystem::path train_dir() const { return out_dir / "train"; }
  std::filesystem::path prune_dir() const { return out_dir / "prune"; }
  std::filesystem::path eval_dir() const { return out_dir / "eval"; }
  std::filesystem::path report_dir() const { return out_dir / "report"; }
  std::filesystem::path trained_checkpoint() const { return train_dir() / "model.sqzp"; }

  TrainConfig train_config() const;         // seed derived from the run seed
  TrainConfig retrain_config() const;       // train settings, retrain_epochs
  SynthConfig synth_config() const;
  PruneSessionConfig session_config() const;
};

// Unknown sections or keys and malformed values throw ConfigError naming the key.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

// Effective configuration in the same INI format; parse_run_config reads it back.
std::string format_run_config(const RunConfig& config);

}  // namespace sqz::app
