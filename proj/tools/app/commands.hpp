#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "run_config.hpp"
#include "sqz/pruning.hpp"
#include "sqz/verification.hpp"

namespace sqz::app {

// Run directory layout under RunConfig::out_dir:
//
//   config.ini                 effective configuration of the last command
//   data/manifest.csv          synthetic dataset (synth)
//   train/model.sqzp(.json)    trained checkpoint, history.csv, summary.json
//   prune/iter_NNN.sqzp        per-iteration checkpoints, log.csv, config.ini
//   eval/<checkpoint>/         scores_KvK.csv + eer_KvK.json per template size
//   report/*.svg

struct TrainingData {
  Manifest manifest;
  TrainValSplit split;
};

// Train split of the manifest divided into train/val with the run seed. The
// split is a pure function of the config, so train and prune see the same one.
TrainingData load_training_data(const RunConfig& config);

ModelGraph build_model(const RunConfig& config, int num_classes);

// Pooled and mean-per-pair EER columns (eer_KvK, mean_pair_eer_KvK) for
// every configured template size on the test split.
class VerificationProbe {
 public:
  VerificationProbe(const RunConfig& config, Manifest manifest);

  std::map<std::string, double> columns(ModelGraph& model) const;
  std::map<int, VerificationReport> reports(ModelGraph& model, std::map<int, std::vector<ScoreSet>>* scores) const;

  const PoseSet& poses() const { return poses_; }
  const Manifest& manifest() const { return manifest_; }

 private:
  RunConfig config_;
  Manifest manifest_;
  PoseSet poses_;
};

Manifest cmd_synth(const RunConfig& config, std::ostream* log = nullptr);
std::vector<EpochRecord> cmd_train(const RunConfig& config, std::ostream* log = nullptr);
// Resumes from prune/log.csv when it exists.
std::vector<IterationRecord> cmd_prune(const RunConfig& config, std::ostream* log = nullptr);
// Default checkpoint is the trained model; outputs go to eval/<checkpoint stem>/.
std::map<int, VerificationReport> cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint = {},
                                           std::ostream* log = nullptr);
// Renders the SVG charts of a run directory and returns the files written.
std::vector<std::filesystem::path> cmd_report(const std::filesystem::path& run_dir, std::ostream* log = nullptr);

std::filesystem::path iteration_checkpoint(const RunConfig& config, int iteration);

std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path);

// Process exit code for an exception: 2 config, 3 data, 4 numeric, 5 I/O, 1 otherwise.
int exit_code_for(const std::exception& e);

}  // namespace sqz::app
