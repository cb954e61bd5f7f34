#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sqz/dataset.hpp"
#include "sqz/model.hpp"
#include "sqz/training.hpp"

namespace sqz {

// Input channel `channel` of conv/fully-connected layer `layer` is fed by the
// group's filter (after concat offsets).
struct ConsumerSlot {
  int layer = 0;
  int channel = 0;

  friend bool operator==(const ConsumerSlot&, const ConsumerSlot&) = default;
};

// One prunable conv output filter. Members: the filter's weight row and bias
// element, plus gamma/beta/running_mean/running_var of the batch norm that
// directly follows the conv (bn_layer, -1 if none).
struct FilterGroup {
  int id = 0;
  int conv_layer = 0;
  int filter = 0;
  int bn_layer = -1;
  int activation_layer = 0;  // node whose output channel is zeroed for ablation
  std::vector<ConsumerSlot> consumers;
  std::size_t trainable_scalars = 0;
};

// One group per filter of every conv layer, ordered by (layer, filter).
// Throws SurgeryError naming the layer when a channel reaches a node it
// cannot be traced through.
std::vector<FilterGroup> group_model(const ModelGraph& model);

struct GroupAccounting {
  std::int64_t grouped_trainable = 0;
  std::int64_t grouped_frozen = 0;  // batch-norm running statistics
  std::int64_t unprunable_trainable = 0;
  std::int64_t unprunable_frozen = 0;
};
GroupAccounting account_groups(const ModelGraph& model, const std::vector<FilterGroup>& groups);

// The group's trainable members as (gradient, value) arrays in scoring order:
// weight row, bias, gamma, beta.
struct GroupSlots {
  std::vector<float> grad;
  std::vector<float> value;
};
GroupSlots gather_group(const ModelGraph& model, const FilterGroup& group);

// Sum over members of (g * w)^2, accumulated in double in array order.
double group_taylor_score(std::span<const float> grad, std::span<const float> value);

// Per-group first-order scores from the gradients currently stored in the
// model's parameters.
std::vector<double> taylor_contributions(const ModelGraph& model, const std::vector<FilterGroup>& groups);

class ImportanceTable {
 public:
  explicit ImportanceTable(std::size_t groups = 0) : sums_(groups, 0.0) {}

  void add_batch(std::span<const double> contributions);
  std::size_t groups() const { return sums_.size(); }
  int batches() const { return batches_; }
  const std::vector<double>& sums() const { return sums_; }
  // sum / batches; throws if no batch was scored.
  std::vector<double> averaged() const;

 private:
  std::vector<double> sums_;
  int batches_ = 0;
};

void score_batch(ImportanceTable& table, const std::vector<FilterGroup>& groups, const ModelGraph& model);

struct ScoringOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_size = 128;
  std::uint64_t seed = 1;
  std::uint64_t epoch = 0;
  Normalization norm;
};

struct ScoringResult {
  ImportanceTable table;
  double mean_loss = 0.0;
};

// One SGDM pass over `subset` with a fresh optimizer; every mini-batch's
// gradients are scored before the update.
ScoringResult scoring_epoch(ModelGraph& model, const std::vector<FilterGroup>& groups, const LabeledSet& subset,
                            const ScoringOptions& options);

// Scores divided by the L2 norm of their layer's scores.
std::vector<double> normalize_per_layer(std::span<const double> scores, const std::vector<FilterGroup>& groups);

struct VictimSelection {
  std::vector<int> groups;  // ascending (score, layer, filter)
  bool exhausted = false;
};

// The k lowest-scoring groups, never leaving a layer with fewer than `floor`
// filters. Returns every eligible group and sets `exhausted` when fewer than
// k qualify.
VictimSelection select_victims(std::span<const double> scores, const std::vector<FilterGroup>& groups,
                               const ModelGraph& model, int k, int floor);

// Removes the victims' filters, batch-norm channels and downstream input
// channels from a copy of `model`. The input model is never modified; throws
// SurgeryError naming the offending edge if the result is inconsistent.
ModelGraph surgery(const ModelGraph& model, const std::vector<FilterGroup>& groups, std::span<const int> victims);

// Zeroes the activation channels of `victims` (functional ablation).
ChannelMasks ablation_masks(const ModelGraph& model, const std::vector<FilterGroup>& groups,
                            std::span<const int> victims);

// Re-estimates batch-norm running statistics with train-mode passes over up
// to `max_batches` centre-cropped batches.
void recalibrate_batch_norm(ModelGraph& model, const LabeledSet& data, int batch_size, int max_batches,
                            const Normalization& norm);

struct PruneSchedule {
  double step_fraction = 0.01;
  double subset_fraction = 0.25;
  int retrain_every = 5;
  double max_total_fraction = 0.4;
  double scoring_lr = 0.01;
  int floor = 1;
  bool per_layer_normalization = false;
  bool recalibrate_bn = false;

  void validate() const;
  int iterations() const;  // round(max_total_fraction / step_fraction)
};

// Filters removed after `iteration` iterations: round-half-up of
// iteration * step * original, so the count falls linearly in the original
// filter count.
int cumulative_victims(const PruneSchedule& schedule, int original_filters, int iteration);

struct IterationRecord {
  int iteration = 0;
  double pruned_fraction = 0.0;   // nominal, iteration * step
  double removed_fraction = 0.0;  // actual removed / original filters
  ModelStats stats;
  int removed = 0;  // this iteration
  double minibatch_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  bool retrained = false;
  bool exhausted = false;
  std::map<std::string, double> extra;  // eval-hook columns
};

struct PruneHooks {
  // Extra log columns for a model state (e.g. verification EERs).
  std::function<std::map<std::string, double>(int iteration, ModelGraph& model)> evaluate;
  // Called once the iteration's model and record are final.
  std::function<void(const ModelGraph& model, const IterationRecord& record,
                     const std::vector<IterationRecord>& log)>
      on_iteration;
};

struct PruneSessionConfig {
  PruneSchedule schedule;
  TrainConfig retrain;  // also supplies batch size, momentum, normalization
  std::uint64_t seed = 1;
  int eval_every = 1;  // run hooks.evaluate every n iterations (and on the last)
};

// Continues a session from a completed iteration.
struct PruneResume {
  int original_filters = 0;
  std::vector<IterationRecord> log;  // rows 0..last completed iteration
};

// Iteration 0 records the unpruned model. Each iteration i then samples a
// subset, runs scoring_epoch, removes the selected victims, retrains the
// whole model when (i - 1) % retrain_every == 0 and evaluates. Stops at
// max_total_fraction or when victims run out. Every stream is derived from
// (seed, iteration), so a resumed session matches an uninterrupted one.
std::vector<IterationRecord> prune_session(ModelGraph& model, const LabeledSet& train_set,
                                           const LabeledSet& val_set, const PruneSessionConfig& config,
                                           const PruneHooks& hooks = {}, const PruneResume* resume = nullptr);

void write_prune_log_csv(const std::vector<IterationRecord>& log, const std::string& path);
std::vector<IterationRecord> read_prune_log_csv(const std::string& path);

// Mean cross-entropy over the batches (weighted by batch size) with optional
// channel masks. Train mode uses batch statistics without touching the
// running estimates.
double prediction_error(ModelGraph& model, const std::vector<Batch>& batches, NormMode mode,
                        const ChannelMasks* masks = nullptr);

constexpr std::size_t kBruteForceGroupCeiling = 300;

// (E(D, W) - E(D, W | group ablated))^2 with the group's activation channel
// forced to zero. Throws ConfigError on models above the group ceiling.
double brute_force_importance(ModelGraph& model, const FilterGroup& group, const std::vector<Batch>& batches,
                              NormMode mode = NormMode::kTrain);
std::vector<double> brute_force_all(ModelGraph& model, const std::vector<FilterGroup>& groups,
                                    const std::vector<Batch>& batches, NormMode mode = NormMode::kTrain);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

// |bottom(a) ∩ bottom(b)| / |bottom(a)|, where bottom takes the
// ceil(fraction * n) lowest entries (ties by index).
double bottom_overlap(std::span<const double> a, std::span<const double> b, double fraction);

}  // namespace sqz
