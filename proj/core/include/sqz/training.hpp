#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sqz/dataset.hpp"
#include "sqz/model.hpp"
#include "sqz/optim.hpp"
#include "sqz/rng.hpp"

namespace sqz {

struct TrainConfig {
  int batch_size = 128;
  double initial_lr = 0.01;
  std::vector<double> lr_ladder{0.005, 0.001, 0.0001};
  int plateau_patience = 3;
  double plateau_min_delta = 1e-3;  // relative
  double momentum = 0.9;
  double weight_decay = 0.0;
  int max_epochs = 30;
  std::uint64_t seed = 1;
  double val_fraction = 0.02;
  int min_images_per_class = 70;
  Normalization norm;

  // Throws ConfigError on an invalid combination.
  void validate() const;
};

struct TrainValSplit {
  LabeledSet train;
  LabeledSet val;
  std::vector<std::string> dropped_classes;
};

// Per class, ceil(val_fraction * n_c) images (at least 1) go to validation,
// picked by a seeded shuffle. Classes with fewer than min_images_per_class
// images are dropped and the rest relabelled 0.. in their original order.
TrainValSplit split_train_val(LabeledSet data, double val_fraction, int min_images_per_class,
                              std::uint64_t seed);

// Inclusive upper bounds of the random crop offsets on an h x w image.
struct CropRange {
  int max_top = 0;
  int max_left = 0;
};
CropRange crop_range(int height, int width, int crop = kCropSize);

// Shorter side to 129 (skipped when already there), uniform random 113x113
// crop, horizontal flip with probability 1/2.
ImageF augment_train(const ImageF& image, Rng& rng);

struct Batch {
  Tensor inputs;  // [N, 3, 113, 113]
  std::vector<int> labels;
};

// Builds a batch from items[indices]. With `augment` the images are randomly
// cropped and flipped, otherwise centre-cropped.
Batch make_batch(const LabeledSet& data, std::span<const std::size_t> indices, Rng* augment,
                 const Normalization& norm);

// Initial rate followed by the ladder. A validation loss counts as an
// improvement when it is below best * (1 - min_delta), where best is the
// lowest loss seen so far. After `patience` epochs without improvement the
// rate moves to the next rung (counter reset); on the last rung it stops.
class PlateauScheduler {
 public:
  enum class Action { kNone, kDecay, kStop };

  PlateauScheduler(double initial_lr, std::vector<double> ladder, int patience, double min_delta);

  Action observe(double val_loss);
  double lr() const { return rates_[rung_]; }
  std::size_t rung() const { return rung_; }
  int bad_epochs() const { return bad_; }

 private:
  std::vector<double> rates_;
  int patience_;
  double min_delta_;
  std::size_t rung_ = 0;
  int bad_ = 0;
  double best_;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double wall_seconds = 0.0;
  std::string event;  // "lr_drop", "stop" or empty
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Eval-mode loss and top-1 accuracy on centre crops.
EvalResult evaluate(ModelGraph& model, const LabeledSet& data, const Normalization& norm,
                    int batch_size = 64);

// Called after backward and before the optimizer step of each mini-batch;
// the model's parameter gradients hold this batch's gradient.
using GradHook = std::function<void(ModelGraph& model, double batch_loss)>;

struct EpochOptions {
  int batch_size = 128;
  std::uint64_t seed = 1;  // shuffle and augmentation streams
  std::uint64_t epoch = 0;
  Normalization norm;
  GradHook on_gradients;
};

// One shuffled pass over `data` (train-mode batch norm, SGDM steps).
// Trailing batches with fewer than 2 images are skipped. Returns the mean
// mini-batch loss and the number of batches through `batches`.
double train_epoch(ModelGraph& model, const LabeledSet& data, Sgdm<float>& optimizer,
                   const EpochOptions& options, int* batches = nullptr);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Epoch loop with the plateau schedule. NaN/Inf aborts with a NumericError
// naming the epoch, batch and learning rate.
std::vector<EpochRecord> train(ModelGraph& model, const LabeledSet& train_set, const LabeledSet& val_set,
                               const TrainConfig& config, const EpochCallback& on_epoch = {});

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path);

}  // namespace sqz
