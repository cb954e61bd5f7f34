#include "sqz/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "sqz/errors.hpp"
#include "sqz/ops.hpp"

namespace sqz {

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(initial_lr > 0.0)) throw ConfigError("initial_lr must be positive");
  double prev = initial_lr;
  for (double lr : lr_ladder) {
    if (!(lr > 0.0 && lr < prev)) throw ConfigError("lr_ladder must be positive and strictly decreasing");
    prev = lr;
  }
  if (plateau_patience < 1) throw ConfigError("plateau_patience must be at least 1");
  if (!(plateau_min_delta >= 0.0 && plateau_min_delta < 1.0)) {
    throw ConfigError("plateau_min_delta must lie in [0, 1)");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (min_images_per_class < 0) throw ConfigError("min_images_per_class must be non-negative");
  for (float s : norm.stddev) {
    if (!(s > 0.0f)) throw ConfigError("normalization std must be positive");
  }
}

TrainValSplit split_train_val(LabeledSet data, double val_fraction, int min_images_per_class,
                              std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.items.size(); ++i) by_class[data.items[i].label].push_back(i);

  TrainValSplit out;
  std::vector<int> new_label(data.class_names.size(), -1);
  for (auto& [label, members] : by_class) {
    const auto& name = data.class_names.at(static_cast<std::size_t>(label));
    if (static_cast<int>(members.size()) < min_images_per_class) {
      out.dropped_classes.push_back(name);
      continue;
    }
    if (members.size() < 2) {
      throw DataError("class '" + name + "' has a single image; it cannot contribute to both train and validation");
    }
    new_label[static_cast<std::size_t>(label)] = static_cast<int>(out.train.class_names.size());
    out.train.class_names.push_back(name);
  }
  if (out.train.class_names.empty()) throw DataError("no class has at least " + std::to_string(min_images_per_class) + " images");
  out.val.class_names = out.train.class_names;

  for (auto& [label, members] : by_class) {
    const int nl = new_label[static_cast<std::size_t>(label)];
    if (nl < 0) continue;
    std::vector<std::size_t> order = members;
    Rng rng = make_rng(seed, "val-split", static_cast<std::uint64_t>(label));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(members.size()) - 1e-9)));
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::sort(val_idx.begin(), val_idx.end());
    for (std::size_t i : members) {
      LabeledImage item = std::move(data.items[i]);
      item.label = nl;
      if (std::binary_search(val_idx.begin(), val_idx.end(), i)) {
        out.val.items.push_back(std::move(item));
      } else {
        out.train.items.push_back(std::move(item));
      }
    }
  }
  return out;
}

CropRange crop_range(int height, int width, int crop_size) {
  if (height < crop_size || width < crop_size) {
    throw DataError("image " + std::to_string(height) + "x" + std::to_string(width) + " smaller than the " +
                    std::to_string(crop_size) + " crop");
  }
  return {height - crop_size, width - crop_size};
}

ImageF augment_train(const ImageF& image, Rng& rng) {
  const auto [h, w] = short_side_size(image.height, image.width, kResizeShortSide);
  const ImageF resized = (h == image.height && w == image.width) ? image : resize_bilinear(image, h, w);
  const CropRange range = crop_range(resized.height, resized.width);
  const int top = std::uniform_int_distribution<int>(0, range.max_top)(rng);
  const int left = std::uniform_int_distribution<int>(0, range.max_left)(rng);
  const bool flip = std::bernoulli_distribution(0.5)(rng);
  ImageF out = crop(resized, top, left, kCropSize, kCropSize);
  return flip ? hflip(out) : out;
}

Batch make_batch(const LabeledSet& data, std::span<const std::size_t> indices, Rng* augment,
                 const Normalization& norm) {
  if (indices.empty()) throw DataError("empty batch");
  constexpr std::size_t kPlane = static_cast<std::size_t>(kCropSize) * kCropSize;
  Batch b{Tensor({indices.size(), 3, kCropSize, kCropSize}), {}};
  b.labels.reserve(indices.size());
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const LabeledImage& item = data.items.at(indices[n]);
    std::span<float> dst(b.inputs.data() + n * 3 * kPlane, 3 * kPlane);
    if (augment) {
      normalize_into(augment_train(item.image, *augment), norm, dst);
    } else {
      const Tensor t = eval_preprocess_resized(item.image, norm);
      std::copy(t.values().begin(), t.values().end(), dst.begin());
    }
    b.labels.push_back(item.label);
  }
  return b;
}

PlateauScheduler::PlateauScheduler(double initial_lr, std::vector<double> ladder, int patience, double min_delta)
    : patience_(patience), min_delta_(min_delta), best_(std::numeric_limits<double>::infinity()) {
  rates_.push_back(initial_lr);
  rates_.insert(rates_.end(), ladder.begin(), ladder.end());
}

PlateauScheduler::Action PlateauScheduler::observe(double val_loss) {
  if (val_loss < best_ * (1.0 - min_delta_)) {
    bad_ = 0;
  } else {
    ++bad_;
  }
  best_ = std::min(best_, val_loss);
  if (bad_ < patience_) return Action::kNone;
  if (rung_ + 1 < rates_.size()) {
    ++rung_;
    bad_ = 0;
    return Action::kDecay;
  }
  return Action::kStop;
}

EvalResult evaluate(ModelGraph& model, const LabeledSet& data, const Normalization& norm, int batch_size) {
  if (data.items.empty()) throw DataError("evaluation set is empty");
  std::vector<std::size_t> idx(data.items.size());
  std::iota(idx.begin(), idx.end(), 0);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    std::span<const std::size_t> part(idx.data() + start, end - start);
    const Batch b = make_batch(data, part, nullptr, norm);
    Tape<float> tape;
    tape.set_grad_enabled(false);
    const auto out = forward(tape, model, b.inputs, {NormMode::kEval, false, nullptr});
    const auto loss = softmax_cross_entropy(out.logits, std::span<const int>(b.labels));
    loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(part.size());
    const auto pred = argmax_rows(out.logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
  }
  const double n = static_cast<double>(idx.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

double train_epoch(ModelGraph& model, const LabeledSet& data, Sgdm<float>& optimizer,
                   const EpochOptions& options, int* batches) {
  if (data.items.empty()) throw DataError("training set is empty");
  std::vector<std::size_t> order(data.items.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = make_rng(options.seed, "shuffle", options.epoch);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  Rng aug_rng = make_rng(options.seed, "augment", options.epoch);

  const auto bs = static_cast<std::size_t>(options.batch_size);
  double loss_sum = 0.0;
  int count = 0;
  auto params = model.trainable_parameters();
  for (std::size_t start = 0; start + 2 <= order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    std::span<const std::size_t> part(order.data() + start, end - start);
    const Batch b = make_batch(data, part, &aug_rng, options.norm);
    model.zero_grad();
    Tape<float> tape;
    double batch_loss = 0.0;
    try {
      const auto out = forward(tape, model, b.inputs, {NormMode::kTrain, true, nullptr});
      const auto loss = softmax_cross_entropy(out.logits, std::span<const int>(b.labels));
      batch_loss = static_cast<double>(loss.value().item());
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("non-finite value in epoch " + std::to_string(options.epoch + 1) + ", batch " +
                         std::to_string(count + 1) + " at lr " +
                         std::to_string(optimizer.options().learning_rate) + ": " + e.what());
    }
    if (options.on_gradients) options.on_gradients(model, batch_loss);
    optimizer.step(params);
    loss_sum += batch_loss;
    ++count;
  }
  if (count == 0) throw DataError("training set yields no batch of at least 2 images");
  if (batches) *batches = count;
  return loss_sum / count;
}

std::vector<EpochRecord> train(ModelGraph& model, const LabeledSet& train_set, const LabeledSet& val_set,
                               const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.num_classes() != model.num_classes()) {
    throw ConfigError("model has " + std::to_string(model.num_classes()) + " classes but the training set has " +
                      std::to_string(train_set.num_classes()));
  }
  PlateauScheduler sched(config.initial_lr, config.lr_ladder, config.plateau_patience, config.plateau_min_delta);
  Sgdm<float> opt({config.initial_lr, config.momentum, config.weight_decay});
  std::vector<EpochRecord> history;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = sched.lr();
    opt.set_learning_rate(rec.lr);
    EpochOptions eo{config.batch_size, config.seed, static_cast<std::uint64_t>(epoch), config.norm, {}};
    rec.train_loss = train_epoch(model, train_set, opt, eo);
    const EvalResult ev = evaluate(model, val_set, config.norm);
    if (!std::isfinite(ev.loss)) {
      throw NumericError("validation loss is not finite after epoch " + std::to_string(rec.epoch) + " at lr " +
                         std::to_string(rec.lr));
    }
    rec.val_loss = ev.loss;
    rec.val_acc = ev.accuracy;
    const auto action = sched.observe(ev.loss);
    if (action == PlateauScheduler::Action::kDecay) rec.event = "lr_drop";
    if (action == PlateauScheduler::Action::kStop) rec.event = "stop";
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (action == PlateauScheduler::Action::kStop) break;
  }
  return history;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << "epoch,lr,train_loss,val_loss,val_acc,wall_seconds,event\n";
  out.precision(9);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_acc << ','
        << r.wall_seconds << ',' << r.event << '\n';
  }
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace sqz
