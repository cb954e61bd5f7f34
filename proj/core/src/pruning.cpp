#include "sqz/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "sqz/errors.hpp"
#include "sqz/ops.hpp"

namespace sqz {

namespace {

void trace_channel(const ModelGraph& model, const std::vector<std::vector<int>>& consumers,
                   const std::vector<int>& channels, const std::string& origin, int node, int channel,
                   std::vector<ConsumerSlot>& out) {
  for (int next : consumers[static_cast<std::size_t>(node)]) {
    const LayerSpec& l = model.layer(next);
    switch (l.kind) {
      case LayerKind::kRelu:
      case LayerKind::kMaxPool:
      case LayerKind::kGlobalAvgPool:
      case LayerKind::kSoftmax:
        trace_channel(model, consumers, channels, origin, next, channel, out);
        break;
      case LayerKind::kConcat: {
        int offset = 0;
        for (int in : l.inputs) {
          if (in == node) trace_channel(model, consumers, channels, origin, next, channel + offset, out);
          offset += channels[static_cast<std::size_t>(in)];
        }
        break;
      }
      case LayerKind::kConv:
      case LayerKind::kFullyConnected:
        out.push_back({next, channel});
        break;
      default:
        throw SurgeryError("cannot trace filters of " + origin + " through layer " + l.name + " (" +
                           std::string(to_string(l.kind)) + ")");
    }
  }
}

// Copy of `t` without the listed (sorted, unique) indices along `axis`.
Tensor remove_indices(const Tensor& t, std::size_t axis, const std::vector<int>& drop) {
  const Shape& s = t.shape();
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  const std::size_t n = s[axis];
  std::vector<char> keep(n, 1);
  for (int d : drop) keep.at(static_cast<std::size_t>(d)) = 0;
  const std::size_t kept = n - drop.size();
  if (kept == 0) throw SurgeryError("surgery would remove every channel of a tensor");
  Shape ns = s;
  ns[axis] = kept;
  std::vector<float> data;
  data.reserve(outer * kept * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!keep[i]) continue;
      const float* src = t.data() + (o * n + i) * inner;
      data.insert(data.end(), src, src + inner);
    }
  }
  return Tensor(std::move(ns), std::move(data));
}

void drop_param(LayerSpec& layer, const char* name, std::size_t axis, const std::vector<int>& drop) {
  NamedParam& p = layer.param(name);
  p.param = Parameter<float>(remove_indices(p.param.value, axis, drop));
}

std::vector<int> sorted_unique(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::vector<FilterGroup> group_model(const ModelGraph& model) {
  const auto consumers = model.consumers();
  const auto channels = model.infer_channels();
  std::vector<FilterGroup> groups;
  for (int i = 0; i < model.size(); ++i) {
    const LayerSpec& conv = model.layer(i);
    if (conv.kind != LayerKind::kConv) continue;
    int bn = -1;
    int act = i;
    // conv -> [batch norm] -> [relu] is the per-filter chain.
    auto sole_consumer = [&](int node) {
      const auto& c = consumers[static_cast<std::size_t>(node)];
      return c.size() == 1 ? c[0] : -1;
    };
    if (int n = sole_consumer(act); n >= 0 && model.layer(n).kind == LayerKind::kBatchNorm) {
      bn = n;
      act = n;
    }
    if (int n = sole_consumer(act); n >= 0 && model.layer(n).kind == LayerKind::kRelu) act = n;
    if (consumers[static_cast<std::size_t>(act)].empty()) {
      throw SurgeryError("conv layer " + conv.name + " output is not consumed");
    }
    const std::size_t row = conv.param("weight").param.value.size() / static_cast<std::size_t>(conv.channels);
    for (int f = 0; f < conv.channels; ++f) {
      FilterGroup g;
      g.id = static_cast<int>(groups.size());
      g.conv_layer = i;
      g.filter = f;
      g.bn_layer = bn;
      g.activation_layer = act;
      g.trainable_scalars = row + 1 + (bn >= 0 ? 2 : 0);
      trace_channel(model, consumers, channels, conv.name, act, f, g.consumers);
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

GroupAccounting account_groups(const ModelGraph& model, const std::vector<FilterGroup>& groups) {
  GroupAccounting acc;
  std::set<int> covered;
  for (const auto& g : groups) {
    acc.grouped_trainable += static_cast<std::int64_t>(g.trainable_scalars);
    covered.insert(g.conv_layer);
    if (g.bn_layer >= 0) {
      acc.grouped_frozen += 2;
      covered.insert(g.bn_layer);
    }
  }
  for (int i = 0; i < model.size(); ++i) {
    if (covered.count(i)) continue;
    for (const auto& p : model.layer(i).params) {
      (p.trainable ? acc.unprunable_trainable : acc.unprunable_frozen) +=
          static_cast<std::int64_t>(p.param.value.size());
    }
  }
  return acc;
}

GroupSlots gather_group(const ModelGraph& model, const FilterGroup& group) {
  const LayerSpec& conv = model.layer(group.conv_layer);
  const auto& w = conv.param("weight").param;
  const auto& b = conv.param("bias").param;
  const std::size_t row = w.value.size() / static_cast<std::size_t>(conv.channels);
  const auto f = static_cast<std::size_t>(group.filter);
  GroupSlots s;
  s.grad.assign(w.grad.data() + f * row, w.grad.data() + (f + 1) * row);
  s.value.assign(w.value.data() + f * row, w.value.data() + (f + 1) * row);
  s.grad.push_back(b.grad[f]);
  s.value.push_back(b.value[f]);
  if (group.bn_layer >= 0) {
    const LayerSpec& bn = model.layer(group.bn_layer);
    for (const char* name : {"gamma", "beta"}) {
      const auto& p = bn.param(name).param;
      s.grad.push_back(p.grad[f]);
      s.value.push_back(p.value[f]);
    }
  }
  return s;
}

double group_taylor_score(std::span<const float> grad, std::span<const float> value) {
  if (grad.size() != value.size()) {
    throw ShapeError("taylor score: " + std::to_string(grad.size()) + " gradients for " +
                     std::to_string(value.size()) + " parameters");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double p = static_cast<double>(grad[i]) * static_cast<double>(value[i]);
    sum += p * p;
  }
  return sum;
}

std::vector<double> taylor_contributions(const ModelGraph& model, const std::vector<FilterGroup>& groups) {
  std::vector<double> out(groups.size(), 0.0);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const FilterGroup& g = groups[gi];
    const LayerSpec& conv = model.layer(g.conv_layer);
    const auto& w = conv.param("weight").param;
    const auto& b = conv.param("bias").param;
    if (w.grad.shape() != w.value.shape() || b.grad.shape() != b.value.shape()) {
      throw ShapeError("taylor score: gradient shape differs from parameter shape in " + conv.name);
    }
    const std::size_t row = w.value.size() / static_cast<std::size_t>(conv.channels);
    const auto f = static_cast<std::size_t>(g.filter);
    double sum = 0.0;
    auto add = [&sum](float gv, float wv) {
      const double p = static_cast<double>(gv) * static_cast<double>(wv);
      sum += p * p;
    };
    for (std::size_t k = f * row; k < (f + 1) * row; ++k) add(w.grad[k], w.value[k]);
    add(b.grad[f], b.value[f]);
    if (g.bn_layer >= 0) {
      const LayerSpec& bn = model.layer(g.bn_layer);
      for (const char* name : {"gamma", "beta"}) {
        const auto& p = bn.param(name).param;
        add(p.grad[f], p.value[f]);
      }
    }
    out[gi] = sum;
  }
  return out;
}

void ImportanceTable::add_batch(std::span<const double> contributions) {
  if (contributions.size() != sums_.size()) {
    throw ShapeError("importance table has " + std::to_string(sums_.size()) + " groups, got " +
                     std::to_string(contributions.size()) + " scores");
  }
  for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += contributions[i];
  ++batches_;
}

std::vector<double> ImportanceTable::averaged() const {
  if (batches_ == 0) throw Error("importance table has no scored mini-batches");
  std::vector<double> out(sums_.size());
  for (std::size_t i = 0; i < sums_.size(); ++i) out[i] = sums_[i] / batches_;
  return out;
}

void score_batch(ImportanceTable& table, const std::vector<FilterGroup>& groups, const ModelGraph& model) {
  const auto c = taylor_contributions(model, groups);
  table.add_batch(c);
}

ScoringResult scoring_epoch(ModelGraph& model, const std::vector<FilterGroup>& groups, const LabeledSet& subset,
                            const ScoringOptions& options) {
  if (subset.items.empty()) throw DataError("scoring subset is empty");
  ScoringResult r{ImportanceTable(groups.size()), 0.0};
  Sgdm<float> opt({options.learning_rate, options.momentum, options.weight_decay});
  EpochOptions eo;
  eo.batch_size = options.batch_size;
  eo.seed = options.seed;
  eo.epoch = options.epoch;
  eo.norm = options.norm;
  eo.on_gradients = [&](ModelGraph& m, double) { score_batch(r.table, groups, m); };
  r.mean_loss = train_epoch(model, subset, opt, eo);
  return r;
}

std::vector<double> normalize_per_layer(std::span<const double> scores, const std::vector<FilterGroup>& groups) {
  std::map<int, double> norm2;
  for (std::size_t i = 0; i < groups.size(); ++i) norm2[groups[i].conv_layer] += scores[i] * scores[i];
  std::vector<double> out(scores.begin(), scores.end());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const double n = std::sqrt(norm2[groups[i].conv_layer]);
    if (n > 0.0) out[i] /= n;
  }
  return out;
}

VictimSelection select_victims(std::span<const double> scores, const std::vector<FilterGroup>& groups,
                               const ModelGraph& model, int k, int floor) {
  if (k < 1) throw ConfigError("victim count must be at least 1");
  if (scores.size() != groups.size()) throw ShapeError("one score per filter group expected");
  std::vector<int> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& ga = groups[static_cast<std::size_t>(a)];
    const auto& gb = groups[static_cast<std::size_t>(b)];
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa < sb;
    if (ga.conv_layer != gb.conv_layer) return ga.conv_layer < gb.conv_layer;
    return ga.filter < gb.filter;
  });
  std::map<int, int> remaining;
  for (const auto& g : groups) remaining[g.conv_layer] = model.layer(g.conv_layer).channels;
  VictimSelection sel;
  for (int gi : order) {
    if (static_cast<int>(sel.groups.size()) == k) break;
    int& left = remaining[groups[static_cast<std::size_t>(gi)].conv_layer];
    if (left - 1 < floor) continue;
    --left;
    sel.groups.push_back(gi);
  }
  sel.exhausted = static_cast<int>(sel.groups.size()) < k;
  return sel;
}

ModelGraph surgery(const ModelGraph& model, const std::vector<FilterGroup>& groups, std::span<const int> victims) {
  std::map<int, std::vector<int>> filters;
  std::map<int, int> bn_of;
  std::map<int, std::vector<int>> inputs;
  std::set<int> seen;
  for (int v : victims) {
    if (v < 0 || static_cast<std::size_t>(v) >= groups.size()) {
      throw SurgeryError("victim " + std::to_string(v) + " is not a filter group of this model");
    }
    if (!seen.insert(v).second) throw SurgeryError("victim " + std::to_string(v) + " listed twice");
    const FilterGroup& g = groups[static_cast<std::size_t>(v)];
    if (g.conv_layer < 0 || g.conv_layer >= model.size() || model.layer(g.conv_layer).kind != LayerKind::kConv ||
        g.filter < 0 || g.filter >= model.layer(g.conv_layer).channels) {
      throw SurgeryError("filter group " + std::to_string(v) + " does not match the model");
    }
    filters[g.conv_layer].push_back(g.filter);
    bn_of[g.conv_layer] = g.bn_layer;
    for (const auto& c : g.consumers) inputs[c.layer].push_back(c.channel);
  }

  ModelGraph out = model;
  for (auto& [layer, list] : filters) {
    const auto drop = sorted_unique(list);
    LayerSpec& conv = out.layer(layer);
    if (static_cast<int>(drop.size()) >= conv.channels) {
      throw SurgeryError("surgery would remove every filter of " + conv.name);
    }
    drop_param(conv, "weight", 0, drop);
    drop_param(conv, "bias", 0, drop);
    conv.channels -= static_cast<int>(drop.size());
    if (const int bn = bn_of[layer]; bn >= 0) {
      for (const char* p : {"gamma", "beta", "running_mean", "running_var"}) drop_param(out.layer(bn), p, 0, drop);
    }
  }
  for (auto& [layer, list] : inputs) {
    drop_param(out.layer(layer), "weight", 1, sorted_unique(list));
  }
  out.validate();
  return out;
}

ChannelMasks ablation_masks(const ModelGraph& model, const std::vector<FilterGroup>& groups,
                            std::span<const int> victims) {
  const auto channels = model.infer_channels();
  ChannelMasks masks;
  for (int v : victims) {
    const FilterGroup& g = groups.at(static_cast<std::size_t>(v));
    auto& m = masks[g.activation_layer];
    if (m.empty()) m.assign(static_cast<std::size_t>(channels[static_cast<std::size_t>(g.activation_layer)]), 1.0f);
    m.at(static_cast<std::size_t>(g.filter)) = 0.0f;
  }
  return masks;
}

void recalibrate_batch_norm(ModelGraph& model, const LabeledSet& data, int batch_size, int max_batches,
                            const Normalization& norm) {
  std::vector<std::size_t> idx(data.items.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto bs = static_cast<std::size_t>(batch_size);
  int done = 0;
  for (std::size_t start = 0; start + 2 <= idx.size() && done < max_batches; start += bs, ++done) {
    const std::size_t end = std::min(idx.size(), start + bs);
    const Batch b = make_batch(data, std::span<const std::size_t>(idx.data() + start, end - start), nullptr, norm);
    Tape<float> tape;
    tape.set_grad_enabled(false);
    forward(tape, model, b.inputs, {NormMode::kTrain, true, nullptr});
  }
}

void PruneSchedule::validate() const {
  if (!(step_fraction > 0.0 && step_fraction < 1.0)) throw ConfigError("step_fraction must lie in (0, 1)");
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) throw ConfigError("subset_fraction must lie in (0, 1]");
  if (retrain_every < 0) throw ConfigError("retrain_every must be non-negative (0 disables retraining)");
  if (!(max_total_fraction > 0.0 && max_total_fraction < 1.0)) {
    throw ConfigError("max_total_fraction must lie in (0, 1)");
  }
  if (!(scoring_lr >= 0.0)) throw ConfigError("scoring learning rate must be non-negative");
  if (floor < 1) throw ConfigError("per-layer floor must be at least 1");
  if (iterations() < 1) throw ConfigError("max_total_fraction is below one pruning step");
}

int PruneSchedule::iterations() const {
  return static_cast<int>(std::lround(max_total_fraction / step_fraction));
}

int cumulative_victims(const PruneSchedule& schedule, int original_filters, int iteration) {
  const double x = static_cast<double>(iteration) * schedule.step_fraction * original_filters;
  return static_cast<int>(std::floor(x + 0.5 + 1e-9));
}

namespace {

LabeledSet sample_subset(const LabeledSet& data, double fraction, std::uint64_t seed, int iteration) {
  std::vector<std::size_t> idx(data.items.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, "prune-subset", static_cast<std::uint64_t>(iteration));
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size()))), std::min<std::size_t>(2, idx.size()),
      idx.size());
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  LabeledSet out;
  out.class_names = data.class_names;
  out.items.reserve(n);
  for (std::size_t i : idx) out.items.push_back(data.items[i]);
  return out;
}

}  // namespace

std::vector<IterationRecord> prune_session(ModelGraph& model, const LabeledSet& train_set,
                                           const LabeledSet& val_set, const PruneSessionConfig& config,
                                           const PruneHooks& hooks, const PruneResume* resume) {
  const PruneSchedule& sched = config.schedule;
  sched.validate();
  config.retrain.validate();
  if (config.eval_every < 1) throw ConfigError("eval_every must be at least 1");
  const int n_iter = sched.iterations();

  std::vector<IterationRecord> log;
  int original = 0;
  auto finish = [&](IterationRecord rec, bool run_eval) {
    const EvalResult ev = evaluate(model, val_set, config.retrain.norm);
    rec.val_loss = ev.loss;
    rec.val_accuracy = ev.accuracy;
    rec.stats = count_stats(model);
    rec.removed_fraction = static_cast<double>(original - rec.stats.total_filters) / original;
    if (run_eval && hooks.evaluate) rec.extra = hooks.evaluate(rec.iteration, model);
    log.push_back(std::move(rec));
    if (hooks.on_iteration) hooks.on_iteration(model, log.back(), log);
  };

  if (resume != nullptr) {
    if (resume->log.empty()) throw ConfigError("cannot resume a pruning session without log rows");
    log = resume->log;
    original = resume->original_filters;
  } else {
    original = static_cast<int>(count_stats(model).total_filters);
    IterationRecord base;
    base.iteration = 0;
    finish(base, true);
  }
  if (log.back().exhausted) return log;

  int removed_total = original - static_cast<int>(count_stats(model).total_filters);
  for (int it = log.back().iteration + 1; it <= n_iter; ++it) {
    const LabeledSet subset = sample_subset(train_set, sched.subset_fraction, config.seed, it);
    const auto groups = group_model(model);
    ScoringOptions so;
    so.learning_rate = sched.scoring_lr;
    so.momentum = config.retrain.momentum;
    so.weight_decay = config.retrain.weight_decay;
    so.batch_size = config.retrain.batch_size;
    so.seed = derive_seed(config.seed, "prune-scoring", static_cast<std::uint64_t>(it));
    so.norm = config.retrain.norm;
    const ScoringResult scored = scoring_epoch(model, groups, subset, so);
    std::vector<double> scores = scored.table.averaged();
    if (sched.per_layer_normalization) scores = normalize_per_layer(scores, groups);

    const int k = std::max(1, cumulative_victims(sched, original, it) - removed_total);
    const VictimSelection sel = select_victims(scores, groups, model, k, sched.floor);
    if (!sel.groups.empty()) model = surgery(model, groups, sel.groups);
    removed_total += static_cast<int>(sel.groups.size());

    IterationRecord rec;
    rec.iteration = it;
    rec.pruned_fraction = it * sched.step_fraction;
    rec.removed = static_cast<int>(sel.groups.size());
    rec.minibatch_loss = scored.mean_loss;
    rec.exhausted = sel.exhausted;
    rec.retrained = sched.retrain_every > 0 && (it - 1) % sched.retrain_every == 0;
    if (rec.retrained) {
      TrainConfig rc = config.retrain;
      rc.seed = derive_seed(config.seed, "prune-retrain", static_cast<std::uint64_t>(it));
      train(model, train_set, val_set, rc);
    }
    if (sched.recalibrate_bn) {
      recalibrate_batch_norm(model, subset, config.retrain.batch_size, 16, config.retrain.norm);
    }
    const bool last = it == n_iter || sel.exhausted;
    finish(std::move(rec), last || it % config.eval_every == 0);
    if (sel.exhausted) break;
  }
  return log;
}

namespace {

const std::vector<std::string> kLogColumns = {
    "iteration",     "pruned_fraction", "filters", "learnables",          "embedding_dim",
    "model_bytes",   "minibatch_loss",  "val_accuracy", "removed_fraction", "removed",
    "backbone_learnables", "val_loss",  "retrained", "exhausted"};

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void write_prune_log_csv(const std::vector<IterationRecord>& log, const std::string& path) {
  std::set<std::string> extra_keys;
  for (const auto& r : log) {
    for (const auto& [key, value] : r.extra) extra_keys.insert(key);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError(path + ": cannot open for writing");
    for (std::size_t i = 0; i < kLogColumns.size(); ++i) out << (i ? "," : "") << kLogColumns[i];
    for (const auto& k : extra_keys) out << ',' << k;
    out << '\n';
    for (const auto& r : log) {
      out << r.iteration << ',' << fmt(r.pruned_fraction) << ',' << r.stats.total_filters << ','
          << r.stats.learnables << ',' << r.stats.embedding_dim << ',' << r.stats.model_bytes << ','
          << fmt(r.minibatch_loss) << ',' << fmt(r.val_accuracy) << ',' << fmt(r.removed_fraction) << ','
          << r.removed << ',' << r.stats.backbone_learnables << ',' << fmt(r.val_loss) << ','
          << (r.retrained ? 1 : 0) << ',' << (r.exhausted ? 1 : 0);
      for (const auto& k : extra_keys) {
        out << ',';
        if (auto it = r.extra.find(k); it != r.extra.end()) out << fmt(it->second);
      }
      out << '\n';
    }
    if (!out) throw IoError(path + ": write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path + ": cannot replace: " + ec.message());
}

std::vector<IterationRecord> read_prune_log_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open pruning log");
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + ": empty pruning log");
  const auto header = split_line(line);
  if (header.size() < kLogColumns.size() ||
      !std::equal(kLogColumns.begin(), kLogColumns.end(), header.begin())) {
    throw IoError(path + ": unexpected pruning log header");
  }
  std::vector<IterationRecord> log;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_line(line);
    if (f.size() != header.size()) {
      throw IoError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                    " fields");
    }
    try {
      IterationRecord r;
      r.iteration = std::stoi(f[0]);
      r.pruned_fraction = std::stod(f[1]);
      r.stats.total_filters = std::stoll(f[2]);
      r.stats.learnables = std::stoll(f[3]);
      r.stats.embedding_dim = std::stoll(f[4]);
      r.stats.model_bytes = std::stoll(f[5]);
      r.minibatch_loss = std::stod(f[6]);
      r.val_accuracy = std::stod(f[7]);
      r.removed_fraction = std::stod(f[8]);
      r.removed = std::stoi(f[9]);
      r.stats.backbone_learnables = std::stoll(f[10]);
      r.val_loss = std::stod(f[11]);
      r.retrained = f[12] == "1";
      r.exhausted = f[13] == "1";
      for (std::size_t c = kLogColumns.size(); c < header.size(); ++c) {
        if (!f[c].empty()) r.extra[header[c]] = std::stod(f[c]);
      }
      log.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw IoError(path + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return log;
}

double prediction_error(ModelGraph& model, const std::vector<Batch>& batches, NormMode mode,
                        const ChannelMasks* masks) {
  if (batches.empty()) throw DataError("prediction error needs at least one batch");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& b : batches) {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    const auto out = forward(tape, model, b.inputs, {mode, false, masks});
    const auto loss = softmax_cross_entropy(out.logits, std::span<const int>(b.labels));
    sum += static_cast<double>(loss.value().item()) * static_cast<double>(b.labels.size());
    n += b.labels.size();
  }
  return sum / static_cast<double>(n);
}

namespace {

void check_ceiling(std::size_t groups) {
  if (groups > kBruteForceGroupCeiling) {
    throw ConfigError("brute-force importance needs one forward sweep per group; " + std::to_string(groups) +
                      " groups exceed the ceiling of " + std::to_string(kBruteForceGroupCeiling) +
                      ", evaluate a sampled subset of groups instead");
  }
}

}  // namespace

double brute_force_importance(ModelGraph& model, const FilterGroup& group, const std::vector<Batch>& batches,
                              NormMode mode) {
  const auto groups = group_model(model);
  check_ceiling(groups.size());
  const double base = prediction_error(model, batches, mode);
  const int v = group.id;
  const auto masks = ablation_masks(model, groups, std::span<const int>(&v, 1));
  const double d = base - prediction_error(model, batches, mode, &masks);
  return d * d;
}

std::vector<double> brute_force_all(ModelGraph& model, const std::vector<FilterGroup>& groups,
                                    const std::vector<Batch>& batches, NormMode mode) {
  check_ceiling(groups.size());
  const double base = prediction_error(model, batches, mode);
  std::vector<double> out(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const int v = static_cast<int>(i);
    const auto masks = ablation_masks(model, groups, std::span<const int>(&v, 1));
    const double d = base - prediction_error(model, batches, mode, &masks);
    out[i] = d * d;
  }
  return out;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman needs two equal-length series of >= 2");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double bottom_overlap(std::span<const double> a, std::span<const double> b, double fraction) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("bottom_overlap needs two equal-length series");
  const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * a.size() - 1e-9)));
  auto bottom = [m](std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    order.resize(m);
    std::sort(order.begin(), order.end());
    return order;
  };
  const auto ba = bottom(a);
  const auto bb = bottom(b);
  std::vector<std::size_t> common;
  std::set_intersection(ba.begin(), ba.end(), bb.begin(), bb.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(m);
}

}  // namespace sqz
