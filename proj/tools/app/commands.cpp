#include "commands.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "svg_chart.hpp"
#include "sqz/checkpoint.hpp"
#include "sqz/rng.hpp"

namespace sqz::app {
namespace fs = std::filesystem;

namespace {

void say(std::ostream* log, const std::string& line) {
  if (log != nullptr) *log << line << std::endl;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create directory: " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path.string() + ": cannot open for writing");
    out << text;
    if (!out) throw IoError(path.string() + ": write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": cannot replace: " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void snapshot(const RunConfig& config) {
  ensure_dir(config.out_dir);
  write_text(config.out_dir / "config.ini", format_run_config(config));
}

void require_file(const fs::path& path, const std::string& hint) {
  if (!fs::is_regular_file(path)) throw IoError(path.string() + ": not found (" + hint + ")");
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string tag(int per_template) {
  return std::to_string(per_template) + "v" + std::to_string(per_template);
}

}  // namespace

TrainingData load_training_data(const RunConfig& config) {
  const fs::path mpath = config.manifest_path();
  require_file(mpath, "run `sqzprune synth` or set data.manifest");
  TrainingData d;
  d.manifest = load_manifest(mpath);
  d.split = split_train_val(load_labeled(d.manifest, Split::kTrain), config.train.val_fraction,
                            config.train.min_images_per_class, derive_seed(config.seed, "val-split"));
  if (d.split.train.num_classes() < 2) throw DataError("fewer than two identities left for training");
  return d;
}

ModelGraph build_model(const RunConfig& config, int num_classes) {
  const std::uint64_t init = derive_seed(config.seed, "init");
  if (config.model == "full") return build_full_config(num_classes, init);
  if (config.model == "schedule") return build_from_schedule(load_schedule(config.schedule), num_classes, init);
  return build_micro_config(num_classes, config.width_divisor, init);
}

VerificationProbe::VerificationProbe(const RunConfig& config, Manifest manifest)
    : config_(config), manifest_(std::move(manifest)), poses_(build_pose_set(manifest_, Split::kTest)) {
  const int n = static_cast<int>(poses_.identities.size());
  if (config_.window > n - 1) {
    throw ConfigError("eval.window " + std::to_string(config_.window) + " needs at least " +
                      std::to_string(config_.window + 1) + " test identities, the manifest has " + std::to_string(n));
  }
  for (int p : config_.per_template) {
    if (poses_.n_per_pose % p != 0 || poses_.n_per_pose / p < 2) {
      throw ConfigError("eval.per_template " + std::to_string(p) + " needs at least two templates per pose; " +
                        std::to_string(poses_.n_per_pose) + " images per pose");
    }
  }
}

std::map<int, VerificationReport> VerificationProbe::reports(ModelGraph& model,
                                                             std::map<int, std::vector<ScoreSet>>* scores) const {
  const PoseDescriptors d =
      extract_pose_descriptors(model, manifest_, poses_, config_.train.norm, config_.eval_batch);
  std::map<int, VerificationReport> out;
  for (int p : config_.per_template) {
    std::vector<ScoreSet>* sink = scores != nullptr ? &(*scores)[p] : nullptr;
    out[p] = run_protocol(build_templates(d, p), config_.window, sink);
  }
  return out;
}

std::map<std::string, double> VerificationProbe::columns(ModelGraph& model) const {
  std::map<std::string, double> cols;
  for (const auto& [p, r] : reports(model, nullptr)) {
    cols["eer_" + tag(p)] = r.pooled.eer;
    cols["mean_pair_eer_" + tag(p)] = r.mean_pair_eer;
  }
  return cols;
}

Manifest cmd_synth(const RunConfig& config, std::ostream* log) {
  snapshot(config);
  ensure_dir(config.data_dir());
  const SynthConfig sc = config.synth_config();
  say(log, "synth: " + std::to_string(sc.n_identities) + " identities x 3 poses x " + std::to_string(sc.n_per_pose) +
               " images -> " + config.data_dir().string());
  Manifest m = synthesize_dataset(sc, config.data_dir());
  say(log, "synth: wrote " + std::to_string(m.rows.size()) + " images");
  return m;
}

std::vector<EpochRecord> cmd_train(const RunConfig& config, std::ostream* log) {
  snapshot(config);
  ensure_dir(config.train_dir());
  const TrainingData data = load_training_data(config);
  say(log, "train: " + std::to_string(data.split.train.items.size()) + " train / " +
               std::to_string(data.split.val.items.size()) + " val images, " +
               std::to_string(data.split.train.num_classes()) + " classes");
  ModelGraph model = build_model(config, data.split.train.num_classes());
  const ModelStats s0 = count_stats(model);
  say(log, "train: " + std::to_string(s0.total_filters) + " filters, " + std::to_string(s0.learnables) +
               " learnables");

  const fs::path hist_path = config.train_dir() / "history.csv";
  std::vector<EpochRecord> so_far;
  auto on_epoch = [&](const EpochRecord& r) {
    so_far.push_back(r);
    write_history_csv(so_far, hist_path.string());
    say(log, "  epoch " + std::to_string(r.epoch) + " lr " + fixed(r.lr, 4) + " train_loss " + fixed(r.train_loss, 4) +
                 " val_loss " + fixed(r.val_loss, 4) + " val_acc " + fixed(r.val_acc, 4) +
                 (r.event.empty() ? "" : " [" + r.event + "]"));
  };
  const auto history = train(model, data.split.train, data.split.val, config.train_config(), on_epoch);
  write_history_csv(history, hist_path.string());
  save_checkpoint(model, config.trained_checkpoint());

  const ModelStats s = count_stats(model);
  nlohmann::ordered_json j;
  j["seed"] = config.seed;
  j["epochs"] = history.size();
  j["final_lr"] = history.empty() ? 0.0 : history.back().lr;
  j["val_loss"] = history.empty() ? 0.0 : history.back().val_loss;
  j["val_accuracy"] = history.empty() ? 0.0 : history.back().val_acc;
  j["classes"] = data.split.train.class_names;
  j["dropped_classes"] = data.split.dropped_classes;
  j["filters"] = s.total_filters;
  j["learnables"] = s.learnables;
  j["backbone_learnables"] = s.backbone_learnables;
  j["embedding_dim"] = s.embedding_dim;
  j["model_bytes"] = s.model_bytes;
  write_text(config.train_dir() / "summary.json", j.dump(2) + "\n");
  say(log, "train: wrote " + config.trained_checkpoint().string());
  return history;
}

fs::path iteration_checkpoint(const RunConfig& config, int iteration) {
  char name[32];
  std::snprintf(name, sizeof name, "iter_%03d.sqzp", iteration);
  return config.prune_dir() / name;
}

std::vector<IterationRecord> cmd_prune(const RunConfig& config, std::ostream* log) {
  require_file(config.trained_checkpoint(), "run `sqzprune train` first");
  snapshot(config);
  ensure_dir(config.prune_dir());

  // A resumed session must continue under the configuration it started with.
  const fs::path pinned = config.prune_dir() / "config.ini";
  const fs::path log_path = config.prune_dir() / "log.csv";
  const std::string current = format_run_config(config);
  if (fs::exists(log_path) && fs::exists(pinned) && read_text(pinned) != current) {
    throw ConfigError(log_path.string() + " was produced with a different configuration; use a fresh --out");
  }
  write_text(pinned, current);

  const TrainingData data = load_training_data(config);
  const VerificationProbe probe(config, data.manifest);

  PruneResume resume;
  const PruneResume* resume_ptr = nullptr;
  ModelGraph model;
  if (fs::exists(log_path)) {
    resume.log = read_prune_log_csv(log_path.string());
    if (!resume.log.empty()) {
      const int last = resume.log.back().iteration;
      model = load_checkpoint(iteration_checkpoint(config, last));
      resume.original_filters = static_cast<int>(resume.log.front().stats.total_filters);
      resume_ptr = &resume;
      say(log, "prune: resuming after iteration " + std::to_string(last));
    }
  }
  if (resume_ptr == nullptr) model = load_checkpoint(config.trained_checkpoint());
  if (model.num_classes() != data.split.train.num_classes()) {
    throw DataError("checkpoint has " + std::to_string(model.num_classes()) + " classes, the training split has " +
                    std::to_string(data.split.train.num_classes()));
  }

  PruneHooks hooks;
  hooks.evaluate = [&](int, ModelGraph& m) { return probe.columns(m); };
  hooks.on_iteration = [&](const ModelGraph& m, const IterationRecord& r, const std::vector<IterationRecord>& rows) {
    save_checkpoint(m, iteration_checkpoint(config, r.iteration));
    write_prune_log_csv(rows, log_path.string());
    std::string line = "  iter " + std::to_string(r.iteration) + " pruned " + fixed(100.0 * r.pruned_fraction, 1) +
                       "% filters " + std::to_string(r.stats.total_filters) + " val_acc " +
                       fixed(r.val_accuracy, 4) + (r.retrained ? " [retrained]" : "");
    for (const auto& [k, v] : r.extra) line += " " + k + " " + fixed(v, 4);
    say(log, line);
  };
  const auto rows = prune_session(model, data.split.train, data.split.val, config.session_config(), hooks, resume_ptr);
  write_prune_log_csv(rows, log_path.string());
  return rows;
}

std::map<int, VerificationReport> cmd_eval(const RunConfig& config, const fs::path& checkpoint, std::ostream* log) {
  const fs::path ckpt = checkpoint.empty() ? config.trained_checkpoint() : checkpoint;
  require_file(ckpt, "no checkpoint to evaluate");
  require_file(config.manifest_path(), "run `sqzprune synth` or set data.manifest");
  snapshot(config);
  const fs::path dir = config.eval_dir() / ckpt.stem();
  ensure_dir(dir);

  ModelGraph model = load_checkpoint(ckpt);
  const VerificationProbe probe(config, load_manifest(config.manifest_path()));
  std::map<int, std::vector<ScoreSet>> scores;
  auto reports = probe.reports(model, &scores);
  for (const auto& [p, r] : reports) {
    write_scores_csv(scores[p], probe.poses().identities, dir / ("scores_" + tag(p) + ".csv"));
    write_eer_json(r, dir / ("eer_" + tag(p) + ".json"));
    say(log, "eval " + ckpt.filename().string() + " " + tag(p) + ": pooled EER " + fixed(r.pooled.eer, 4) +
                 ", mean pair EER " + fixed(r.mean_pair_eer, 4));
  }
  return reports;
}

std::vector<EpochRecord> read_history_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open history");
  std::string line;
  if (!std::getline(in, line) || line.rfind("epoch,lr,train_loss,val_loss,val_acc", 0) != 0) {
    throw IoError(path.string() + ": unexpected history header");
  }
  std::vector<EpochRecord> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() < 6) throw IoError(path.string() + ":" + std::to_string(line_no) + ": too few fields");
    try {
      EpochRecord r;
      r.epoch = std::stoi(f[0]);
      r.lr = std::stod(f[1]);
      r.train_loss = std::stod(f[2]);
      r.val_loss = std::stod(f[3]);
      r.val_acc = std::stod(f[4]);
      r.wall_seconds = std::stod(f[5]);
      if (f.size() > 6) r.event = f[6];
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return out;
}

std::vector<fs::path> cmd_report(const fs::path& run_dir, std::ostream* log) {
  const fs::path log_path = run_dir / "prune" / "log.csv";
  const fs::path hist_path = run_dir / "train" / "history.csv";
  if (!fs::exists(log_path) && !fs::exists(hist_path)) {
    throw IoError(run_dir.string() + ": neither prune/log.csv nor train/history.csv found");
  }
  const fs::path out_dir = run_dir / "report";
  ensure_dir(out_dir);
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& svg) {
    write_text(out_dir / name, svg);
    written.push_back(out_dir / name);
    say(log, "report: wrote " + (out_dir / name).string());
  };

  if (fs::exists(log_path)) {
    const auto rows = read_prune_log_csv(log_path.string());
    std::vector<double> x;
    for (const auto& r : rows) x.push_back(100.0 * r.pruned_fraction);
    const double x_max = x.empty() ? 1.0 : std::max(1.0, x.back());
    auto panel = [&](std::string title, std::string y_label) {
      Panel p;
      p.title = std::move(title);
      p.x_label = "pruned filters (%)";
      p.y_label = std::move(y_label);
      p.x_min = 0.0;
      p.x_max = x_max;
      return p;
    };
    auto column = [&](auto get) {
      std::vector<double> y;
      for (const auto& r : rows) y.push_back(get(r));
      return y;
    };

    Panel loss = panel("Loss", "cross-entropy");
    loss.series.push_back({"scoring mini-batch loss", x, column([](const IterationRecord& r) { return r.minibatch_loss; })});
    loss.series.push_back({"validation loss", x, column([](const IterationRecord& r) { return r.val_loss; })});
    Panel acc = panel("Validation accuracy", "top-1 accuracy");
    acc.series.push_back({"val accuracy", x, column([](const IterationRecord& r) { return r.val_accuracy; })});
    acc.y_min = 0.0;
    acc.y_max = 1.0;
    emit("loss_accuracy.svg", render_svg("Loss and validation accuracy vs pruned filters", {loss, acc}, 2));

    std::set<std::string> keys;
    for (const auto& r : rows)
      for (const auto& [k, v] : r.extra) keys.insert(k);
    Panel eer = panel("Verification EER", "EER");
    for (const auto& k : keys) {
      Series s{k, {}, {}};
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (auto it = rows[i].extra.find(k); it != rows[i].extra.end()) {
          s.x.push_back(x[i]);
          s.y.push_back(it->second);
        }
      }
      eer.series.push_back(std::move(s));
    }
    emit("eer.svg", render_svg("EER vs pruned filters", {eer}, 1));

    Panel filters = panel("Filters", "conv filters");
    filters.series.push_back({"filters", x, column([](const IterationRecord& r) {
                                return static_cast<double>(r.stats.total_filters);
                              })});
    Panel learn = panel("Learnables", "trainable parameters");
    learn.series.push_back({"all", x, column([](const IterationRecord& r) {
                              return static_cast<double>(r.stats.learnables);
                            })});
    learn.series.push_back({"backbone", x, column([](const IterationRecord& r) {
                              return static_cast<double>(r.stats.backbone_learnables);
                            })});
    Panel emb = panel("Embedding dimension", "descriptor length");
    emb.series.push_back({"embedding", x, column([](const IterationRecord& r) {
                            return static_cast<double>(r.stats.embedding_dim);
                          })});
    Panel bytes = panel("Model size", "checkpoint bytes");
    bytes.series.push_back({"bytes", x, column([](const IterationRecord& r) {
                              return static_cast<double>(r.stats.model_bytes);
                            })});
    emit("stats.svg", render_svg("Model statistics vs pruned filters", {filters, learn, emb, bytes}, 2));
  }

  if (fs::exists(hist_path)) {
    const auto hist = read_history_csv(hist_path);
    std::vector<double> e, tl, vl, va;
    for (const auto& r : hist) {
      e.push_back(r.epoch);
      tl.push_back(r.train_loss);
      vl.push_back(r.val_loss);
      va.push_back(r.val_acc);
    }
    Panel loss{"Loss", "epoch", "cross-entropy", {{"train", e, tl}, {"validation", e, vl}}};
    Panel acc{"Validation accuracy", "epoch", "top-1 accuracy", {{"val accuracy", e, va}}};
    acc.y_min = 0.0;
    acc.y_max = 1.0;
    emit("training.svg", render_svg("Training history", {loss, acc}, 2));
  }
  return written;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const DataError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 4;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return 5;
  return 1;
}

}  // namespace sqz::app
