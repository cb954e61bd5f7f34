// Runs acceptance criteria 1-10 and prints one PASS/FAIL line per criterion.
// Criterion 8 reuses the 40%-pruned model of the first criterion-9 run.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "app/commands.hpp"
#include "oracles.hpp"
#include "sqz/checkpoint.hpp"
#include "sqz/pruning.hpp"
#include "sqz/verification.hpp"

namespace fs = std::filesystem;
using namespace sqz;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string f6(double v) {
  std::ostringstream o;
  o.precision(6);
  o << v;
  return o.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- 1 ----------------------------------------------------------------------

Outcome parameter_count() {
  const auto t0 = Clock::now();
  const ModelGraph m = build_full_config(1000, 1);
  const ModelStats s = count_stats(m);
  const double secs = seconds_since(t0);
  const double rel = (static_cast<double>(s.backbone_learnables) - 1.24e6) / 1.24e6;
  const bool ok = std::abs(rel) <= 0.03 && s.embedding_dim == 1000 && secs < 1.0;
  return {ok, "backbone learnables " + std::to_string(s.backbone_learnables) + " (" + f6(100 * rel) +
                  "% of 1.24M), embedding " + std::to_string(s.embedding_dim) + ", " + f6(secs) + " s"};
}

// --- 2 ----------------------------------------------------------------------

Outcome protocol_counts() {
  const auto t0 = Clock::now();
  const PoseDescriptors d = oracle::random_pose_descriptors(368, 10, 7);
  struct Expect {
    std::size_t same_g, same_i, cross_g, cross_i;
  };
  const std::map<int, Expect> expect{{1, {16560, 36800, 36800, 36800}}, {5, {368, 36800, 1472, 36800}}};
  bool ok = true;
  std::string detail;
  for (const auto& [per, e] : expect) {
    const VerificationReport r = run_protocol(build_templates(d, per), 100);
    for (const auto& p : r.pairs) {
      const bool same = p.pose_a == p.pose_b;
      const std::size_t g = same ? e.same_g : e.cross_g, i = same ? e.same_i : e.cross_i;
      const auto enumerated = oracle::enumerate_protocol(368, 10 / per, same, 100);
      const bool pair_ok =
          p.n_genuine == g && p.n_impostor == i && enumerated.genuine == g && enumerated.impostor == i;
      ok = ok && pair_ok;
      if (!pair_ok) {
        detail += " [" + std::to_string(per) + "-" + std::to_string(per) + " " + std::string(to_string(p.pose_a)) +
                  "/" + std::string(to_string(p.pose_b)) + ": " + std::to_string(p.n_genuine) + "/" +
                  std::to_string(p.n_impostor) + "]";
      }
    }
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 5.0;
  return {ok, "1-1 and 5-5 counts over six pose pairs" + (detail.empty() ? " all exact" : detail) + ", " + f6(secs) +
                  " s"};
}

// --- 3 ----------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_layer;
  bool ok = true;
  for (const auto& layer : oracle::gradient_layers()) {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto gc = oracle::gradient_check(layer, 50000 + s);
      ok = ok && gc.checked > 0;
      if (gc.max_rel_error > worst) worst = gc.max_rel_error, worst_layer = layer;
    }
  }
  const double secs = seconds_since(t0);
  ok = ok && worst <= 1e-4 && secs < 60.0;
  return {ok, std::to_string(oracle::gradient_layers().size()) + " layer types x 20 instances, worst rel error " +
                  f6(worst) + " (" + worst_layer + "), " + f6(secs) + " s"};
}

// --- 4 ----------------------------------------------------------------------

Tensor logits_of(ModelGraph& m, const Tensor& x, const ChannelMasks* masks) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  ForwardOptions o;
  o.masks = masks;
  return forward(tape, m, x, o).logits.value();
}

Outcome surgery_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(4242);
  int events = 0;
  double worst = 0.0;
  bool consistent = true;
  for (std::uint64_t seed = 1; events < 60; ++seed) {
    ModelGraph m = build_from_schedule(oracle::random_small_schedule(seed), 3, seed + 300);
    oracle::randomize_model(m, seed + 400);
    const Tensor x = oracle::random_tensor({3, 3, 15, 15}, seed + 500).cast<float>();
    for (int round = 0; round < 4 && events < 60; ++round, ++events) {
      const auto groups = group_model(m);
      std::vector<double> s(groups.size());
      for (auto& v : s) v = std::uniform_real_distribution<double>(0, 1)(rng);
      const int k = std::uniform_int_distribution<int>(1, 5)(rng);
      const auto victims = select_victims(s, groups, m, k, 1).groups;
      if (victims.empty()) break;
      const ChannelMasks masks = ablation_masks(m, groups, victims);
      const Tensor ablated = logits_of(m, x, &masks);
      ModelGraph pruned = surgery(m, groups, victims);
      try {
        pruned.validate();
      } catch (const SurgeryError&) {
        consistent = false;
      }
      const Tensor out = logits_of(pruned, x, nullptr);
      for (std::size_t i = 0; i < out.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(out[i]) - static_cast<double>(ablated[i])));
      }
      m = std::move(pruned);
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = events >= 50 && consistent && worst <= 1e-5 && secs < 120.0;
  return {ok, std::to_string(events) + " prune events, max |surgery - ablation| " + f6(worst) +
                  (consistent ? ", validator clean" : ", validator FAILED") + ", " + f6(secs) + " s"};
}

// --- 5 ----------------------------------------------------------------------

Outcome taylor_exactness() {
  const auto t0 = Clock::now();
  std::size_t compared = 0, mismatched = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ModelGraph m = build_from_schedule(oracle::random_small_schedule(seed), 3, seed + 600);
    oracle::randomize_model(m, seed + 700);
    const Tensor x = oracle::random_tensor({4, 3, 15, 15}, seed + 800).cast<float>();
    const std::vector<int> labels{0, 1, 2, 1};
    m.zero_grad();
    Tape<float> tape;
    ForwardOptions o;
    o.mode = NormMode::kTrain;
    o.update_running_stats = false;
    auto out = forward(tape, m, x, o);
    tape.backward(softmax_cross_entropy(out.logits, std::span<const int>(labels)));
    const auto groups = group_model(m);
    ImportanceTable table(groups.size());
    score_batch(table, groups, m);
    const auto expect = oracle::taylor_from_dump(m);
    if (expect.size() != table.sums().size()) return {false, "group count mismatch"};
    for (std::size_t i = 0; i < expect.size(); ++i, ++compared) mismatched += table.sums()[i] != expect[i];
  }
  const double secs = seconds_since(t0);
  return {mismatched == 0 && secs < 10.0, std::to_string(compared) + " group scores compared bitwise, " +
                                             std::to_string(mismatched) + " differ, " + f6(secs) + " s"};
}

// --- 6 ----------------------------------------------------------------------

Outcome eer_oracle() {
  const auto t0 = Clock::now();
  Rng rng(66);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const int ng = std::uniform_int_distribution<int>(1, 200)(rng);
    const int ni = std::uniform_int_distribution<int>(1, 200)(rng);
    const double shift = std::uniform_real_distribution<double>(-0.5, 2.0)(rng);
    const bool coarse = t % 4 == 0;
    std::normal_distribution<double> n(0.0, 1.0);
    auto draw = [&](double mu) {
      const double v = mu + n(rng);
      return coarse ? std::round(v * 5) / 5 : v;
    };
    ScoreSet s;
    for (int k = 0; k < ng; ++k) s.genuine.push_back({draw(shift), 0, 0, 0, 1});
    for (int k = 0; k < ni; ++k) s.impostor.push_back({draw(0.0), 0, 1, 0, 1});
    const double got = compute_eer(s).eer;
    worst = std::max(worst, std::abs(got - oracle::eer_sweep(s.genuine_scores(), s.impostor_scores())));
  }
  const std::vector<double> hi(40, 0.8), lo(60, -0.2);
  const double separated = compute_eer(hi, lo).eer;
  std::vector<double> same;
  for (int k = 0; k < 33; ++k) same.push_back(std::uniform_real_distribution<double>(-1, 1)(rng));
  const double identical = compute_eer(same, same).eer;
  const double secs = seconds_since(t0);
  const bool ok = worst <= 1e-9 && separated == 0.0 && identical == 0.5 && secs < 10.0;
  return {ok, "100 random sets, max |EER - sweep| " + f6(worst) + "; separated " + f6(separated) + ", identical " +
                  f6(identical) + ", " + f6(secs) + " s"};
}

// --- shared desk-scale data -------------------------------------------------

app::RunConfig desk_config(const fs::path& source_dir, const fs::path& out) {
  app::RunConfig c = app::load_run_config(source_dir / "configs" / "desk.ini");
  c.out_dir = out;
  return c;
}

// --- 7 ----------------------------------------------------------------------

Outcome linear_decay(const fs::path& source_dir, const fs::path& work) {
  const auto t0 = Clock::now();
  app::RunConfig c = desk_config(source_dir, work / "decay");
  app::cmd_synth(c);
  const app::TrainingData data = app::load_training_data(c);
  ModelGraph m = app::build_model(c, data.split.train.num_classes());
  PruneSessionConfig sc = c.session_config();
  sc.schedule.step_fraction = 0.01;
  sc.schedule.max_total_fraction = 0.20;
  sc.schedule.retrain_every = 0;
  const auto log = prune_session(m, data.split.train, data.split.val, sc);
  const std::int64_t original = log.front().stats.total_filters;
  bool ok = log.size() == 21;
  std::string detail;
  for (const auto& r : log) {
    const std::int64_t expect = original - cumulative_victims(sc.schedule, static_cast<int>(original), r.iteration);
    if (r.stats.total_filters != expect) {
      ok = false;
      detail += " iter " + std::to_string(r.iteration) + " has " + std::to_string(r.stats.total_filters);
    }
  }
  const std::int64_t removed = original - log.back().stats.total_filters;
  const std::int64_t twenty = static_cast<std::int64_t>(std::floor(0.2 * static_cast<double>(original) + 0.5));
  ok = ok && removed == twenty && count_stats(m).total_filters == log.back().stats.total_filters;
  const double secs = seconds_since(t0);
  ok = ok && secs < 600.0;
  return {ok, "20 iterations removed " + std::to_string(removed) + " of " + std::to_string(original) +
                  " filters (20% rounded: " + std::to_string(twenty) + "), every step on the line" + detail + ", " +
                  f6(secs) + " s"};
}

// --- 9 / 10 -----------------------------------------------------------------

struct DeskRun {
  fs::path dir;
  double seconds = 0.0;
  double final_val_accuracy = 0.0;
  std::vector<IterationRecord> log;
};

DeskRun desk_run(const fs::path& source_dir, const fs::path& out) {
  const auto t0 = Clock::now();
  fs::remove_all(out);
  const app::RunConfig c = desk_config(source_dir, out);
  app::cmd_synth(c);
  const auto history = app::cmd_train(c);
  DeskRun r;
  r.dir = out;
  r.final_val_accuracy = history.empty() ? 0.0 : history.back().val_acc;
  r.log = app::cmd_prune(c);
  r.seconds = seconds_since(t0);
  return r;
}

const IterationRecord* row_at(const std::vector<IterationRecord>& log, double fraction) {
  for (const auto& r : log) {
    if (std::abs(r.pruned_fraction - fraction) < 1e-9) return &r;
  }
  return nullptr;
}

double column(const IterationRecord* r, const std::string& key) {
  if (r == nullptr) return std::nan("");
  const auto it = r->extra.find(key);
  return it == r->extra.end() ? std::nan("") : it->second;
}

Outcome end_to_end(const DeskRun& a, const DeskRun& b) {
  const IterationRecord* base = row_at(a.log, 0.0);
  const IterationRecord* p15 = row_at(a.log, 0.15);
  const IterationRecord* p40 = row_at(a.log, 0.40);
  const double e1_0 = column(base, "eer_1v1"), e1_15 = column(p15, "eer_1v1");
  const double e5_0 = column(base, "eer_5v5"), e5_40 = column(p40, "eer_5v5");
  const double total = a.seconds + b.seconds;
  const bool acc_ok = a.final_val_accuracy >= 0.90;
  const bool r15 = std::isfinite(e1_15) && e1_15 <= 1.5 * e1_0;
  const bool r40 = std::isfinite(e5_40) && e5_40 <= 2.0 * e5_0;
  const bool ok = acc_ok && r15 && r40 && a.seconds <= 45 * 60;
  return {ok, "val acc " + f6(a.final_val_accuracy) + "; 1-1 EER " + f6(e1_0) + " -> " + f6(e1_15) + " at 15% (x" +
                  f6(e1_15 / e1_0) + ", gate 1.5); 5-5 EER " + f6(e5_0) + " -> " + f6(e5_40) + " at 40% (x" +
                  f6(e5_40 / e5_0) + ", gate 2.0); run " + f6(a.seconds / 60) + " min (both runs " + f6(total / 60) + " min)"};
}

Outcome determinism(const DeskRun& a, const DeskRun& b) {
  std::vector<fs::path> files{"prune/log.csv", "train/model.sqzp", "train/model.sqzp.json"};
  for (const auto& e : fs::directory_iterator(a.dir / "prune")) {
    if (e.path().extension() == ".sqzp") files.push_back(fs::path("prune") / e.path().filename());
  }
  std::size_t differ = 0;
  std::string first;
  for (const auto& f : files) {
    if (!fs::exists(b.dir / f) || slurp(a.dir / f) != slurp(b.dir / f)) {
      if (differ++ == 0) first = f.string();
    }
  }
  return {differ == 0 && files.size() > 3, std::to_string(files.size()) + " files compared (log + checkpoints), " +
                                               std::to_string(differ) + " differ" +
                                               (first.empty() ? "" : " (first: " + first + ")")};
}

// --- 8 ----------------------------------------------------------------------

Outcome taylor_vs_bruteforce(const fs::path& source_dir, const DeskRun& run) {
  const auto t0 = Clock::now();
  const app::RunConfig c = desk_config(source_dir, run.dir);
  const IterationRecord* p40 = row_at(run.log, 0.40);
  if (p40 == nullptr) return {false, "no 40% checkpoint"};
  ModelGraph m = load_checkpoint(app::iteration_checkpoint(c, p40->iteration));
  const auto groups = group_model(m);
  if (groups.size() > kBruteForceGroupCeiling) {
    return {false, std::to_string(groups.size()) + " groups exceed the brute-force ceiling"};
  }

  // D: a fixed, centre-cropped slice of the training split.
  const app::TrainingData data = app::load_training_data(c);
  std::vector<std::size_t> idx(data.split.train.items.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(c.seed, "acceptance-d");
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(idx.size(), 256));
  std::vector<Batch> batches;
  for (std::size_t s = 0; s < idx.size(); s += 32) {
    const std::size_t e = std::min(idx.size(), s + 32);
    batches.push_back(make_batch(data.split.train, std::span(idx).subspan(s, e - s), nullptr, c.train.norm));
  }

  // Epoch-averaged first-order scores on the same batches and weights.
  ImportanceTable table(groups.size());
  for (const auto& b : batches) {
    m.zero_grad();
    Tape<float> tape;
    ForwardOptions o;
    o.mode = NormMode::kTrain;
    o.update_running_stats = false;
    auto out = forward(tape, m, b.inputs, o);
    tape.backward(softmax_cross_entropy(out.logits, std::span<const int>(b.labels)));
    score_batch(table, groups, m);
  }
  const std::vector<double> taylor = table.averaged();
  const std::vector<double> brute = brute_force_all(m, groups, batches, NormMode::kTrain);
  const double rho = spearman(taylor, brute);
  const double overlap = bottom_overlap(taylor, brute, 0.10);
  const double secs = seconds_since(t0);
  const bool ok = rho > 0.3 && overlap >= 0.30 && secs < 20 * 60;
  return {ok, std::to_string(groups.size()) + " groups on " + std::to_string(idx.size()) + " images: Spearman " +
                  f6(rho) + " (gate > 0.3), bottom-10% overlap " + f6(overlap) + " (gate >= 0.3), " + f6(secs) +
                  " s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"acceptance criteria 1-10"};
  std::string work = (fs::temp_directory_path() / "sqz_acceptance").string();
  std::string source = SQZ_SOURCE_DIR;
  std::vector<int> only;
  cli.add_option("--work-dir", work, "scratch directory for the desk-scale runs");
  cli.add_option("--source-dir", source, "project root (for configs/desk.ini)");
  cli.add_option("--only", only, "run only these criteria")->delimiter(',');
  CLI11_PARSE(cli, argc, argv);

  const std::set<int> wanted = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                                            : std::set<int>(only.begin(), only.end());
  const fs::path work_dir = work, source_dir = source;
  fs::create_directories(work_dir);

  std::map<int, Outcome> results;
  auto run = [&](int id, const std::function<Outcome()>& fn) {
    if (!wanted.count(id)) return;
    try {
      results[id] = fn();
    } catch (const std::exception& e) {
      results[id] = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "  [" << id << "] " << results[id].detail << std::endl;
  };

  run(1, parameter_count);
  run(2, protocol_counts);
  run(3, gradient_suite);
  run(4, surgery_equivalence);
  run(5, taylor_exactness);
  run(6, eer_oracle);
  run(7, [&] { return linear_decay(source_dir, work_dir); });

  if (wanted.count(8) || wanted.count(9) || wanted.count(10)) {
    std::optional<DeskRun> a, b;
    std::string failure;
    try {
      a = desk_run(source_dir, work_dir / "desk_a");
      if (wanted.count(9) || wanted.count(10)) b = desk_run(source_dir, work_dir / "desk_b");
    } catch (const std::exception& e) {
      failure = std::string("desk run failed: ") + e.what();
    }
    auto guarded = [&](int id, const std::function<Outcome()>& fn) {
      run(id, [&]() -> Outcome { return failure.empty() ? fn() : Outcome{false, failure}; });
    };
    guarded(9, [&] { return end_to_end(*a, *b); });
    guarded(10, [&] { return determinism(*a, *b); });
    guarded(8, [&] { return taylor_vs_bruteforce(source_dir, *a); });
  }

  static const char* const names[] = {"",
                                      "parameter count",
                                      "protocol counts",
                                      "gradient suite",
                                      "surgery equivalence",
                                      "Taylor score exactness",
                                      "EER oracle equivalence",
                                      "linear filter decay",
                                      "Taylor vs brute-force ranking",
                                      "desk-scale end-to-end",
                                      "determinism"};
  bool all = true;
  for (const auto& [id, r] : results) {
    std::cout << (r.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << names[id] << "): " << r.detail
              << std::endl;
    all = all && r.pass;
  }
  return all ? 0 : 1;
}
