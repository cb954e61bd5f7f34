#include "sqz/verification.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "sqz/errors.hpp"
#include "sqz/ops.hpp"

namespace sqz {

namespace {

void l2_normalize(std::vector<float>& v) {
  double n2 = 0.0;
  for (float x : v) n2 += static_cast<double>(x) * x;
  if (!(n2 > 0.0) || !std::isfinite(n2)) throw NumericError("descriptor has zero or non-finite norm");
  const double inv = 1.0 / std::sqrt(n2);
  for (float& x : v) x = static_cast<float>(x * inv);
}

}  // namespace

std::vector<std::vector<float>> extract_descriptors(ModelGraph& model, const Tensor& batch) {
  if (batch.rank() != 4) throw ShapeError("descriptor batch must be [N, C, H, W], got " + shape_str(batch.shape()));
  const Tensor a = infer_embeddings(model, batch);
  const Tensor b = infer_embeddings(model, hflip(batch));
  if (!a.all_finite() || !b.all_finite()) throw NumericError("non-finite embedding during descriptor extraction");
  const std::size_t n = a.dim(0);
  const std::size_t d = a.dim(1);
  std::vector<std::vector<float>> out(n, std::vector<float>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i][j] = (a[i * d + j] + b[i * d + j]) / 2.0f;
    l2_normalize(out[i]);
  }
  return out;
}

Descriptor extract_descriptor(ModelGraph& model, const Tensor& image) {
  Tensor batch = image;
  if (image.rank() == 3) batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  if (batch.rank() != 4 || batch.dim(0) != 1) throw ShapeError("expected a single image, got " + shape_str(image.shape()));
  Descriptor d;
  d.values = extract_descriptors(model, batch).front();
  return d;
}

PoseDescriptors extract_pose_descriptors(ModelGraph& model, const Manifest& manifest, const PoseSet& poses,
                                         const Normalization& norm, int batch_size) {
  PoseDescriptors out;
  out.identities = poses.identities;
  out.n_per_pose = poses.n_per_pose;
  out.d.resize(poses.identities.size());
  struct Slot {
    std::size_t identity;
    Pose pose;
    std::size_t row;
  };
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < poses.images.size(); ++i) {
    for (Pose p : kAllPoses) {
      for (std::size_t row : poses.images[i][static_cast<std::size_t>(p)]) slots.push_back({i, p, row});
    }
  }
  constexpr std::size_t kPlane = 3 * static_cast<std::size_t>(kCropSize) * kCropSize;
  for (std::size_t start = 0; start < slots.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(slots.size(), start + static_cast<std::size_t>(batch_size));
    Tensor batch({end - start, 3, kCropSize, kCropSize});
    for (std::size_t k = start; k < end; ++k) {
      const Tensor t = eval_preprocess(read_pnm(manifest.resolve(manifest.rows[slots[k].row])), norm);
      std::copy(t.values().begin(), t.values().end(), batch.data() + (k - start) * kPlane);
    }
    auto desc = extract_descriptors(model, batch);
    for (std::size_t k = start; k < end; ++k) {
      const Slot& s = slots[k];
      out.d[s.identity][static_cast<std::size_t>(s.pose)].push_back({std::move(desc[k - start]), s.row, s.pose, true});
    }
  }
  return out;
}

TemplateSet build_templates(const PoseDescriptors& descriptors, int per_template) {
  if (per_template != 1 && per_template != 5) throw ConfigError("templates hold 1 or 5 images, got " + std::to_string(per_template));
  TemplateSet ts;
  ts.identities = descriptors.identities;
  ts.per_template = per_template;
  ts.t.resize(descriptors.d.size());
  for (std::size_t i = 0; i < descriptors.d.size(); ++i) {
    for (Pose p : kAllPoses) {
      const auto& imgs = descriptors.d[i][static_cast<std::size_t>(p)];
      if (imgs.empty() || imgs.size() % static_cast<std::size_t>(per_template) != 0) {
        throw DataError("identity '" + descriptors.identities[i] + "' has " + std::to_string(imgs.size()) + " " +
                        std::string(to_string(p)) + " images, not a multiple of " + std::to_string(per_template));
      }
      for (std::size_t start = 0; start < imgs.size(); start += static_cast<std::size_t>(per_template)) {
        Template t;
        t.identity = static_cast<int>(i);
        t.pose = p;
        t.vector.assign(imgs[start].values.size(), 0.0f);
        std::vector<double> acc(imgs[start].values.size(), 0.0);
        for (std::size_t k = start; k < start + static_cast<std::size_t>(per_template); ++k) {
          if (imgs[k].values.size() != acc.size()) throw ShapeError("descriptors of differing length in a template");
          t.members.push_back(static_cast<int>(k));
          for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += imgs[k].values[j];
        }
        for (std::size_t j = 0; j < acc.size(); ++j) t.vector[j] = static_cast<float>(acc[j] / per_template);
        l2_normalize(t.vector);
        ts.t[i][static_cast<std::size_t>(p)].push_back(std::move(t));
      }
    }
  }
  return ts;
}

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine of vectors with different lengths");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw DataError("cosine similarity of a zero vector");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

std::vector<double> ScoreSet::genuine_scores() const {
  std::vector<double> out;
  out.reserve(genuine.size());
  for (const auto& r : genuine) out.push_back(r.score);
  return out;
}

std::vector<double> ScoreSet::impostor_scores() const {
  std::vector<double> out;
  out.reserve(impostor.size());
  for (const auto& r : impostor) out.push_back(r.score);
  return out;
}

ScoreSet protocol_scores(const TemplateSet& templates, Pose pose_a, Pose pose_b, int window) {
  const int n = static_cast<int>(templates.t.size());
  if (window < 1) throw ConfigError("impostor window must be at least 1");
  if (n < window + 1) {
    throw DataError("impostor window of " + std::to_string(window) + " needs at least " + std::to_string(window + 1) +
                    " identities, have " + std::to_string(n) + " (shrink the window in the config)");
  }
  const auto pa = static_cast<std::size_t>(pose_a);
  const auto pb = static_cast<std::size_t>(pose_b);
  ScoreSet s;
  s.pose_a = pose_a;
  s.pose_b = pose_b;
  for (int i = 0; i < n; ++i) {
    const auto& ta = templates.t[static_cast<std::size_t>(i)][pa];
    const auto& tb = templates.t[static_cast<std::size_t>(i)][pb];
    for (std::size_t j = 0; j < ta.size(); ++j) {
      for (std::size_t k = pose_a == pose_b ? j + 1 : 0; k < tb.size(); ++k) {
        s.genuine.push_back({cosine(ta[j].vector, tb[k].vector), i, i, static_cast<int>(j), static_cast<int>(k)});
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    const auto& enrol = templates.t[static_cast<std::size_t>(i)][pa];
    for (int w = 1; w <= window; ++w) {
      const int other = (i + w) % n;
      const auto& probe = templates.t[static_cast<std::size_t>(other)][pb];
      if (enrol.empty() || probe.size() < 2) {
        throw DataError("impostor scoring needs at least 2 templates per identity and pose");
      }
      s.impostor.push_back({cosine(enrol[0].vector, probe[1].vector), i, other, 0, 1});
    }
  }
  return s;
}

const std::array<std::pair<Pose, Pose>, 6> kPosePairs = {{
    {Pose::kFrontal, Pose::kFrontal},
    {Pose::kThreeQuarter, Pose::kThreeQuarter},
    {Pose::kProfile, Pose::kProfile},
    {Pose::kFrontal, Pose::kThreeQuarter},
    {Pose::kFrontal, Pose::kProfile},
    {Pose::kThreeQuarter, Pose::kProfile},
}};

EerResult compute_eer(std::span<const double> genuine, std::span<const double> impostor) {
  if (genuine.empty() || impostor.empty()) throw DataError("EER needs non-empty genuine and impostor score lists");
  std::vector<double> g(genuine.begin(), genuine.end());
  std::vector<double> im(impostor.begin(), impostor.end());
  for (double v : g) {
    if (!std::isfinite(v)) throw NumericError("non-finite genuine score");
  }
  for (double v : im) {
    if (!std::isfinite(v)) throw NumericError("non-finite impostor score");
  }
  std::sort(g.begin(), g.end());
  std::sort(im.begin(), im.end());
  std::vector<double> thr;
  thr.reserve(g.size() + im.size());
  std::merge(g.begin(), g.end(), im.begin(), im.end(), std::back_inserter(thr));
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());

  const auto ng = static_cast<long double>(g.size());
  const auto ni = static_cast<long double>(im.size());
  // a[k]: impostors >= thr[k]; b[k]: genuines < thr[k]; the final entry is
  // the point above every score.
  const std::size_t K = thr.size();
  std::vector<std::size_t> a(K + 1), b(K + 1);
  for (std::size_t k = 0; k < K; ++k) {
    a[k] = static_cast<std::size_t>(im.end() - std::lower_bound(im.begin(), im.end(), thr[k]));
    b[k] = static_cast<std::size_t>(std::lower_bound(g.begin(), g.end(), thr[k]) - g.begin());
  }
  a[K] = 0;
  b[K] = g.size();

  EerResult r;
  r.curve.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    r.curve.push_back({thr[k], static_cast<double>(a[k] / ni), static_cast<double>(b[k] / ng)});
  }
  auto diff = [&](std::size_t k) {
    return static_cast<long double>(a[k]) * ng - static_cast<long double>(b[k]) * ni;
  };
  auto thr_at = [&](std::size_t k) { return k < K ? thr[k] : thr[K - 1]; };
  for (std::size_t k = 0; k <= K; ++k) {
    const long double dk = diff(k);
    if (dk == 0) {
      r.eer = static_cast<double>(static_cast<long double>(a[k]) / ni);
      r.threshold = thr_at(k);
      return r;
    }
    if (k < K && dk > 0 && diff(k + 1) < 0) {
      const long double alpha = dk / (dk - diff(k + 1));
      const long double num =
          (static_cast<long double>(a[k]) * ng + static_cast<long double>(b[k]) * ni) +
          alpha * ((static_cast<long double>(a[k + 1]) - static_cast<long double>(a[k])) * ng +
                   (static_cast<long double>(b[k + 1]) - static_cast<long double>(b[k])) * ni);
      r.eer = static_cast<double>(num / (2.0L * ni * ng));
      r.threshold = static_cast<double>(thr_at(k) + alpha * (thr_at(k + 1) - thr_at(k)));
      return r;
    }
  }
  // diff(0) >= 0 because no genuine score lies below the minimum and diff(K) < 0,
  // so a crossing always exists.
  throw Error("EER crossing not found");
}

EerResult compute_eer(const ScoreSet& scores) {
  const auto g = scores.genuine_scores();
  const auto i = scores.impostor_scores();
  return compute_eer(g, i);
}

VerificationReport run_protocol(const TemplateSet& templates, int window, std::vector<ScoreSet>* scores) {
  VerificationReport rep;
  rep.per_template = templates.per_template;
  rep.window = window;
  rep.n_identities = templates.t.size();
  std::vector<double> pooled_g, pooled_i;
  double sum = 0.0;
  for (const auto& [pa, pb] : kPosePairs) {
    ScoreSet s = protocol_scores(templates, pa, pb, window);
    const auto g = s.genuine_scores();
    const auto im = s.impostor_scores();
    pooled_g.insert(pooled_g.end(), g.begin(), g.end());
    pooled_i.insert(pooled_i.end(), im.begin(), im.end());
    PairEer pe{pa, pb, g.size(), im.size(), compute_eer(g, im)};
    sum += pe.result.eer;
    rep.pairs.push_back(std::move(pe));
    if (scores) scores->push_back(std::move(s));
  }
  rep.pooled = compute_eer(pooled_g, pooled_i);
  rep.pooled_genuine = pooled_g.size();
  rep.pooled_impostor = pooled_i.size();
  rep.mean_pair_eer = sum / static_cast<double>(kPosePairs.size());
  return rep;
}

void write_scores_csv(const std::vector<ScoreSet>& sets, const std::vector<std::string>& identities,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << "pair_type,pose_a,pose_b,id_a,id_b,score,label\n";
  char buf[32];
  for (const auto& s : sets) {
    const char* type = s.same_pose() ? "same" : "cross";
    auto row = [&](const ScoreRecord& r, int label) {
      std::snprintf(buf, sizeof buf, "%.9g", r.score);
      out << type << ',' << to_string(s.pose_a) << ',' << to_string(s.pose_b) << ','
          << identities.at(static_cast<std::size_t>(r.id_a)) << ',' << identities.at(static_cast<std::size_t>(r.id_b))
          << ',' << buf << ',' << label << '\n';
    };
    for (const auto& r : s.genuine) row(r, 1);
    for (const auto& r : s.impostor) row(r, 0);
  }
  if (!out) throw IoError(path.string() + ": write failed");
}

namespace {

nlohmann::ordered_json curve_json(const std::vector<CurvePoint>& curve, std::size_t samples) {
  auto arr = nlohmann::ordered_json::array();
  if (curve.empty()) return arr;
  const std::size_t n = std::min(samples, curve.size());
  std::size_t last = curve.size();
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t k = n == 1 ? 0 : s * (curve.size() - 1) / (n - 1);
    if (k == last) continue;
    last = k;
    arr.push_back({{"threshold", curve[k].threshold}, {"far", curve[k].far}, {"frr", curve[k].frr}});
  }
  return arr;
}

}  // namespace

std::string eer_report_json(const VerificationReport& report, std::size_t curve_samples) {
  nlohmann::ordered_json j;
  j["per_template"] = report.per_template;
  j["impostor_window"] = report.window;
  j["n_identities"] = report.n_identities;
  j["pooled"] = {{"eer", report.pooled.eer},
                 {"threshold", report.pooled.threshold},
                 {"n_genuine", report.pooled_genuine},
                 {"n_impostor", report.pooled_impostor},
                 {"curve", curve_json(report.pooled.curve, curve_samples)}};
  j["mean_pair_eer"] = report.mean_pair_eer;
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& p : report.pairs) {
    pairs.push_back({{"pose_a", std::string(to_string(p.pose_a))},
                     {"pose_b", std::string(to_string(p.pose_b))},
                     {"eer", p.result.eer},
                     {"threshold", p.result.threshold},
                     {"n_genuine", p.n_genuine},
                     {"n_impostor", p.n_impostor},
                     {"curve", curve_json(p.result.curve, curve_samples)}});
  }
  j["pairs"] = std::move(pairs);
  return j.dump(2);
}

void write_eer_json(const VerificationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << eer_report_json(report) << '\n';
  if (!out) throw IoError(path.string() + ": write failed");
}

}  // namespace sqz
