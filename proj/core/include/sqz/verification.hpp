#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sqz/dataset.hpp"
#include "sqz/model.hpp"

namespace sqz {

struct Descriptor {
  std::vector<float> values;  // L2-normalised
  std::size_t image_row = 0;  // manifest row
  Pose pose = Pose::kFrontal;
  bool flip_averaged = true;
};

// L2-normalise((GAP(f(x)) + GAP(f(hflip(x)))) / 2) for every image of an
// [N, 3, H, W] batch, eval mode. Throws NumericError on non-finite values.
std::vector<std::vector<float>> extract_descriptors(ModelGraph& model, const Tensor& batch);
// Single image, [3, H, W] or [1, 3, H, W].
Descriptor extract_descriptor(ModelGraph& model, const Tensor& image);

// Descriptors of a PoseSet: d[identity][pose][image] in manifest order.
struct PoseDescriptors {
  std::vector<std::string> identities;
  int n_per_pose = 0;
  std::vector<std::array<std::vector<Descriptor>, 3>> d;
};

PoseDescriptors extract_pose_descriptors(ModelGraph& model, const Manifest& manifest, const PoseSet& poses,
                                         const Normalization& norm = {}, int batch_size = 32);

struct Template {
  int identity = 0;
  Pose pose = Pose::kFrontal;
  std::vector<int> members;  // image indices within the identity/pose
  std::vector<float> vector;  // mean of the members, re-normalised
};

struct TemplateSet {
  std::vector<std::string> identities;
  int per_template = 1;
  std::vector<std::array<std::vector<Template>, 3>> t;  // [identity][pose]
};

// Consecutive runs of `per_template` images (in manifest order) form one
// template: with 10 images and 5 per template, images 0-4 and 5-9.
TemplateSet build_templates(const PoseDescriptors& descriptors, int per_template);

double cosine(std::span<const float> a, std::span<const float> b);

struct ScoreRecord {
  double score = 0.0;
  int id_a = 0;
  int id_b = 0;
  int template_a = 0;
  int template_b = 0;
};

struct ScoreSet {
  Pose pose_a = Pose::kFrontal;
  Pose pose_b = Pose::kFrontal;
  std::vector<ScoreRecord> genuine;
  std::vector<ScoreRecord> impostor;

  bool same_pose() const { return pose_a == pose_b; }
  std::vector<double> genuine_scores() const;
  std::vector<double> impostor_scores() const;
};

// Genuine: every template of an identity against its remaining templates
// (j < k within one pose; all of pose_a x pose_b across poses). Impostor:
// template 0 of pose_a of identity i against template 1 of pose_b of the
// next `window` identities, wrapping around. Identity order is manifest order.
ScoreSet protocol_scores(const TemplateSet& templates, Pose pose_a, Pose pose_b, int window);

// The six pose pairs: three same-pose, then frontal-threequarter,
// frontal-profile, threequarter-profile.
extern const std::array<std::pair<Pose, Pose>, 6> kPosePairs;

struct CurvePoint {
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
  std::vector<CurvePoint> curve;  // one point per distinct score, ascending
};

// FAR(t) = share of impostor scores >= t, FRR(t) = share of genuine scores
// < t, swept over the distinct scores plus a point above the maximum (where
// FAR = 0). The EER is read where FAR and FRR cross, interpolating linearly
// between the two bracketing thresholds.
EerResult compute_eer(std::span<const double> genuine, std::span<const double> impostor);
EerResult compute_eer(const ScoreSet& scores);

struct PairEer {
  Pose pose_a = Pose::kFrontal;
  Pose pose_b = Pose::kFrontal;
  std::size_t n_genuine = 0;
  std::size_t n_impostor = 0;
  EerResult result;
};

struct VerificationReport {
  int per_template = 1;
  int window = 0;
  std::size_t n_identities = 0;
  std::vector<PairEer> pairs;
  EerResult pooled;  // all six pose pairs pooled before thresholding
  std::size_t pooled_genuine = 0;
  std::size_t pooled_impostor = 0;
  double mean_pair_eer = 0.0;
};

// Runs all six pose pairs. `scores`, if given, receives the ScoreSets.
VerificationReport run_protocol(const TemplateSet& templates, int window, std::vector<ScoreSet>* scores = nullptr);

// CSV `pair_type,pose_a,pose_b,id_a,id_b,score,label` (label 1 = genuine).
void write_scores_csv(const std::vector<ScoreSet>& sets, const std::vector<std::string>& identities,
                      const std::filesystem::path& path);
// JSON report; curves are subsampled to at most `curve_samples` points.
std::string eer_report_json(const VerificationReport& report, std::size_t curve_samples = 101);
void write_eer_json(const VerificationReport& report, const std::filesystem::path& path);

}  // namespace sqz
