#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "oracles.hpp"
#include "sqz/rng.hpp"
#include "sqz/verification.hpp"

namespace sqz {
namespace {

TEST(Cosine, Basics) {
  const std::vector<float> v{0.3f, -1.2f, 2.0f}, neg{-0.3f, 1.2f, -2.0f};
  EXPECT_NEAR(cosine(v, v), 1.0, 1e-12);
  EXPECT_NEAR(cosine(v, neg), -1.0, 1e-12);
  EXPECT_EQ(cosine(std::vector<float>{1, 0}, std::vector<float>{0, 1}), 0.0);
  EXPECT_THROW(cosine(std::vector<float>{0, 0}, std::vector<float>{0, 1}), DataError);
  EXPECT_THROW(cosine(std::vector<float>{1}, std::vector<float>{0, 1}), ShapeError);
}

TEST(Cosine, PositiveRescalingInvariant) {
  Rng rng(3);
  std::uniform_real_distribution<float> s(0.1f, 10.0f);
  for (int t = 0; t < 100; ++t) {
    const auto a = oracle::unit_vector(16, rng), b = oracle::unit_vector(16, rng);
    auto a2 = a;
    const float k = s(rng);
    for (auto& x : a2) x *= k;
    EXPECT_NEAR(cosine(a2, b), cosine(a, b), 1e-6);
  }
}

TEST(Templates, FiveAndOnePerTemplate) {
  const PoseDescriptors d = oracle::random_pose_descriptors(3, 10, 1);
  const TemplateSet five = build_templates(d, 5);
  const TemplateSet one = build_templates(d, 1);
  for (std::size_t i = 0; i < 3; ++i)
    for (Pose p : kAllPoses) {
      const auto& t5 = five.t[i][static_cast<std::size_t>(p)];
      ASSERT_EQ(t5.size(), 2u);
      EXPECT_EQ(t5[0].members, (std::vector<int>{0, 1, 2, 3, 4}));
      EXPECT_EQ(t5[1].members, (std::vector<int>{5, 6, 7, 8, 9}));
      EXPECT_EQ(t5[1].pose, p);
      EXPECT_EQ(one.t[i][static_cast<std::size_t>(p)].size(), 10u);
    }
  EXPECT_THROW(build_templates(d, 3), ConfigError);
  EXPECT_THROW(build_templates(oracle::random_pose_descriptors(2, 7, 1), 5), DataError);
}

TEST(Templates, IdenticalMembersGiveThatVector) {
  PoseDescriptors d = oracle::random_pose_descriptors(1, 10, 2);
  for (auto& pose : d.d[0])
    for (auto& desc : pose) desc.values = d.d[0][0][0].values;
  const TemplateSet t = build_templates(d, 5);
  const auto& v = t.t[0][0][1].vector;
  for (std::size_t k = 0; k < v.size(); ++k) EXPECT_NEAR(v[k], d.d[0][0][0].values[k], 1e-6);
}

void expect_counts(int identities, int per_pose, int per_template, int window) {
  const TemplateSet t = build_templates(oracle::random_pose_descriptors(identities, per_pose, 5, 4), per_template);
  for (const auto& [pa, pb] : kPosePairs) {
    const ScoreSet s = protocol_scores(t, pa, pb, window);
    const oracle::PairCounts expect = oracle::enumerate_protocol(identities, per_pose / per_template, pa == pb, window);
    EXPECT_EQ(s.genuine.size(), expect.genuine) << identities << "/" << per_pose << "/" << per_template << "/" << window;
    EXPECT_EQ(s.impostor.size(), expect.impostor);
  }
}

TEST(Protocol, CountsMatchEnumeration) {
  expect_counts(5, 10, 5, 2);
  expect_counts(5, 10, 1, 4);
  expect_counts(7, 10, 5, 6);
  expect_counts(12, 2, 1, 11);
  expect_counts(30, 10, 1, 19);
}

TEST(Protocol, SmallWindowExample) {
  const TemplateSet t = build_templates(oracle::random_pose_descriptors(5, 10, 6, 4), 5);
  const ScoreSet s = protocol_scores(t, Pose::kFrontal, Pose::kFrontal, 2);
  EXPECT_EQ(s.impostor.size(), 10u);
  EXPECT_EQ(s.genuine.size(), 5u);
  // Wrap-around: identity 4 is compared with 0 and 1.
  int wrap = 0;
  for (const auto& r : s.impostor) {
    EXPECT_EQ(r.template_a, 0);
    EXPECT_EQ(r.template_b, 1);
    if (r.id_a == 4) wrap += (r.id_b == 0 || r.id_b == 1);
  }
  EXPECT_EQ(wrap, 2);
}

TEST(Protocol, ScoresAreTemplateCosines) {
  const TemplateSet t = build_templates(oracle::random_pose_descriptors(4, 2, 7, 6), 1);
  const ScoreSet s = protocol_scores(t, Pose::kFrontal, Pose::kProfile, 2);
  for (const auto& r : s.genuine) {
    const auto& a = t.t[static_cast<std::size_t>(r.id_a)][0][static_cast<std::size_t>(r.template_a)].vector;
    const auto& b = t.t[static_cast<std::size_t>(r.id_b)][2][static_cast<std::size_t>(r.template_b)].vector;
    EXPECT_EQ(r.score, cosine(a, b));
    EXPECT_EQ(r.id_a, r.id_b);
  }
}

TEST(Protocol, WindowTooLargeIsError) {
  const TemplateSet t = build_templates(oracle::random_pose_descriptors(5, 2, 8, 4), 1);
  EXPECT_THROW(protocol_scores(t, Pose::kFrontal, Pose::kFrontal, 5), DataError);
  EXPECT_THROW(protocol_scores(t, Pose::kFrontal, Pose::kFrontal, 0), ConfigError);
  EXPECT_NO_THROW(protocol_scores(t, Pose::kFrontal, Pose::kFrontal, 4));
  // One template per pose leaves nothing to probe with.
  const TemplateSet single = build_templates(oracle::random_pose_descriptors(5, 5, 8, 4), 5);
  EXPECT_THROW(protocol_scores(single, Pose::kFrontal, Pose::kProfile, 2), DataError);
}

TEST(Eer, TrivialCasesAreExact) {
  const std::vector<double> g(50, 0.9), i(70, 0.1);
  EXPECT_EQ(compute_eer(g, i).eer, 0.0);
  Rng rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> same(static_cast<std::size_t>(10 + t));
    for (auto& x : same) x = u(rng);
    EXPECT_EQ(compute_eer(same, same).eer, 0.5) << t;
  }
  EXPECT_THROW(compute_eer(std::vector<double>{}, i), DataError);
}

TEST(Eer, MatchesExhaustiveSweep) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const int ng = std::uniform_int_distribution<int>(1, 120)(rng);
    const int ni = std::uniform_int_distribution<int>(1, 120)(rng);
    const double shift = std::uniform_real_distribution<double>(-0.5, 1.5)(rng);
    const bool coarse = t % 3 == 0;  // many ties
    std::normal_distribution<double> n(0.0, 1.0);
    auto draw = [&](double mu) {
      double v = mu + n(rng);
      return coarse ? std::round(v * 4) / 4 : v;
    };
    std::vector<double> g, i;
    for (int k = 0; k < ng; ++k) g.push_back(draw(shift));
    for (int k = 0; k < ni; ++k) i.push_back(draw(0));
    EXPECT_NEAR(compute_eer(g, i).eer, oracle::eer_sweep(g, i), 1e-9) << t;
  }
}

TEST(Eer, InvariantUnderIncreasingTransform) {
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> g, i, g2, i2;
    for (int k = 0; k < 60; ++k) g.push_back(0.7 + n(rng));
    for (int k = 0; k < 80; ++k) i.push_back(n(rng));
    for (double v : g) g2.push_back(std::exp(v) * 3.0 - 1.0);
    for (double v : i) i2.push_back(std::exp(v) * 3.0 - 1.0);
    EXPECT_NEAR(compute_eer(g, i).eer, compute_eer(g2, i2).eer, 1e-12);
  }
}

TEST(Eer, CurveIsMonotone) {
  const std::vector<double> g{0.2, 0.5, 0.9, 0.9}, i{0.1, 0.3, 0.5};
  const EerResult r = compute_eer(g, i);
  ASSERT_FALSE(r.curve.empty());
  for (std::size_t k = 1; k < r.curve.size(); ++k) {
    EXPECT_GT(r.curve[k].threshold, r.curve[k - 1].threshold);
    EXPECT_LE(r.curve[k].far, r.curve[k - 1].far);
    EXPECT_GE(r.curve[k].frr, r.curve[k - 1].frr);
  }
  EXPECT_EQ(r.curve.back().far, 0.0);
}

TEST(Report, PooledAndPerPair) {
  const TemplateSet t = build_templates(oracle::random_pose_descriptors(6, 10, 9, 4), 5);
  std::vector<ScoreSet> sets;
  const VerificationReport rep = run_protocol(t, 3, &sets);
  ASSERT_EQ(rep.pairs.size(), 6u);
  ASSERT_EQ(sets.size(), 6u);
  std::vector<double> g, i;
  double mean = 0;
  for (std::size_t k = 0; k < 6; ++k) {
    const auto gs = sets[k].genuine_scores(), is = sets[k].impostor_scores();
    g.insert(g.end(), gs.begin(), gs.end());
    i.insert(i.end(), is.begin(), is.end());
    EXPECT_EQ(rep.pairs[k].result.eer, compute_eer(sets[k]).eer);
    mean += rep.pairs[k].result.eer / 6;
  }
  EXPECT_EQ(rep.pooled_genuine, g.size());
  EXPECT_EQ(rep.pooled.eer, compute_eer(g, i).eer);
  EXPECT_NEAR(rep.mean_pair_eer, mean, 1e-12);

  const auto json = nlohmann::json::parse(eer_report_json(rep));
  EXPECT_EQ(json.at("pairs").size(), 6u);
  EXPECT_EQ(json.at("pooled").at("n_genuine").get<std::size_t>(), g.size());
  EXPECT_LE(json.at("pooled").at("curve").size(), 101u);
  EXPECT_EQ(json.at("impostor_window").get<int>(), 3);

  const auto path = std::filesystem::temp_directory_path() / "sqz_scores.csv";
  write_scores_csv(sets, t.identities, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "pair_type,pose_a,pose_b,id_a,id_b,score,label");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, g.size() + i.size());
  std::filesystem::remove(path);
}

// --- descriptors ----------------------------------------------------------

Tensor symmetric_image(std::uint64_t seed) {
  Tensor x = oracle::random_tensor({1, 3, 113, 113}, seed).cast<float>();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 113; ++y)
      for (std::size_t w = 0; w < 56; ++w) x.at(0, c, y, 112 - w) = x.at(0, c, y, w);
  return x;
}

Tensor flipped(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t y = 0; y < x.dim(2); ++y)
        for (std::size_t w = 0; w < x.dim(3); ++w) out.at(n, c, y, w) = x.at(n, c, y, x.dim(3) - 1 - w);
  return out;
}

TEST(Descriptor, SymmetricInputEqualsPlainEmbedding) {
  ModelGraph m = build_micro_config(4, 8, 3);
  oracle::randomize_model(m, 4);
  const Tensor x = symmetric_image(5);
  const Descriptor d = extract_descriptor(m, x);
  const Tensor e = infer_embeddings(m, x);
  double n2 = 0;
  for (float v : e.values()) n2 += double(v) * v;
  ASSERT_EQ(d.values.size(), 125u);
  for (std::size_t k = 0; k < d.values.size(); ++k) EXPECT_NEAR(d.values[k], e[k] / std::sqrt(n2), 1e-6);
  EXPECT_TRUE(d.flip_averaged);
}

TEST(Descriptor, UnitNormAndFlipInvariant) {
  ModelGraph m = build_micro_config(4, 8, 6);
  oracle::randomize_model(m, 7);
  const Tensor x = oracle::random_tensor({3, 3, 113, 113}, 8).cast<float>();
  const auto a = extract_descriptors(m, x), b = extract_descriptors(m, flipped(x));
  for (std::size_t n = 0; n < 3; ++n) {
    double s = 0;
    for (float v : a[n]) s += double(v) * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
    EXPECT_EQ(a[n], b[n]);
  }
}

TEST(Descriptor, FullConfigLength) {
  ModelGraph m = build_full_config(3, 2);
  const Descriptor d = extract_descriptor(m, oracle::random_tensor({1, 3, 113, 113}, 9).cast<float>());
  EXPECT_EQ(d.values.size(), 1000u);
}

}  // namespace
}  // namespace sqz
