#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "sqz/dataset.hpp"
#include "sqz/errors.hpp"
#include "sqz/image.hpp"
#include "sqz/rng.hpp"
#include "sqz/synth.hpp"

namespace sqz {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sqz_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Image8 random_image(int w, int h, int c, std::uint64_t seed) {
  Image8 img{w, h, c, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h * c))};
  Rng rng(seed);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Pnm, RoundTripColourAndGray) {
  for (int c : {1, 3}) {
    const Image8 img = random_image(7, 5, c, 3 + c);
    EXPECT_EQ(decode_pnm(encode_pnm(img)), img);
  }
}

TEST(Pnm, ParsesCommentsAndRescalesMaxval) {
  const std::string text = "P5\n# comment\n2 1\n# another\n127\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.push_back(127);
  bytes.push_back(0);
  const Image8 img = decode_pnm(bytes);
  EXPECT_EQ(img.width, 2);
  EXPECT_EQ(img.channels, 1);
  EXPECT_EQ(img.pixels[0], 255);
  EXPECT_EQ(img.pixels[1], 0);
}

TEST(Pnm, UndecodableNamesSource) {
  const std::string text = "P6\n4 4\n255\nabc";
  try {
    (void)decode_pnm(std::vector<std::uint8_t>(text.begin(), text.end()), "faces/a.ppm");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("faces/a.ppm"), std::string::npos);
  }
  const std::string png = "\x89PNG....";
  EXPECT_THROW(decode_pnm(std::vector<std::uint8_t>(png.begin(), png.end())), DataError);
  EXPECT_THROW(read_pnm("/nonexistent/x.ppm"), Error);
}

// Bilinear value at one output pixel, from the corner-aligned mapping.
double bilinear_oracle(const ImageF& in, int c, int oy, int ox, int oh, int ow) {
  auto src = [](int o, int out, int n) {
    return out == 1 ? (n - 1) / 2.0 : static_cast<double>(o) * (n - 1) / (out - 1);
  };
  const double sy = src(oy, oh, in.height), sx = src(ox, ow, in.width);
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, in.height - 1), x1 = std::min(x0 + 1, in.width - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * in.at(c, y0, x0) + fx * in.at(c, y0, x1)) +
         fy * ((1 - fx) * in.at(c, y1, x0) + fx * in.at(c, y1, x1));
}

TEST(Resize, MatchesBilinearOracle) {
  const ImageF in = to_float(random_image(23, 17, 3, 9));
  const ImageF out = resize_bilinear(in, 40, 11);
  ASSERT_EQ(out.height, 40);
  ASSERT_EQ(out.width, 11);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 11; ++x) ASSERT_NEAR(out.at(c, y, x), bilinear_oracle(in, c, y, x, 40, 11), 1e-6);
}

TEST(Resize, ShortSideSizes) {
  EXPECT_EQ(short_side_size(258, 516, 129), (std::array<int, 2>{129, 258}));
  EXPECT_EQ(short_side_size(516, 258, 129), (std::array<int, 2>{258, 129}));
  EXPECT_EQ(short_side_size(200, 300, 129), (std::array<int, 2>{129, 194}));  // 193.5 rounds up
  EXPECT_EQ(short_side_size(129, 129, 129), (std::array<int, 2>{129, 129}));
}

float chw(const Tensor& t, std::size_t c, std::size_t y, std::size_t x) { return t[(c * 113 + y) * 113 + x]; }

TEST(EvalPreprocess, CentreCropOffsets) {
  // Encode each pixel's coordinates in two channels so the crop origin can be read back.
  Image8 img{129, 129, 3, std::vector<std::uint8_t>(129 * 129 * 3)};
  for (int y = 0; y < 129; ++y)
    for (int x = 0; x < 129; ++x) {
      const std::size_t i = (static_cast<std::size_t>(y) * 129 + x) * 3;
      img.pixels[i] = static_cast<std::uint8_t>(y);
      img.pixels[i + 1] = static_cast<std::uint8_t>(x);
    }
  Normalization unit;
  unit.mean = {0, 0, 0};
  unit.stddev = {1, 1, 1};
  const Tensor t = eval_preprocess(img, unit);
  EXPECT_EQ(t.shape(), (Shape{3, 113, 113}));
  EXPECT_FLOAT_EQ(chw(t, 0, 0, 0) * 255.0f, 8.0f);
  EXPECT_FLOAT_EQ(chw(t, 1, 0, 0) * 255.0f, 8.0f);
  EXPECT_FLOAT_EQ(chw(t, 0, 112, 112) * 255.0f, 120.0f);
}

TEST(EvalPreprocess, ConstantImageGivesConstantTensor) {
  Image8 img{200, 150, 3, std::vector<std::uint8_t>(200 * 150 * 3, 51)};
  const Tensor t = eval_preprocess(img);
  const float expect = (51.0f / 255.0f - 0.5f) / 0.5f;
  for (float v : t.values()) ASSERT_NEAR(v, expect, 1e-6);
}

TEST(EvalPreprocess, Deterministic) {
  const Image8 img = random_image(160, 140, 3, 21);
  EXPECT_EQ(eval_preprocess(img), eval_preprocess(img));
}

TEST(EvalPreprocess, GrayIsReplicated) {
  const Image8 img = random_image(129, 140, 1, 22);
  const Tensor t = eval_preprocess(img);
  for (std::size_t y = 0; y < 113; ++y)
    for (std::size_t x = 0; x < 113; ++x) {
      ASSERT_EQ(chw(t, 0, y, x), chw(t, 1, y, x));
      ASSERT_EQ(chw(t, 0, y, x), chw(t, 2, y, x));
    }
}

TEST(Image, FlipIsInvolution) {
  const ImageF a = to_float(random_image(9, 4, 3, 23));
  EXPECT_EQ(hflip(hflip(a)), a);
  EXPECT_EQ(hflip(a).at(1, 2, 0), a.at(1, 2, 8));
  EXPECT_THROW(crop(a, 0, 0, 5, 5), DataError);
}

std::string manifest_text(int identities, int per_pose, const std::string& split = "test") {
  std::ostringstream s;
  s << "path,identity,pose,split\n";
  for (int i = 0; i < identities; ++i)
    for (const char* pose : {"frontal", "threequarter", "profile"})
      for (int k = 0; k < per_pose; ++k) s << "img/" << i << "/" << pose << k << ".ppm,id" << i << "," << pose << "," << split << "\n";
  return s.str();
}

Manifest parse(const std::string& text) {
  std::istringstream in(text);
  return parse_manifest(in, "/data", "m.csv");
}

std::string error_of(const std::string& text) {
  try {
    (void)parse(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return "no error";
}

TEST(Manifest, FullScalePoseSet) {
  const Manifest m = parse(manifest_text(368, 10));
  EXPECT_EQ(m.rows.size(), 11040u);
  const PoseSet ps = build_pose_set(m);
  EXPECT_EQ(ps.identities.size(), 368u);
  EXPECT_EQ(ps.n_per_pose, 10);
  EXPECT_EQ(m.resolve(m.rows[0]), fs::path("/data/img/0/frontal0.ppm"));
}

TEST(Manifest, RejectsBadRowsWithLineNumbers) {
  const std::string header = "path,identity,pose,split\n";
  EXPECT_NE(error_of(header + "a.ppm,x,frontal,train\na.ppm,y,frontal,train\n").find("m.csv:3"), std::string::npos);
  EXPECT_NE(error_of(header + "a.ppm,x,sideways,train\n").find("m.csv:2"), std::string::npos);
  EXPECT_NE(error_of(header + "a.ppm,x,frontal,valid\n").find("m.csv:2"), std::string::npos);
  const std::string overlap = error_of(header + "a.ppm,x,frontal,train\nb.ppm,x,frontal,test\n");
  EXPECT_NE(overlap.find("m.csv:3"), std::string::npos) << overlap;
  EXPECT_NE(error_of("").find("m.csv"), std::string::npos);
  EXPECT_NE(error_of(header), "no error");
  EXPECT_NE(error_of("file,id\n"), "no error");
}

TEST(Manifest, QuotedFieldsAndBom) {
  const Manifest m = parse("\xEF\xBB\xBFpath,identity,pose,split\r\n\"a,b.ppm\",\"Doe, J\",profile,test\r\n");
  ASSERT_EQ(m.rows.size(), 1u);
  EXPECT_EQ(m.rows[0].path, "a,b.ppm");
  EXPECT_EQ(m.rows[0].identity, "Doe, J");
  EXPECT_EQ(m.rows[0].pose, Pose::kProfile);
}

TEST(Manifest, SaveLoadRoundTrip) {
  const fs::path dir = scratch("manifest");
  Manifest m = parse(manifest_text(3, 2) + "x.ppm,other,frontal,train\n");
  save_manifest(m, dir / "manifest.csv");
  const Manifest back = load_manifest(dir / "manifest.csv");
  ASSERT_EQ(back.rows.size(), m.rows.size());
  EXPECT_EQ(back.root, dir);
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].path, m.rows[i].path);
    EXPECT_EQ(back.rows[i].split, m.rows[i].split);
  }
  EXPECT_EQ(back.identities(Split::kTrain), std::vector<std::string>{"other"});
  fs::remove_all(dir);
}

TEST(PoseSet, UnequalCountsRejected) {
  std::string text = manifest_text(2, 3);
  text += "extra.ppm,id1,profile,test\n";
  EXPECT_THROW(build_pose_set(parse(text)), DataError);
  std::string missing = "path,identity,pose,split\na.ppm,q,frontal,test\nb.ppm,q,profile,test\n";
  EXPECT_THROW(build_pose_set(parse(missing)), DataError);
}

TEST(Synth, CountsAndSplit) {
  const fs::path dir = scratch("synth_counts");
  SynthConfig cfg;
  cfg.image_size = 32;
  const Manifest m = synthesize_dataset(cfg, dir);
  EXPECT_EQ(m.rows.size(), 40u * 3 * 10);
  EXPECT_EQ(m.identities(Split::kTrain).size(), 20u);
  EXPECT_EQ(m.identities(Split::kTest).size(), 20u);
  const PoseSet ps = build_pose_set(m);
  EXPECT_EQ(ps.n_per_pose, 10);
  for (const auto& r : m.rows) ASSERT_TRUE(fs::exists(m.resolve(r))) << r.path;
  const Image8 img = read_pnm(m.resolve(m.rows[0]));
  EXPECT_EQ(img.width, 32);
  EXPECT_EQ(img.channels, 3);
  fs::remove_all(dir);
}

TEST(Synth, SameSeedSameBytes) {
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  SynthConfig cfg;
  cfg.n_identities = 3;
  cfg.n_per_pose = 2;
  cfg.image_size = 40;
  cfg.seed = 77;
  const Manifest ma = synthesize_dataset(cfg, a);
  synthesize_dataset(cfg, b);
  EXPECT_EQ(read_bytes(a / "manifest.csv"), read_bytes(b / "manifest.csv"));
  for (const auto& r : ma.rows) ASSERT_EQ(read_bytes(a / r.path), read_bytes(b / r.path)) << r.path;
  cfg.seed = 78;
  EXPECT_NE(encode_pnm(render_synthetic(cfg, 0, Pose::kFrontal, 0)),
            encode_pnm(render_synthetic({3, 2, 40, 77, 0.5}, 0, Pose::kFrontal, 0)));
  fs::remove_all(a);
  fs::remove_all(b);
}

double pixel_correlation(const Image8& a, const Image8& b) {
  const std::size_t n = a.pixels.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a.pixels[i];
    mb += b.pixels[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a.pixels[i] - ma, db = b.pixels[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  return sab / std::sqrt(saa * sbb);
}

TEST(Synth, SameIdentityCorrelatesHigher) {
  SynthConfig cfg;
  cfg.image_size = 48;
  Rng rng(5);
  std::uniform_int_distribution<int> id(0, cfg.n_identities - 1), img(0, cfg.n_per_pose - 1), pose(0, 2);
  double same = 0, diff = 0;
  const int samples = 100;
  for (int s = 0; s < samples; ++s) {
    const int i = id(rng);
    int j = id(rng);
    while (j == i) j = id(rng);
    const Pose p = kAllPoses[static_cast<std::size_t>(pose(rng))];
    const Image8 a = render_synthetic(cfg, i, p, img(rng));
    same += pixel_correlation(a, render_synthetic(cfg, i, p, img(rng)));
    diff += pixel_correlation(a, render_synthetic(cfg, j, p, img(rng)));
  }
  EXPECT_GT(same / samples, diff / samples);
}

}  // namespace
}  // namespace sqz
