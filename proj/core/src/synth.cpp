#include "sqz/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "sqz/errors.hpp"
#include "sqz/rng.hpp"

namespace sqz {

namespace {

struct Grating {
  double freq;
  double cos_t;
  double sin_t;
  double phase;
  std::array<double, 3> color;
};

struct Blob {
  double cx;
  double cy;
  double inv_two_sigma2;
  std::array<double, 3> color;
};

struct Appearance {
  std::array<double, 3> base;
  std::vector<Grating> gratings;
  std::vector<Blob> blobs;

  std::array<double, 3> sample(double u, double v) const {
    std::array<double, 3> out = base;
    for (const auto& g : gratings) {
      const double s = std::sin(2.0 * std::numbers::pi * g.freq * (u * g.cos_t + v * g.sin_t) + g.phase);
      for (int c = 0; c < 3; ++c) out[c] += g.color[c] * s;
    }
    for (const auto& b : blobs) {
      const double d2 = (u - b.cx) * (u - b.cx) + (v - b.cy) * (v - b.cy);
      const double w = std::exp(-d2 * b.inv_two_sigma2);
      for (int c = 0; c < 3; ++c) out[c] += b.color[c] * w;
    }
    return out;
  }
};

Appearance make_appearance(std::uint64_t seed, int identity) {
  Rng rng = make_rng(seed, "synth-identity", static_cast<std::uint64_t>(identity));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  Appearance a;
  for (auto& c : a.base) c = 0.35 + 0.3 * unit(rng);
  for (int k = 0; k < 3; ++k) {
    const double theta = std::numbers::pi * unit(rng);
    Grating g{1.5 + 3.5 * unit(rng), std::cos(theta), std::sin(theta), 2.0 * std::numbers::pi * unit(rng), {}};
    for (auto& c : g.color) c = 0.14 * sym(rng);
    a.gratings.push_back(g);
  }
  for (int k = 0; k < 2; ++k) {
    const double sigma = 0.15 + 0.2 * unit(rng);
    Blob b{0.6 * sym(rng), 0.6 * sym(rng), 1.0 / (2.0 * sigma * sigma), {}};
    for (auto& c : b.color) c = 0.3 * sym(rng);
    a.blobs.push_back(b);
  }
  return a;
}

struct PoseWarp {
  double shear;
  double squash;
  bool occlude;
};

PoseWarp pose_warp(Pose pose) {
  switch (pose) {
    case Pose::kFrontal: return {0.0, 1.0, false};
    case Pose::kThreeQuarter: return {0.2, 0.85, false};
    case Pose::kProfile: return {0.45, 0.7, true};
  }
  return {0.0, 1.0, false};
}

}  // namespace

Image8 render_synthetic(const SynthConfig& config, int identity, Pose pose, int image_index) {
  if (config.image_size < 2) throw ConfigError("synthetic image_size must be at least 2");
  const Appearance look = make_appearance(config.seed, identity);
  const PoseWarp warp = pose_warp(pose);
  const std::uint64_t stream =
      (static_cast<std::uint64_t>(identity) * 3 + static_cast<std::uint64_t>(pose)) * 100003ULL +
      static_cast<std::uint64_t>(image_index);
  Rng rng = make_rng(config.seed, "synth-image", stream);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.02);

  const double dx = 0.06 * sym(rng);
  const double dy = 0.06 * sym(rng);
  const double scale = 1.0 + 0.05 * sym(rng);
  const double rot = 5.0 * std::numbers::pi / 180.0 * sym(rng);
  const double brightness = 0.05 * sym(rng);
  const double contrast = 1.0 + 0.1 * sym(rng);
  const double cr = std::cos(rot);
  const double sr = std::sin(rot);

  const int n = config.image_size;
  Image8 img{n, n, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n * 3)};
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      // Output pixel in [-1, 1]^2, mapped back into identity space.
      double u = 2.0 * (x + 0.5) / n - 1.0;
      double v = 2.0 * (y + 0.5) / n - 1.0;
      u = (u - dx) / scale;
      v = (v - dy) / scale;
      const double ru = cr * u + sr * v;
      const double rv = -sr * u + cr * v;
      const double su = (ru - warp.shear * rv) / warp.squash;
      std::array<double, 3> rgb;
      if (warp.occlude && ru > 0.35) {
        rgb = {0.2, 0.2, 0.22};
      } else {
        rgb = look.sample(su, rv);
      }
      for (int c = 0; c < 3; ++c) {
        const double val = 0.5 + contrast * (rgb[c] - 0.5) + brightness + noise(rng);
        img.pixels[(static_cast<std::size_t>(y) * n + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
      }
    }
  }
  return img;
}

Manifest synthesize_dataset(const SynthConfig& config, const std::filesystem::path& out_dir) {
  if (config.n_identities < 2) throw ConfigError("synthetic dataset needs at least 2 identities");
  if (config.n_per_pose < 1) throw ConfigError("synthetic dataset needs at least 1 image per pose");
  if (!(config.test_fraction >= 0.0 && config.test_fraction <= 1.0)) {
    throw ConfigError("test_fraction must lie in [0, 1]");
  }
  const int n_test = static_cast<int>(std::lround(config.test_fraction * config.n_identities));
  const int n_train = config.n_identities - n_test;

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError(out_dir.string() + ": cannot create directory: " + ec.message());

  Manifest m;
  m.root = out_dir;
  for (int id = 0; id < config.n_identities; ++id) {
    char name[32];
    std::snprintf(name, sizeof name, "id%04d", id);
    const auto dir = out_dir / "images" / name;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError(dir.string() + ": cannot create directory: " + ec.message());
    for (Pose pose : kAllPoses) {
      for (int k = 0; k < config.n_per_pose; ++k) {
        char file[64];
        std::snprintf(file, sizeof file, "%s_%02d.ppm", std::string(to_string(pose)).c_str(), k);
        write_pnm(render_synthetic(config, id, pose, k), dir / file);
        m.rows.push_back({std::string("images/") + name + "/" + file, name, pose,
                          id < n_train ? Split::kTrain : Split::kTest});
      }
    }
  }
  save_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace sqz
