#pragma once

#include <cstdint>
#include <filesystem>

#include "sqz/dataset.hpp"

namespace sqz {

struct SynthConfig {
  int n_identities = 40;
  int n_per_pose = 10;
  int image_size = 144;
  std::uint64_t seed = 1;
  // The last round(test_fraction * n_identities) identities form the test split.
  double test_fraction = 0.5;
};

// Renders one identity/pose/image sample as an RGB image of image_size^2.
// Identity appearance is a composition of colored gratings and blobs drawn
// from the identity's own stream; poses apply no / moderate / strong shear,
// profile adds a side occlusion; every image gets its own jitter and noise.
Image8 render_synthetic(const SynthConfig& config, int identity, Pose pose, int image_index);

// Writes images/<identity>/<pose>_<k>.ppm and manifest.csv under `out_dir`
// and returns the manifest (rows identity-major, then pose, then image).
Manifest synthesize_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

}  // namespace sqz
