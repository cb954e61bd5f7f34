#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sqz/image.hpp"

namespace sqz {

enum class Pose : std::uint8_t { kFrontal = 0, kThreeQuarter = 1, kProfile = 2 };

constexpr std::array<Pose, 3> kAllPoses = {Pose::kFrontal, Pose::kThreeQuarter, Pose::kProfile};

std::string_view to_string(Pose pose);  // "frontal", "threequarter", "profile"
Pose parse_pose(std::string_view tag);  // throws DataError

enum class Split : std::uint8_t { kTrain, kTest };

std::string_view to_string(Split split);
Split parse_split(std::string_view tag);

struct ManifestRow {
  std::string path;  // relative to Manifest::root
  std::string identity;
  Pose pose = Pose::kFrontal;
  Split split = Split::kTrain;
};

// CSV with header `path,identity,pose,split`. Paths are unique and no
// identity may appear in both splits.
struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestRow> rows;

  std::filesystem::path resolve(const ManifestRow& row) const { return root / row.path; }
  // Identities of one split, in order of first appearance.
  std::vector<std::string> identities(Split split) const;
  std::map<std::pair<std::string, Pose>, int> counts() const;
};

// `source` names the input in error messages ("<source>:<line>: ...").
Manifest parse_manifest(std::istream& in, const std::filesystem::path& root,
                        const std::string& source = "<manifest>");
// Paths resolve against the manifest's directory.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Test-split images grouped per identity and pose, in manifest order.
struct PoseSet {
  int n_per_pose = 0;
  std::vector<std::string> identities;
  // images[i][pose] holds manifest row indices of identity i.
  std::vector<std::array<std::vector<std::size_t>, 3>> images;
};

// Throws DataError unless every identity of the split has all three poses
// with the same image count.
PoseSet build_pose_set(const Manifest& manifest, Split split = Split::kTest);

// Decoded image with its shorter side already resized to 129.
struct LabeledImage {
  ImageF image;
  int label = 0;
  std::size_t row = 0;  // manifest row
};

struct LabeledSet {
  std::vector<LabeledImage> items;
  std::vector<std::string> class_names;  // label -> identity

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

// Loads every image of `split`, labelling identities 0.. in first-appearance
// order.
LabeledSet load_labeled(const Manifest& manifest, Split split = Split::kTrain);

}  // namespace sqz
