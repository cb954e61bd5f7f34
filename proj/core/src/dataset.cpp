#include "sqz/dataset.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "sqz/errors.hpp"

namespace sqz {

std::string_view to_string(Pose pose) {
  switch (pose) {
    case Pose::kFrontal: return "frontal";
    case Pose::kThreeQuarter: return "threequarter";
    case Pose::kProfile: return "profile";
  }
  return "?";
}

Pose parse_pose(std::string_view tag) {
  for (Pose p : kAllPoses) {
    if (tag == to_string(p)) return p;
  }
  throw DataError("unknown pose tag '" + std::string(tag) + "'");
}

std::string_view to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split parse_split(std::string_view tag) {
  if (tag == "train") return Split::kTrain;
  if (tag == "test") return Split::kTest;
  throw DataError("unknown split tag '" + std::string(tag) + "'");
}

std::vector<std::string> Manifest::identities(Split split) const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& row : rows) {
    if (row.split == split && seen.insert(row.identity).second) out.push_back(row.identity);
  }
  return out;
}

std::map<std::pair<std::string, Pose>, int> Manifest::counts() const {
  std::map<std::pair<std::string, Pose>, int> out;
  for (const auto& row : rows) ++out[{row.identity, row.pose}];
  return out;
}

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

// Splits one CSV record; double-quoted fields may contain commas and "".
std::vector<std::string> split_csv(const std::string& line, const std::string& where) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
      was_quoted = true;
    } else if (c == ',') {
      fields.push_back(was_quoted ? cur : trim(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += c;
    }
  }
  if (quoted) throw DataError(where + ": unterminated quoted field");
  fields.push_back(was_quoted ? cur : trim(cur));
  return fields;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

Manifest parse_manifest(std::istream& in, const std::filesystem::path& root, const std::string& source) {
  Manifest m;
  m.root = root;
  std::string line;
  int line_no = 0;
  bool header_seen = false;
  std::unordered_map<std::string, int> path_row;
  std::unordered_map<std::string, std::pair<Split, int>> identity_split;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line_no == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (trim(line).empty()) continue;
    auto fields = split_csv(line, where);
    if (!header_seen) {
      if (fields != std::vector<std::string>{"path", "identity", "pose", "split"}) {
        throw DataError(where + ": expected header 'path,identity,pose,split'");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != 4) {
      throw DataError(where + ": expected 4 fields, got " + std::to_string(fields.size()));
    }
    ManifestRow row;
    row.path = fields[0];
    row.identity = fields[1];
    if (row.path.empty() || row.identity.empty()) throw DataError(where + ": empty path or identity");
    try {
      row.pose = parse_pose(fields[2]);
      row.split = parse_split(fields[3]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (auto [it, fresh] = path_row.emplace(row.path, line_no); !fresh) {
      throw DataError(where + ": duplicate path '" + row.path + "' (first at line " +
                      std::to_string(it->second) + ")");
    }
    if (auto [it, fresh] = identity_split.emplace(row.identity, std::pair{row.split, line_no});
        !fresh && it->second.first != row.split) {
      throw DataError(where + ": identity '" + row.identity + "' appears in both train and test splits (" +
                      std::string(to_string(it->second.first)) + " at line " +
                      std::to_string(it->second.second) + ")");
    }
    m.rows.push_back(std::move(row));
  }
  if (!header_seen) throw DataError(source + ": empty manifest (no header)");
  if (m.rows.empty()) throw DataError(source + ": manifest has no image rows");
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open manifest");
  return parse_manifest(in, path.parent_path(), path.string());
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << "path,identity,pose,split\n";
  for (const auto& row : manifest.rows) {
    out << csv_field(row.path) << ',' << csv_field(row.identity) << ',' << to_string(row.pose) << ','
        << to_string(row.split) << '\n';
  }
  if (!out) throw IoError(path.string() + ": write failed");
}

PoseSet build_pose_set(const Manifest& manifest, Split split) {
  PoseSet ps;
  ps.identities = manifest.identities(split);
  if (ps.identities.empty()) {
    throw DataError("manifest has no " + std::string(to_string(split)) + " identities");
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ps.identities.size(); ++i) index[ps.identities[i]] = i;
  ps.images.resize(ps.identities.size());
  for (std::size_t r = 0; r < manifest.rows.size(); ++r) {
    const auto& row = manifest.rows[r];
    if (row.split != split) continue;
    ps.images[index.at(row.identity)][static_cast<std::size_t>(row.pose)].push_back(r);
  }
  ps.n_per_pose = static_cast<int>(ps.images[0][0].size());
  for (std::size_t i = 0; i < ps.identities.size(); ++i) {
    for (Pose p : kAllPoses) {
      const auto n = static_cast<int>(ps.images[i][static_cast<std::size_t>(p)].size());
      if (n == 0 || n != ps.n_per_pose) {
        throw DataError("identity '" + ps.identities[i] + "' has " + std::to_string(n) + " " +
                        std::string(to_string(p)) + " images, expected " + std::to_string(ps.n_per_pose));
      }
    }
  }
  return ps;
}

LabeledSet load_labeled(const Manifest& manifest, Split split) {
  LabeledSet set;
  set.class_names = manifest.identities(split);
  std::unordered_map<std::string, int> label;
  for (std::size_t i = 0; i < set.class_names.size(); ++i) label[set.class_names[i]] = static_cast<int>(i);
  for (std::size_t r = 0; r < manifest.rows.size(); ++r) {
    const auto& row = manifest.rows[r];
    if (row.split != split) continue;
    const ImageF img = to_float(read_pnm(manifest.resolve(row)));
    set.items.push_back({resize_short_side(img, kResizeShortSide), label.at(row.identity), r});
  }
  if (set.items.empty()) throw DataError("manifest has no " + std::string(to_string(split)) + " images");
  return set;
}

}  // namespace sqz
