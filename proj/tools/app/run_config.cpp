#include "run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "sqz/errors.hpp"
#include "sqz/rng.hpp"

namespace sqz::app {
namespace {

namespace pt = boost::property_tree;

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + ": cannot parse '" + raw + "' as a number");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + raw + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& raw) {
  std::vector<T> out;
  std::stringstream in(raw);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_number<T>(key, item));
  return out;
}

// Shortest form that still round-trips.
std::string fmt(double v) {
  std::ostringstream s;
  for (int p = 1; p <= 17; ++p) {
    s.str("");
    s << std::setprecision(p) << v;
    if (std::stod(s.str()) == v) break;
  }
  return s.str();
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt(static_cast<double>(xs[i]));
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <typename T>
Field number(std::string section, std::string key, T& ref) {
  const std::string full = section + "." + key;
  return {section, key, [&ref, full](const std::string& v) { ref = parse_number<T>(full, v); },
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt(static_cast<double>(ref));
            } else {
              return std::to_string(ref);
            }
          }};
}

Field flag(std::string section, std::string key, bool& ref) {
  const std::string full = section + "." + key;
  return {section, key, [&ref, full](const std::string& v) { ref = parse_bool(full, v); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field path(std::string section, std::string key, std::filesystem::path& ref) {
  return {section, key, [&ref](const std::string& v) { ref = trim(v); }, [&ref] { return ref.string(); }};
}

Field text(std::string section, std::string key, std::string& ref) {
  return {section, key, [&ref](const std::string& v) { ref = trim(v); }, [&ref] { return ref; }};
}

template <typename T>
Field list(std::string section, std::string key, std::vector<T>& ref) {
  const std::string full = section + "." + key;
  return {section, key, [&ref, full](const std::string& v) { ref = parse_list<T>(full, v); },
          [&ref] { return join(ref); }};
}

Field triple(std::string section, std::string key, std::array<float, 3>& ref) {
  const std::string full = section + "." + key;
  return {section, key,
          [&ref, full](const std::string& v) {
            const auto xs = parse_list<float>(full, v);
            if (xs.size() != 3) throw ConfigError(full + ": expected three comma-separated values");
            std::copy(xs.begin(), xs.end(), ref.begin());
          },
          [&ref] { return join(std::vector<float>(ref.begin(), ref.end())); }};
}

std::vector<Field> fields(RunConfig& c) {
  return {
      number("run", "seed", c.seed),
      path("run", "out_dir", c.out_dir),

      path("data", "manifest", c.manifest),
      number("data", "identities", c.synth.n_identities),
      number("data", "images_per_pose", c.synth.n_per_pose),
      number("data", "image_size", c.synth.image_size),
      number("data", "test_fraction", c.synth.test_fraction),

      text("model", "config", c.model),
      number("model", "width_divisor", c.width_divisor),
      path("model", "schedule", c.schedule),

      number("train", "batch_size", c.train.batch_size),
      number("train", "initial_lr", c.train.initial_lr),
      list("train", "lr_ladder", c.train.lr_ladder),
      number("train", "plateau_patience", c.train.plateau_patience),
      number("train", "plateau_min_delta", c.train.plateau_min_delta),
      number("train", "momentum", c.train.momentum),
      number("train", "weight_decay", c.train.weight_decay),
      number("train", "max_epochs", c.train.max_epochs),
      number("train", "val_fraction", c.train.val_fraction),
      number("train", "min_images_per_class", c.train.min_images_per_class),
      triple("train", "norm_mean", c.train.norm.mean),
      triple("train", "norm_std", c.train.norm.stddev),

      number("prune", "step_fraction", c.prune.step_fraction),
      number("prune", "subset_fraction", c.prune.subset_fraction),
      number("prune", "retrain_every", c.prune.retrain_every),
      number("prune", "retrain_epochs", c.retrain_epochs),
      number("prune", "max_total_fraction", c.prune.max_total_fraction),
      number("prune", "scoring_lr", c.prune.scoring_lr),
      number("prune", "floor", c.prune.floor),
      flag("prune", "per_layer_normalization", c.prune.per_layer_normalization),
      flag("prune", "recalibrate_bn", c.prune.recalibrate_bn),
      number("prune", "eval_every", c.eval_every),

      list("eval", "per_template", c.per_template),
      number("eval", "window", c.window),
      number("eval", "batch_size", c.eval_batch),
  };
}

// The INI reader only knows whole-line comments; cut trailing "; ..." / "# ...".
std::string strip_inline_comments(const std::string& text) {
  std::istringstream in(text);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if ((line[i] == ';' || line[i] == '#') && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
        line.resize(i);
        break;
      }
    }
    out << line << '\n';
  }
  return out.str();
}

}  // namespace

void RunConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("run.out_dir must not be empty");
  if (synth.n_identities < 2) throw ConfigError("data.identities must be at least 2");
  if (synth.n_per_pose < 1) throw ConfigError("data.images_per_pose must be at least 1");
  if (synth.image_size < kCropSize) {
    throw ConfigError("data.image_size must be at least " + std::to_string(kCropSize));
  }
  if (!(synth.test_fraction > 0.0 && synth.test_fraction < 1.0)) {
    throw ConfigError("data.test_fraction must lie in (0, 1)");
  }
  if (model != "micro" && model != "full" && model != "schedule") {
    throw ConfigError("model.config must be micro, full or schedule, got '" + model + "'");
  }
  if (model == "micro" && width_divisor != 2 && width_divisor != 4 && width_divisor != 8) {
    throw ConfigError("model.width_divisor must be 2, 4 or 8");
  }
  if (model == "schedule" && schedule.empty()) throw ConfigError("model.schedule is required for config = schedule");
  train.validate();
  prune.validate();
  if (retrain_epochs < 1) throw ConfigError("prune.retrain_epochs must be at least 1");
  if (eval_every < 1) throw ConfigError("prune.eval_every must be at least 1");
  if (per_template.empty()) throw ConfigError("eval.per_template must list at least one template size");
  for (int p : per_template) {
    if (p != 1 && p != 5) throw ConfigError("eval.per_template values must be 1 or 5");
  }
  if (window < 1) throw ConfigError("eval.window must be at least 1");
  if (eval_batch < 1) throw ConfigError("eval.batch_size must be at least 1");
}

std::filesystem::path RunConfig::manifest_path() const {
  return manifest.empty() ? data_dir() / "manifest.csv" : manifest;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = derive_seed(seed, "train");
  return t;
}

TrainConfig RunConfig::retrain_config() const {
  TrainConfig t = train;
  t.max_epochs = retrain_epochs;
  t.seed = derive_seed(seed, "retrain");
  return t;
}

SynthConfig RunConfig::synth_config() const {
  SynthConfig s = synth;
  s.seed = derive_seed(seed, "synth");
  return s;
}

PruneSessionConfig RunConfig::session_config() const {
  PruneSessionConfig s;
  s.schedule = prune;
  s.retrain = retrain_config();
  s.seed = derive_seed(seed, "prune");
  s.eval_every = eval_every;
  return s;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  pt::ptree tree;
  std::istringstream in(strip_inline_comments(text));
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig config;
  auto table = fields(config);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(source + ": key '" + section + "' outside of a section");
    }
    bool known_section = false;
    for (const auto& f : table) known_section = known_section || f.section == section;
    if (!known_section) throw ConfigError(source + ": unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      auto it = std::find_if(table.begin(), table.end(),
                             [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == table.end()) throw ConfigError(source + ": unknown key '" + key + "' in [" + section + "]");
      it->set(value.data());
    }
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError(file.string() + ": cannot open config");
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig config = parse_run_config(ss.str(), file.string());
  config.base_dir = file.parent_path();
  auto rebase = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = std::filesystem::absolute(config.base_dir / p).lexically_normal();
  };
  rebase(config.manifest);
  rebase(config.schedule);
  return config;
}

std::string format_run_config(const RunConfig& config) {
  RunConfig copy = config;
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields(copy)) {
    if (f.section != section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << f.get() << '\n';
  }
  return out.str();
}

}  // namespace sqz::app
