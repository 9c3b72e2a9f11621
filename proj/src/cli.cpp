#include "skyrm/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "skyrm/analysis.hpp"
#include "skyrm/checkpoint.hpp"
#include "skyrm/image_io.hpp"
#include "skyrm/parallel.hpp"
#include "skyrm/rng.hpp"

namespace skyrm::cli {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return kExitData;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const InternalError*>(&e)) return kExitRuntime;
  return kExitOther;
}

namespace {

enum class Kind { integer, real, boolean, text, path, reals, activation, connectivity };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* value;
};

// Defaults. Keep in step with the struct initializers.
const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = {
      {"preset", Kind::text, "benchmark3"},
      {"seed", Kind::integer, "0"},
      {"threads", Kind::integer, "1"},
      {"checkpoint", Kind::path, ""},

      {"model.depth", Kind::integer, "3"},
      {"model.base_channels", Kind::integer, "16"},
      {"model.num_classes", Kind::integer, "3"},
      {"model.activation", Kind::activation, "relu"},
      {"model.prelu_init", Kind::real, "0.25"},
      {"model.dropout", Kind::real, "0.05"},
      {"model.input_h", Kind::integer, "128"},
      {"model.input_w", Kind::integer, "128"},

      {"train.epochs", Kind::integer, "100"},
      {"train.batch_size", Kind::integer, "8"},
      {"train.learning_rate", Kind::real, "0.001"},
      {"train.early_stop_patience", Kind::integer, "10"},
      {"train.plateau_patience", Kind::integer, "3"},
      {"train.plateau_factor", Kind::real, "0.5"},
      {"train.min_lr", Kind::real, "1e-06"},
      {"train.runs", Kind::integer, "5"},
      {"train.repeat_seed", Kind::boolean, "false"},
      {"train.crop_size", Kind::integer, "0"},

      {"loss.smoothing_alpha", Kind::real, "0.2"},
      {"loss.class_weights", Kind::reals, ""},

      {"augment.rot90", Kind::boolean, "false"},
      {"augment.noise", Kind::boolean, "false"},
      {"augment.noise_sigma_max", Kind::real, "0.05"},
      {"augment.shift", Kind::boolean, "false"},
      {"augment.shift_max_fraction", Kind::real, "0.1"},
      {"augment.scale", Kind::boolean, "false"},
      {"augment.scale_max_factor", Kind::real, "0.2"},
      {"augment.contrast", Kind::boolean, "false"},
      {"augment.contrast_limit", Kind::real, "0.3"},
      {"augment.brightness", Kind::boolean, "false"},
      {"augment.brightness_limit", Kind::real, "0.3"},
      {"augment.inversion", Kind::boolean, "false"},

      {"synth.height", Kind::integer, "128"},
      {"synth.width", Kind::integer, "128"},
      {"synth.train_count", Kind::integer, "300"},
      {"synth.val_count", Kind::integer, "60"},
      {"synth.test_count", Kind::integer, "20"},
      {"synth.background", Kind::real, "0.7"},
      {"synth.skyrmion_grey", Kind::real, "0.25"},
      {"synth.radius_mean", Kind::real, "6"},
      {"synth.radius_sd", Kind::real, "1.5"},
      {"synth.radius_min", Kind::real, "2.5"},
      {"synth.radius_max", Kind::real, "12"},
      {"synth.max_eccentricity", Kind::real, "1.5"},
      {"synth.edge_softness", Kind::real, "1.5"},
      {"synth.min_gap", Kind::integer, "1"},
      {"synth.skyrmion_fraction", Kind::real, "0.19"},
      {"synth.defects_min", Kind::integer, "1"},
      {"synth.defects_max", Kind::integer, "4"},
      {"synth.defect_grey", Kind::real, "0.97"},
      {"synth.defect_radius_min", Kind::real, "3"},
      {"synth.defect_radius_max", Kind::real, "8"},
      {"synth.defect_lobes_max", Kind::integer, "5"},
      {"synth.defect_dark_fraction", Kind::real, "0.5"},
      {"synth.halo_grey", Kind::real, "0.3"},
      {"synth.halo_width", Kind::real, "4"},
      {"synth.noise_sigma", Kind::real, "0.06"},
      {"synth.gradient_max", Kind::real, "0.15"},
      {"synth.max_attempts", Kind::integer, "4000"},

      {"data.train", Kind::path, ""},
      {"data.val", Kind::path, ""},
      {"data.test", Kind::path, ""},
      {"data.collapse_defects", Kind::boolean, "true"},

      {"predict.input", Kind::path, ""},
      {"predict.tta", Kind::boolean, "false"},

      {"eval.pred", Kind::path, ""},
      {"eval.truth", Kind::path, ""},
      {"eval.connectivity", Kind::connectivity, "8"},
      {"eval.speckle_max_size", Kind::integer, "10"},
      {"eval.hist_lo", Kind::real, "0"},
      {"eval.hist_hi", Kind::real, "2000"},
      {"eval.hist_width", Kind::real, "80"},

      {"probe.first", Kind::integer, "0"},
      {"probe.last", Kind::integer, "255"},
      {"probe.size", Kind::integer, "0"},
      {"probe.image", Kind::path, ""},

      {"bootstrap.input", Kind::path, ""},
      {"bootstrap.min_defect_size", Kind::integer, "20"},
      {"bootstrap.tta", Kind::boolean, "false"},

      {"report.inputs", Kind::text, ""},
  };
  return table;
}

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : key_table())
    if (key == k.key) return &k;
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + what);
}

long long parse_integer(const std::string& key, const std::string& value) {
  long long v = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (value.empty() || ec != std::errc() || ptr != end) bad_value(key, value, "an integer");
  return v;
}

double parse_real(const std::string& key, const std::string& value) {
  if (value.empty()) bad_value(key, value, "a number");
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end != value.c_str() + value.size() || !std::isfinite(v)) bad_value(key, value, "a number");
  return v;
}

std::string format_real(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Parses and re-prints a value so equal settings echo identically.
std::string canonical(const KeySpec& spec, const std::string& raw) {
  const std::string key = spec.key;
  const std::string value = trim(raw);
  switch (spec.kind) {
    case Kind::integer:
      return std::to_string(parse_integer(key, value));
    case Kind::real:
      return format_real(parse_real(key, value));
    case Kind::boolean:
      if (value == "true" || value == "1" || value == "yes" || value == "on") return "true";
      if (value == "false" || value == "0" || value == "no" || value == "off") return "false";
      bad_value(key, value, "a boolean");
    case Kind::reals: {
      std::string out;
      for (const auto& item : split(value, ',')) out += (out.empty() ? "" : ",") + format_real(parse_real(key, item));
      return out;
    }
    case Kind::activation:
      try {
        return to_string(parse_activation(value));
      } catch (const ConfigError& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
      }
    case Kind::connectivity:
      if (value == "4" || value == "8") return value;
      bad_value(key, value, "a connectivity (4 or 8)");
    case Kind::text:
    case Kind::path:
      return value;
  }
  return value;
}

using Overrides = std::vector<std::pair<std::string, std::string>>;

Overrides fifteen_epochs() {
  return {{"train.epochs", "15"}, {"train.early_stop_patience", "5"}, {"train.plateau_patience", "2"}};
}

Overrides standard_augmentation() {
  return {{"augment.rot90", "true"},    {"augment.noise", "true"},    {"augment.shift", "true"},
          {"augment.scale", "true"},    {"augment.contrast", "true"}, {"augment.brightness", "true"}};
}

Overrides concat(std::initializer_list<Overrides> parts) {
  Overrides out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

const std::map<std::string, Overrides>& preset_table() {
  static const std::map<std::string, Overrides> table = {
      {"benchmark3", {}},
      {"benchmark2", {{"model.num_classes", "2"}}},
      {"master", concat({fifteen_epochs(), standard_augmentation(), {{"model.dropout", "0.1"}}})},
      {"inversion",
       concat({fifteen_epochs(), standard_augmentation(), {{"model.dropout", "0.1"}, {"augment.inversion", "true"}}})},
      // single changes against the 3-class benchmark, 15 epochs each
      {"sweep-augment", concat({fifteen_epochs(), standard_augmentation()})},
      {"sweep-augment-inversion", concat({fifteen_epochs(), standard_augmentation(), {{"augment.inversion", "true"}}})},
      {"sweep-prelu", concat({fifteen_epochs(), {{"model.activation", "prelu"}}})},
      {"sweep-tanh", concat({fifteen_epochs(), {{"model.activation", "tanh"}}})},
      {"sweep-mish", concat({fifteen_epochs(), {{"model.activation", "mish"}}})},
      {"sweep-smoothing-0.3", concat({fifteen_epochs(), {{"loss.smoothing_alpha", "0.3"}}})},
      {"sweep-smoothing-0.4", concat({fifteen_epochs(), {{"loss.smoothing_alpha", "0.4"}}})},
      {"sweep-dropout-0", concat({fifteen_epochs(), {{"model.dropout", "0"}}})},
      {"sweep-dropout-10", concat({fifteen_epochs(), {{"model.dropout", "0.1"}}})},
      {"sweep-dropout-15", concat({fifteen_epochs(), {{"model.dropout", "0.15"}}})},
  };
  return table;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : key_table()) values_[k.key] = k.value;
}

const std::vector<std::string>& RunConfig::preset_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, _] : preset_table()) n.push_back(name);
    return n;
  }();
  return names;
}

const Overrides& RunConfig::preset(const std::string& name) {
  const auto it = preset_table().find(name);
  if (it == preset_table().end()) {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }
  return it->second;
}

void RunConfig::apply_preset(const std::string& name) {
  const auto& overrides = preset(name);
  *this = RunConfig();
  for (const auto& [k, v] : overrides) set(k, v);
  values_["preset"] = name;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeySpec* spec = find_key(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  if (key == "preset") preset(trim(value));
  values_[key] = canonical(*spec, value);
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const {
  const long long v = parse_integer(key, get(key));
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    bad_value(key, get(key), "a 32-bit integer");
  return static_cast<int>(v);
}

double RunConfig::get_double(const std::string& key) const { return parse_real(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const { return get(key) == "true"; }

std::vector<float> RunConfig::get_floats(const std::string& key) const {
  std::vector<float> out;
  for (const auto& item : split(get(key), ',')) out.push_back(static_cast<float>(parse_real(key, item)));
  return out;
}

fs::path RunConfig::get_path(const std::string& key) const { return fs::path(get(key)); }

fs::path RunConfig::require_path(const std::string& key) const {
  const auto p = get_path(key);
  if (p.empty()) throw ConfigError("config key '" + key + "' must be set");
  return p;
}

UNetConfig RunConfig::model() const {
  UNetConfig c;
  c.depth = get_int("model.depth");
  c.base_channels = get_int("model.base_channels");
  c.num_classes = get_int("model.num_classes");
  c.activation.kind = parse_activation(get("model.activation"));
  c.activation.prelu_init = static_cast<float>(get_double("model.prelu_init"));
  c.dropout_rate = static_cast<float>(get_double("model.dropout"));
  c.input_h = get_int("model.input_h");
  c.input_w = get_int("model.input_w");
  return c;
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.epochs = get_int("train.epochs");
  t.batch_size = get_int("train.batch_size");
  t.learning_rate = get_double("train.learning_rate");
  t.early_stop_patience = get_int("train.early_stop_patience");
  t.plateau_patience = get_int("train.plateau_patience");
  t.plateau_factor = get_double("train.plateau_factor");
  t.min_lr = get_double("train.min_lr");
  t.runs = get_int("train.runs");
  t.repeat_seed = get_bool("train.repeat_seed");
  t.crop_size = get_int("train.crop_size");
  const long long seed = parse_integer("seed", get("seed"));
  if (seed < 0) throw ConfigError("config key 'seed' must be >= 0");
  t.base_seed = static_cast<std::uint64_t>(seed);
  return t;
}

LossConfig RunConfig::loss() const {
  LossConfig l;
  l.smoothing_alpha = static_cast<float>(get_double("loss.smoothing_alpha"));
  l.class_weights = get_floats("loss.class_weights");
  return l;
}

AugmentSpec RunConfig::augment() const {
  AugmentSpec a;
  a.rot90 = get_bool("augment.rot90");
  a.noise = get_bool("augment.noise");
  a.noise_sigma_max = static_cast<float>(get_double("augment.noise_sigma_max"));
  a.shift = get_bool("augment.shift");
  a.shift_max_fraction = static_cast<float>(get_double("augment.shift_max_fraction"));
  a.scale = get_bool("augment.scale");
  a.scale_max_factor = static_cast<float>(get_double("augment.scale_max_factor"));
  a.contrast = get_bool("augment.contrast");
  a.contrast_limit = static_cast<float>(get_double("augment.contrast_limit"));
  a.brightness = get_bool("augment.brightness");
  a.brightness_limit = static_cast<float>(get_double("augment.brightness_limit"));
  a.inversion = get_bool("augment.inversion");
  return a;
}

SynthSpec RunConfig::synth() const {
  SynthSpec s;
  auto f = [this](const char* k) { return static_cast<float>(get_double(k)); };
  s.height = get_int("synth.height");
  s.width = get_int("synth.width");
  s.background = f("synth.background");
  s.skyrmion_grey = f("synth.skyrmion_grey");
  s.radius_mean = f("synth.radius_mean");
  s.radius_sd = f("synth.radius_sd");
  s.radius_min = f("synth.radius_min");
  s.radius_max = f("synth.radius_max");
  s.max_eccentricity = f("synth.max_eccentricity");
  s.edge_softness = f("synth.edge_softness");
  s.min_gap = get_int("synth.min_gap");
  s.skyrmion_fraction = f("synth.skyrmion_fraction");
  s.defects_min = get_int("synth.defects_min");
  s.defects_max = get_int("synth.defects_max");
  s.defect_grey = f("synth.defect_grey");
  s.defect_radius_min = f("synth.defect_radius_min");
  s.defect_radius_max = f("synth.defect_radius_max");
  s.defect_lobes_max = get_int("synth.defect_lobes_max");
  s.defect_dark_fraction = f("synth.defect_dark_fraction");
  s.halo_grey = f("synth.halo_grey");
  s.halo_width = f("synth.halo_width");
  s.noise_sigma = f("synth.noise_sigma");
  s.gradient_max = f("synth.gradient_max");
  s.max_attempts = get_int("synth.max_attempts");
  return s;
}

void RunConfig::validate() const {
  model().validate();
  train().validate();
  loss().validate(model().num_classes);
  augment().validate();
  synth().validate();
  if (get_int("threads") < 1) throw ConfigError("config key 'threads' must be >= 1");
  for (const char* k : {"synth.train_count", "synth.val_count", "synth.test_count", "eval.speckle_max_size",
                        "probe.size", "bootstrap.min_defect_size"})
    if (get_int(k) < 0) throw ConfigError(std::string("config key '") + k + "' must be >= 0");
  const int first = get_int("probe.first"), last = get_int("probe.last");
  if (first < 0 || last > 255 || first > last)
    throw ConfigError("config keys 'probe.first'/'probe.last' must satisfy 0 <= first <= last <= 255");
  if (!(get_double("eval.hist_width") > 0.0) || !(get_double("eval.hist_hi") > get_double("eval.hist_lo")))
    throw ConfigError("config keys 'eval.hist_*' must give a positive width and hi > lo");
}

std::string RunConfig::echo() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

Overrides parse_config_text(const std::string& text, const std::string& origin) {
  Overrides out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), trim(std::string_view(line).substr(eq + 1)));
  }
  return out;
}

RunConfig resolve_config(const std::optional<fs::path>& file, const std::optional<std::string>& preset,
                         const Overrides& overrides) {
  Overrides from_file;
  std::string origin;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("config file '" + file->string() + "' cannot be read");
    std::ostringstream ss;
    ss << in.rdbuf();
    origin = file->string();
    from_file = parse_config_text(ss.str(), origin);
  }
  std::string chosen = "benchmark3";
  for (const auto& [k, v] : from_file)
    if (k == "preset") chosen = v;
  for (const auto& [k, v] : overrides)
    if (k == "preset") chosen = v;
  if (preset) chosen = *preset;

  RunConfig cfg;
  cfg.apply_preset(chosen);
  auto apply = [&](const Overrides& list, const std::string& where) {
    for (const auto& [k, v] : list) {
      if (k == "preset") continue;
      try {
        cfg.set(k, v);
      } catch (const ConfigError& e) {
        throw ConfigError(where.empty() ? e.what() : where + ": " + e.what());
      }
    }
  };
  apply(from_file, origin);
  apply(overrides, "");
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Weak-label bootstrap

ClassMask merge_defects(const ClassMask& labels, const ClassMask& predicted, int min_defect_size) {
  if (!labels.same_dims(predicted))
    throw ShapeError("merge_defects: labels " + dims_str(labels.h, labels.w) + " vs prediction " +
                     dims_str(predicted.h, predicted.w));
  ClassMask out = labels;
  for (const auto& comp : connected_components(predicted, kDefect)) {
    if (comp.size < min_defect_size) continue;
    for (const std::int32_t i : comp.pixels)
      if (out.data[static_cast<std::size_t>(i)] != kSkyrmion) out.data[static_cast<std::size_t>(i)] = kDefect;
  }
  return out;
}

namespace {

ClassMask predict_one(const UNetParams<float>& params, const UNetConfig& config, const Image& image, bool tta) {
  if (tta) return tta_predict_mask(params, config, image);
  config.check_input(image.h, image.w);
  Tensor x({1, 1, image.h, image.w});
  std::copy(image.data.begin(), image.data.end(), x.data());
  return argmax_mask(forward(params, config, x, Mode::infer).probabilities);
}

}  // namespace

Dataset bootstrap_relabel(const UNetParams<float>& params, const UNetConfig& config, const Dataset& two_class,
                          int min_defect_size, bool tta) {
  if (config.num_classes != 3)
    throw ConfigError("bootstrap: the defect model has " + std::to_string(config.num_classes) +
                      " classes; 3 are required");
  if (two_class.num_classes != 2)
    throw ConfigError("bootstrap: input labels have " + std::to_string(two_class.num_classes) +
                      " classes; 2 are required");
  validate_dataset(two_class, "bootstrap input");
  Dataset out;
  out.num_classes = 3;
  for (const auto& s : two_class.samples) {
    const ClassMask pred = predict_one(params, config, s.image, tta);
    out.samples.push_back({s.image, merge_defects(s.mask, pred, min_defect_size), s.source_id});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

Checkpoint load_model(const RunConfig& cfg) {
  const fs::path path = cfg.require_path("checkpoint");
  return load_checkpoint(path);
}

Connectivity connectivity_of(const RunConfig& cfg) {
  return cfg.get("eval.connectivity") == "4" ? Connectivity::four : Connectivity::eight;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << std::setprecision(10);
  return out;
}

// A dataset directory with images/ or a plain directory of images.
fs::path image_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
  return fs::is_directory(dir / "images") ? dir / "images" : dir;
}

fs::path mask_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
  return fs::is_directory(dir / "masks") ? dir / "masks" : dir;
}

double median_of(std::vector<int> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

void cmd_synth(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  const SynthSpec spec = cfg.synth();
  const auto seed = cfg.train().base_seed;
  const std::pair<const char*, int> splits[] = {{"train", cfg.get_int("synth.train_count")},
                                                {"val", cfg.get_int("synth.val_count")},
                                                {"test", cfg.get_int("synth.test_count")}};
  auto csv = open_out(run_dir / "synth_summary.csv");
  csv << "split,images,skyrmion_fraction,skyrmion_instances\n";
  std::uint64_t index = 0;
  for (const auto& [name, count] : splits) {
    ++index;
    if (count == 0) continue;
    const Dataset d = synth_generate(spec, count, derive_seed(seed, {index}));
    save_dataset(run_dir / name, d);
    const auto sum = split_summary(d);
    csv << name << ',' << sum.images << ',' << sum.skyrmion_fraction << ',' << sum.skyrmion_instances << '\n';
    log << "synth: " << name << " " << sum.images << " images, skyrmion fraction " << sum.skyrmion_fraction
        << ", " << sum.skyrmion_instances << " skyrmions\n";
  }
}

TrainReport cmd_train(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  const UNetConfig model = cfg.model();
  const bool collapse = cfg.get_bool("data.collapse_defects");
  const Dataset train = load_dataset(cfg.require_path("data.train"), model.num_classes, collapse);
  const Dataset val = load_dataset(cfg.require_path("data.val"), model.num_classes, collapse);
  for (const auto& w : split_summary(train).warnings) log << "warning: training set: " << w << '\n';
  for (const auto& w : split_summary(val).warnings) log << "warning: validation set: " << w << '\n';
  log << "train: " << train.size() << " training / " << val.size() << " validation images, "
      << model.num_classes << " classes, preset " << cfg.get("preset") << '\n';

  MultiRunOptions mo;
  mo.checkpoint_dir = run_dir / "checkpoints";
  fs::create_directories(mo.checkpoint_dir);
  mo.on_epoch = [&log](const RunReport& r, const EpochRecord& e) {
    log << "run " << r.run << " epoch " << e.epoch << " loss " << e.train_loss << " val_mcc " << e.val_mcc
        << " lr " << e.lr << (e.improved ? " *" : "") << '\n';
  };
  const TrainReport report = train_runs(model, train, val, cfg.train(), cfg.loss(), cfg.augment(), mo);
  write_train_csv(run_dir / "train.csv", report);
  write_train_json(run_dir / "train.json", report);

  const RunReport* best = nullptr;
  for (const auto& r : report.runs) {
    if (r.aborted) log << "warning: run " << r.run << " aborted: " << r.error << '\n';
    if (!r.aborted && !r.checkpoint.empty() && (!best || r.best_val_mcc > best->best_val_mcc)) best = &r;
  }
  if (!best) throw NumericError("train: no run produced a checkpoint");
  fs::copy_file(best->checkpoint, run_dir / "best.skrm", fs::copy_options::overwrite_existing);
  log << "train: validation MCC " << report.mean_mcc << " (SD " << report.sd_mcc << ") over "
      << (report.runs.size() - std::count_if(report.runs.begin(), report.runs.end(),
                                              [](const RunReport& r) { return r.aborted; }))
      << " of " << report.requested_runs << " runs" << (report.partial ? " [partial]" : "") << '\n';
  return report;
}

void cmd_predict(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  const Checkpoint ck = load_model(cfg);
  const fs::path input = image_dir(cfg.require_path("predict.input"));
  const auto files = list_images(input);
  if (files.empty()) throw DataError("predict: no images in '" + input.string() + "'");
  const bool tta = cfg.get_bool("predict.tta");

  std::vector<ClassMask> masks;
  for (const auto& f : files) {
    const Image img = load_image(f);
    try {
      masks.push_back(predict_one(ck.params, ck.config, img, tta));
    } catch (const ShapeError& e) {
      throw DataError("predict: '" + f.string() + "': " + e.what());
    }
  }
  fs::create_directories(run_dir / "masks");
  auto csv = open_out(run_dir / "predictions.csv");
  csv << "id,skyrmion_fraction,defect_fraction,skyrmions\n";
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string id = files[i].stem().string();
    save_mask(run_dir / "masks" / (id + ".png"), masks[i]);
    const auto fr = class_fractions(masks[i], 3);
    csv << id << ',' << fr[kSkyrmion] << ',' << fr[kDefect] << ','
        << connected_components(masks[i], kSkyrmion).size() << '\n';
  }
  log << "predict: " << files.size() << " masks" << (tta ? " (TTA)" : "") << '\n';
}

void cmd_eval(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  fs::path truth_root = cfg.get_path("eval.truth");
  if (truth_root.empty()) truth_root = cfg.get_path("data.test");
  if (truth_root.empty()) throw ConfigError("config key 'eval.truth' (or 'data.test') must be set");
  const fs::path truth_dir = mask_dir(truth_root);
  const fs::path pred_root = cfg.get_path("eval.pred");

  std::vector<std::string> ids;
  std::vector<ClassMask> truth, pred;
  if (!pred_root.empty()) {
    const fs::path pred_dir = mask_dir(pred_root);
    for (const auto& tf : list_images(truth_dir)) {
      const std::string id = tf.stem().string();
      fs::path pf = pred_dir / (id + ".png");
      if (!fs::exists(pf)) pf = pred_dir / (id + ".pgm");
      if (!fs::exists(pf))
        throw DataError("eval: no prediction for '" + tf.string() + "' in '" + pred_dir.string() + "'");
      ClassMask t = load_mask(tf, 3), p = load_mask(pf, 3);
      if (!t.same_dims(p))
        throw DataError("eval: prediction '" + pf.string() + "' is " + dims_str(p.h, p.w) + " but truth '" +
                        tf.string() + "' is " + dims_str(t.h, t.w));
      ids.push_back(id);
      truth.push_back(std::move(t));
      pred.push_back(std::move(p));
    }
  } else {
    const Checkpoint ck = load_model(cfg);
    const Dataset data = load_dataset(truth_root, 3, false);
    const bool tta = cfg.get_bool("predict.tta");
    for (const auto& s : data.samples) {
      ids.push_back(s.source_id);
      truth.push_back(s.mask);
      pred.push_back(predict_one(ck.params, ck.config, s.image, tta));
    }
  }
  if (ids.empty()) throw DataError("eval: no masks in '" + truth_dir.string() + "'");

  const Connectivity conn = connectivity_of(cfg);
  const int speckle_max = cfg.get_int("eval.speckle_max_size");
  auto csv = open_out(run_dir / "metrics.csv");
  csv << "id,tp,tn,fp,fn,mcc,speckles,skyrmions_pred,skyrmions_true\n";
  ConfusionCounts pooled;
  std::vector<int> speckles;
  std::size_t total_pred = 0, total_true = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto c = confusion_from_masks(pred[i], truth[i]);
    pooled += c;
    const int sp = speckle_count(pred[i], kSkyrmion, speckle_max, conn);
    speckles.push_back(sp);
    const auto np = connected_components(pred[i], kSkyrmion, conn).size();
    const auto nt = connected_components(truth[i], kSkyrmion, conn).size();
    total_pred += np;
    total_true += nt;
    csv << ids[i] << ',' << c.tp << ',' << c.tn << ',' << c.fp << ',' << c.fn << ',' << mcc(c) << ',' << sp << ','
        << np << ',' << nt << '\n';
  }
  const int speckle_sum = std::accumulate(speckles.begin(), speckles.end(), 0);
  csv << "pooled," << pooled.tp << ',' << pooled.tn << ',' << pooled.fp << ',' << pooled.fn << ',' << mcc(pooled)
      << ',' << speckle_sum << ',' << total_pred << ',' << total_true << '\n';

  const auto edges =
      uniform_edges(cfg.get_double("eval.hist_lo"), cfg.get_double("eval.hist_hi"), cfg.get_double("eval.hist_width"));
  const SizeHistogram hp = size_histogram(pred, kSkyrmion, edges, conn);
  const SizeHistogram ht = size_histogram(truth, kSkyrmion, edges, conn);
  write_histogram_csv(run_dir / "histogram.csv", hp);
  write_histogram_csv(run_dir / "histogram_truth.csv", ht);
  render_histogram_png(run_dir / "histogram.png", hp);

  auto sizes = open_out(run_dir / "sizes.csv");
  sizes << "which,components,mean,median,primary_mode_lo,secondary_mode_lo\n";
  for (const auto* h : {&hp, &ht}) {
    sizes << (h == &hp ? "pred" : "truth") << ',' << h->sizes.size() << ',';
    if (h->mean) sizes << *h->mean;
    sizes << ',';
    if (h->median) sizes << *h->median;
    sizes << ',';
    if (h->primary_mode) sizes << edges[*h->primary_mode];
    sizes << ',';
    if (h->secondary_mode) sizes << edges[*h->secondary_mode];
    sizes << '\n';
  }
  log << "eval: " << ids.size() << " images, pooled MCC " << mcc(pooled) << ", median speckles "
      << median_of(speckles) << ", mean skyrmion size " << hp.mean.value_or(0.0) << " (truth "
      << ht.mean.value_or(0.0) << ")\n";
}

void cmd_probe(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  const Checkpoint ck = load_model(cfg);
  const int size = cfg.get_int("probe.size");
  const ProbeResult probe =
      greyscale_probe(ck.params, ck.config, size, size, cfg.get_int("probe.first"), cfg.get_int("probe.last"));
  write_probe_csv(run_dir / "probe.csv", probe);
  render_probe_png(run_dir / "probe.png", probe);
  log << "probe: " << probe.rows.size() << " levels, transitions at";
  if (probe.transitions.empty()) log << " (none)";
  for (int t : probe.transitions) log << ' ' << t;
  log << '\n';

  const fs::path image_path = cfg.get_path("probe.image");
  if (image_path.empty()) return;
  const Image image = load_image(image_path);
  const InversionReport inv = inversion_experiment(ck.params, ck.config, image);
  auto csv = open_out(run_dir / "inversion.csv");
  csv << "class,original_fraction,inverted_fraction\n";
  for (std::size_t c = 0; c < inv.original_fractions.size(); ++c)
    csv << c << ',' << inv.original_fractions[c] << ',' << inv.inverted_fractions[c] << '\n';
  csv << "agreement," << inv.agreement << ",\n";
  save_mask(run_dir / "inversion_original.png", inv.original);
  save_mask(run_dir / "inversion_inverted.png", inv.inverted);
  log << "probe: inversion agreement " << inv.agreement << '\n';
}

void cmd_bootstrap(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  const Checkpoint ck = load_model(cfg);
  if (ck.config.num_classes != 3)
    throw ConfigError("bootstrap: checkpoint '" + cfg.get("checkpoint") + "' has " +
                      std::to_string(ck.config.num_classes) + " classes; the defect model must have 3");
  const Dataset input = load_dataset(cfg.require_path("bootstrap.input"), 2, false);
  const Dataset out =
      bootstrap_relabel(ck.params, ck.config, input, cfg.get_int("bootstrap.min_defect_size"), cfg.get_bool("bootstrap.tta"));
  save_dataset(run_dir / "relabelled", out);
  std::size_t defect_pixels = 0;
  for (const auto& s : out.samples) defect_pixels += std::count(s.mask.data.begin(), s.mask.data.end(), kDefect);
  log << "bootstrap: " << out.size() << " images relabelled, " << defect_pixels << " defect pixels\n";
}

void cmd_report(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  const auto inputs = split(cfg.get("report.inputs"), ',');
  if (inputs.empty()) throw ConfigError("config key 'report.inputs' must list at least one run directory");
  auto csv = open_out(run_dir / "report.csv");
  csv << "run_dir,preset,runs,mean_mcc,sd_mcc,partial\n";
  log << std::left << std::setw(28) << "preset" << std::setw(6) << "runs" << "MCC\n";
  for (const auto& dir : inputs) {
    const fs::path json_path = fs::path(dir) / "train.json";
    std::ifstream in(json_path);
    if (!in) throw DataError("report: cannot read '" + json_path.string() + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("report: '" + json_path.string() + "': " + e.what());
    }
    std::string preset = "?";
    std::ifstream echo(fs::path(dir) / "config.txt");
    if (echo) {
      std::ostringstream ss;
      ss << echo.rdbuf();
      for (const auto& [k, v] : parse_config_text(ss.str(), (fs::path(dir) / "config.txt").string()))
        if (k == "preset") preset = v;
    }
    const double mean = j.value("mean_mcc", 0.0), sd = j.value("sd_mcc", 0.0);
    const std::size_t runs = j.contains("runs") ? j["runs"].size() : 0;
    const bool partial = j.value("partial", false);
    csv << dir << ',' << preset << ',' << runs << ',' << mean << ',' << sd << ',' << (partial ? "true" : "false")
        << '\n';
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(3) << mean << " (SD = " << sd << ")" << (partial ? " partial" : "");
    log << std::left << std::setw(28) << preset << std::setw(6) << runs << cell.str() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Entry point

namespace {

fs::path fresh_run_dir(const fs::path& root, const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  fs::path dir = root / (std::string(stamp) + "-" + command);
  for (int i = 1; fs::exists(dir); ++i) dir = root / (std::string(stamp) + "-" + command + "-" + std::to_string(i));
  return dir;
}

struct Alias {
  const char* flag;
  const char* key;
  const char* help;
};

constexpr Alias kGlobalAliases[] = {
    {"--epochs", "train.epochs", "Training epochs"},
    {"--runs", "train.runs", "Independent training runs"},
    {"--dropout", "model.dropout", "Dropout rate"},
    {"--activation", "model.activation", "relu, prelu, tanh or mish"},
    {"--alpha", "loss.smoothing_alpha", "Label smoothing"},
    {"--checkpoint", "checkpoint", "Model checkpoint"},
    {"--train-dir", "data.train", "Training set directory"},
    {"--val-dir", "data.val", "Validation set directory"},
    {"--test-dir", "data.test", "Test set directory"},
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"U-Net skyrmion segmentation", "skyrm"};
  app.require_subcommand(1);

  std::optional<std::string> config_file, preset, seed, threads, out_root, run_dir_opt;
  std::vector<std::string> sets;
  app.add_option("--config", config_file, "key = value config file");
  app.add_option("--preset", preset, "Parameter preset");
  app.add_option("--seed", seed, "Base seed");
  app.add_option("--threads", threads, "Worker threads (1 is bit-reproducible)");
  app.add_option("--out", out_root, "Output root (default $SKYRM_OUT or ./runs)");
  app.add_option("--run-dir", run_dir_opt, "Exact run directory instead of a timestamped one");
  app.add_option("--set", sets, "key=value override (repeatable)");
  std::vector<std::pair<const Alias*, std::optional<std::string>>> aliases;
  aliases.reserve(std::size(kGlobalAliases));
  for (const auto& a : kGlobalAliases) {
    aliases.emplace_back(&a, std::nullopt);
    app.add_option(a.flag, aliases.back().second, std::string(a.help) + " (" + a.key + ")");
  }

  std::vector<std::pair<std::string, std::string>> sub_overrides;
  auto* synth = app.add_subcommand("synth", "Generate train/val/test synthetic datasets");
  auto* train = app.add_subcommand("train", "Train models and write checkpoints and reports");
  auto* predict = app.add_subcommand("predict", "Predict masks for a directory of images");
  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  auto* probe = app.add_subcommand("probe", "Greyscale probe and optional inversion experiment");
  auto* bootstrap = app.add_subcommand("bootstrap", "Weak 3-class labels from a defect model");
  auto* report = app.add_subcommand("report", "Summarize training runs");
  for (auto* s : {synth, train, predict, eval, probe, bootstrap, report}) s->fallthrough();

  std::optional<std::string> predict_input, bootstrap_input, eval_pred, eval_truth, probe_image, min_defect;
  bool tta = false;
  std::vector<std::string> report_inputs;
  predict->add_option("--input", predict_input, "Image directory (predict.input)");
  predict->add_flag("--tta", tta, "Test-time augmentation (predict.tta)");
  eval->add_option("--pred", eval_pred, "Predicted mask directory (eval.pred)");
  eval->add_option("--truth", eval_truth, "Ground-truth dataset or mask directory (eval.truth)");
  eval->add_flag("--tta", tta, "Test-time augmentation when predicting (predict.tta)");
  probe->add_option("--image", probe_image, "Image for the inversion experiment (probe.image)");
  bootstrap->add_option("--input", bootstrap_input, "2-class dataset directory (bootstrap.input)");
  bootstrap->add_option("--min-defect-size", min_defect, "bootstrap.min_defect_size");
  report->add_option("inputs", report_inputs, "Run directories (report.inputs)");

  std::vector<std::string> argv_rest(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(argv_rest.begin(), argv_rest.end());
  try {
    app.parse(argv_rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  CLI::App* cmd = app.get_subcommands().front();
  const std::string command = cmd->get_name();

  fs::path run_dir;
  fs::path created;  // topmost directory this call created
  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    if (seed) overrides.emplace_back("seed", *seed);
    if (threads) overrides.emplace_back("threads", *threads);
    for (const auto& [alias, value] : aliases)
      if (value) overrides.emplace_back(alias->key, *value);
    if (predict_input) overrides.emplace_back("predict.input", *predict_input);
    if (bootstrap_input) overrides.emplace_back("bootstrap.input", *bootstrap_input);
    if (min_defect) overrides.emplace_back("bootstrap.min_defect_size", *min_defect);
    if (eval_pred) overrides.emplace_back("eval.pred", *eval_pred);
    if (eval_truth) overrides.emplace_back("eval.truth", *eval_truth);
    if (probe_image) overrides.emplace_back("probe.image", *probe_image);
    if (tta) overrides.emplace_back("predict.tta", "true");
    if (!report_inputs.empty()) {
      std::string joined;
      for (const auto& r : report_inputs) joined += (joined.empty() ? "" : ",") + r;
      overrides.emplace_back("report.inputs", joined);
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      overrides.emplace_back(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    const std::optional<fs::path> file = config_file ? std::optional<fs::path>(*config_file) : std::nullopt;
    const RunConfig cfg = resolve_config(file, preset, overrides);
    set_num_threads(cfg.get_int("threads"));

    if (run_dir_opt) {
      run_dir = *run_dir_opt;
    } else {
      fs::path root = out_root ? fs::path(*out_root) : fs::path();
      if (root.empty())
        if (const char* env = std::getenv("SKYRM_OUT"); env && *env) root = env;
      if (root.empty()) root = "runs";
      run_dir = fresh_run_dir(root, command);
    }
    for (fs::path p = run_dir; !p.empty() && !fs::exists(p); p = p.parent_path()) {
      created = p;
      if (p == p.parent_path()) break;
    }
    fs::create_directories(run_dir);
    {
      auto echo = open_out(run_dir / "config.txt");
      echo << "# skyrm " << command << "\n" << cfg.echo();
    }

    if (command == "synth") cmd_synth(cfg, run_dir, out);
    else if (command == "train") cmd_train(cfg, run_dir, out);
    else if (command == "predict") cmd_predict(cfg, run_dir, out);
    else if (command == "eval") cmd_eval(cfg, run_dir, out);
    else if (command == "probe") cmd_probe(cfg, run_dir, out);
    else if (command == "bootstrap") cmd_bootstrap(cfg, run_dir, out);
    else cmd_report(cfg, run_dir, out);
    out << "run directory: " << run_dir.string() << '\n';
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    std::error_code ec;
    if (!created.empty()) fs::remove_all(created, ec);
    return exit_code_for(e);
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace skyrm::cli
