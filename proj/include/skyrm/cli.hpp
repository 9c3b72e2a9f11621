#pragma once

#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "skyrm/augment.hpp"
#include "skyrm/loss.hpp"
#include "skyrm/metrics.hpp"
#include "skyrm/synth.hpp"
#include "skyrm/trainer.hpp"
#include "skyrm/unet.hpp"

namespace skyrm::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitRuntime = 4,
};

/// ConfigError -> 2; DataError and ShapeError -> 3; NumericError, InternalError
/// -> 4; anything else -> 1.
int exit_code_for(const std::exception& e) noexcept;

/// Flat key=value settings. Every key has a default; unknown keys are
/// rejected. Values are kept as text and parsed on access.
class RunConfig {
 public:
  /// Built-in defaults (the benchmark3 preset).
  RunConfig();

  static const std::vector<std::string>& preset_names();
  /// The overrides a preset applies on top of the defaults.
  static const std::vector<std::pair<std::string, std::string>>& preset(const std::string& name);

  /// Resets to defaults, then applies the preset.
  void apply_preset(const std::string& name);
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool known(const std::string& key) const { return values_.contains(key); }

  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<float> get_floats(const std::string& key) const;
  /// Empty string if unset.
  std::filesystem::path get_path(const std::string& key) const;
  /// ConfigError naming the key if it is unset.
  std::filesystem::path require_path(const std::string& key) const;

  UNetConfig model() const;
  TrainConfig train() const;
  LossConfig loss() const;
  AugmentSpec augment() const;
  SynthSpec synth() const;
  /// Parses every typed key, so a bad value fails before any work starts.
  void validate() const;

  /// Sorted `key = value` lines, readable by parse_config_text.
  std::string echo() const;
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// `key = value` per line, `#` starts a comment. Errors name the line.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& origin);

/// Defaults < preset < file < overrides. The preset comes from `preset` if
/// given, else from the file's `preset` key, else benchmark3.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::optional<std::string>& preset,
                         const std::vector<std::pair<std::string, std::string>>& overrides);

/// Weak 3-class labels: predicted defect components of at least
/// `min_defect_size` pixels are painted into `labels` wherever the existing
/// label is not skyrmion.
ClassMask merge_defects(const ClassMask& labels, const ClassMask& predicted, int min_defect_size);

/// Runs a 3-class model over a 2-class dataset and merges its defects.
/// ConfigError if the model is not 3-class or the data is not 2-class.
Dataset bootstrap_relabel(const UNetParams<float>& params, const UNetConfig& config, const Dataset& two_class,
                          int min_defect_size, bool tta = false);

/// Commands write their artifacts into `run_dir` and log to `log`.
void cmd_synth(const RunConfig& cfg, const std::filesystem::path& run_dir, std::ostream& log);
TrainReport cmd_train(const RunConfig& cfg, const std::filesystem::path& run_dir, std::ostream& log);
void cmd_predict(const RunConfig& cfg, const std::filesystem::path& run_dir, std::ostream& log);
void cmd_eval(const RunConfig& cfg, const std::filesystem::path& run_dir, std::ostream& log);
void cmd_probe(const RunConfig& cfg, const std::filesystem::path& run_dir, std::ostream& log);
void cmd_bootstrap(const RunConfig& cfg, const std::filesystem::path& run_dir, std::ostream& log);
void cmd_report(const RunConfig& cfg, const std::filesystem::path& run_dir, std::ostream& log);

/// Full command line, argv[0] included.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace skyrm::cli
