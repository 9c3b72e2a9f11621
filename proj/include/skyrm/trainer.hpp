#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "skyrm/augment.hpp"
#include "skyrm/dataset.hpp"
#include "skyrm/loss.hpp"
#include "skyrm/metrics.hpp"
#include "skyrm/unet.hpp"

namespace skyrm {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int early_stop_patience = 10;  // negative disables early stopping
  int plateau_patience = 3;      // negative disables LR reduction
  double plateau_factor = 0.5;
  double min_lr = 1e-6;
  int runs = 5;
  std::uint64_t base_seed = 0;
  bool repeat_seed = false;  // every run uses base_seed instead of base_seed + i
  int crop_size = 0;         // square training crops; 0 trains on full frames

  /// Throws ConfigError on invalid values.
  void validate() const;
};

/// Improvement threshold on validation MCC.
inline constexpr double kMinImprovement = 1e-4;

/// Early-stopping and learning-rate-plateau bookkeeping. An epoch improves if
/// its validation MCC beats the best so far by at least kMinImprovement. A
/// counter of non-improving epochs that exceeds its patience triggers the
/// action (and resets for the plateau rule).
class TrainingSchedule {
 public:
  explicit TrainingSchedule(const TrainConfig& cfg);

  struct Decision {
    bool improved = false;
    bool reduced_lr = false;
    bool stop = false;
  };
  Decision observe(double val_mcc);

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  int best_epoch() const noexcept { return best_epoch_; }

 private:
  TrainConfig cfg_;
  double lr_;
  double best_ = -std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  int epoch_ = 0;
  int stop_wait_ = 0;
  int plateau_wait_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mcc = 0.0;
  double lr = 0.0;  // rate used during this epoch
  bool improved = false;
};

struct RunReport {
  int run = 0;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_mcc = 0.0;
  std::string checkpoint;  // empty if none was written
  bool stopped_early = false;
  bool aborted = false;
  std::string error;
  std::uint64_t clamped_probabilities = 0;
};

struct TrainReport {
  std::vector<RunReport> runs;
  int requested_runs = 0;
  double mean_mcc = 0.0;
  double sd_mcc = 0.0;  // population standard deviation
  bool partial = false;
};

struct FitOptions {
  std::filesystem::path checkpoint_path;  // best-MCC checkpoint; empty keeps it in memory only
  std::function<void(const RunReport&, const EpochRecord&)> on_epoch;
};

struct FitResult {
  RunReport report;
  UNetParams<float> best_params;
};

/// Trains one model from init_params(config, seed). Each epoch shuffles the
/// training set, augments and crops every sample with a seed derived from
/// (seed, epoch, sample index), takes one Adam step per mini-batch, then scores
/// the validation set by pooled-pixel MCC (skyrmion positive). The returned
/// parameters are those of the best validation epoch.
FitResult fit(const UNetConfig& config, const Dataset& train, const Dataset& val, const TrainConfig& tc,
              const LossConfig& lc, const AugmentSpec& aug, std::uint64_t seed, const FitOptions& opts = {});

struct MultiRunOptions {
  std::filesystem::path checkpoint_dir;  // run i writes run<i>.skrm here if set
  std::function<void(const RunReport&, const EpochRecord&)> on_epoch;
};

/// tc.runs independent fits with seeds base_seed + i. An aborted run is
/// recorded and marks the report partial; the aggregate then covers only the
/// completed runs.
TrainReport train_runs(const UNetConfig& config, const Dataset& train, const Dataset& val, const TrainConfig& tc,
                       const LossConfig& lc, const AugmentSpec& aug, const MultiRunOptions& opts = {});

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};
/// Mean and population standard deviation; zeros for an empty input.
MeanSd mean_and_sd(std::span<const double> values);

/// Infer-mode masks for every sample, evaluated in batches.
std::vector<ClassMask> predict_masks(const UNetParams<float>& params, const UNetConfig& config,
                                     const Dataset& data, int batch_size = 8);

/// Pooled confusion counts of predictions against the dataset's masks.
ConfusionCounts evaluate_counts(const UNetParams<float>& params, const UNetConfig& config, const Dataset& data,
                                int batch_size = 8);

/// One row per epoch per run: run,seed,epoch,train_loss,val_mcc,lr,improved.
void write_train_csv(const std::filesystem::path& path, const TrainReport& report);
/// Per-run summaries plus the aggregate.
void write_train_json(const std::filesystem::path& path, const TrainReport& report);

}  // namespace skyrm
