#include "skyrm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"

#include "skyrm/adam.hpp"
#include "skyrm/checkpoint.hpp"
#include "skyrm/rng.hpp"

namespace skyrm {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train." + msg); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau_factor must be in (0, 1)");
  if (!(min_lr >= 0.0) || min_lr > learning_rate) fail("min_lr must be in [0, learning_rate]");
  if (runs < 1) fail("runs must be >= 1");
  if (crop_size < 0) fail("crop_size must be >= 0");
}

TrainingSchedule::TrainingSchedule(const TrainConfig& cfg) : cfg_(cfg), lr_(cfg.learning_rate) {}

TrainingSchedule::Decision TrainingSchedule::observe(double val_mcc) {
  ++epoch_;
  Decision d;
  if (val_mcc - best_ >= kMinImprovement) {
    d.improved = true;
    best_ = val_mcc;
    best_epoch_ = epoch_;
    stop_wait_ = 0;
    plateau_wait_ = 0;
    return d;
  }
  ++stop_wait_;
  ++plateau_wait_;
  if (cfg_.plateau_patience >= 0 && plateau_wait_ > cfg_.plateau_patience) {
    const double next = std::max(cfg_.min_lr, lr_ * cfg_.plateau_factor);
    d.reduced_lr = next < lr_;
    lr_ = next;
    plateau_wait_ = 0;
  }
  if (cfg_.early_stop_patience >= 0 && stop_wait_ > cfg_.early_stop_patience) d.stop = true;
  return d;
}

MeanSd mean_and_sd(std::span<const double> values) {
  MeanSd r;
  if (values.empty()) return r;
  const double n = static_cast<double>(values.size());
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.sd = std::sqrt(ss / n);
  return r;
}

std::vector<ClassMask> predict_masks(const UNetParams<float>& params, const UNetConfig& config, const Dataset& data,
                                     int batch_size) {
  std::vector<ClassMask> out;
  out.reserve(data.size());
  std::size_t i = 0;
  while (i < data.size()) {
    // Batch consecutive samples of equal dims.
    std::vector<Image> batch;
    const Image& first = data.samples[i].image;
    while (i < data.size() && static_cast<int>(batch.size()) < batch_size &&
           data.samples[i].image.same_dims(first))
      batch.push_back(data.samples[i++].image);
    for (auto& m : predict(params, config, images_to_tensor(batch))) out.push_back(std::move(m));
  }
  return out;
}

ConfusionCounts evaluate_counts(const UNetParams<float>& params, const UNetConfig& config, const Dataset& data,
                                int batch_size) {
  const auto preds = predict_masks(params, config, data, batch_size);
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) c += confusion_from_masks(preds[i], data.samples[i].mask);
  return c;
}

namespace {

enum SeedStream : std::uint64_t { kShuffle = 0x5348, kAugment = 1, kCrop = 2, kDropout = 3 };

void check_sets(const UNetConfig& config, const Dataset& train, const Dataset& val, const TrainConfig& tc) {
  if (train.empty()) throw DataError("fit: training set is empty");
  if (val.empty()) throw DataError("fit: validation set is empty");
  for (const auto* d : {&train, &val})
    if (d->num_classes != config.num_classes)
      throw ConfigError("fit: " + std::string(d == &train ? "training" : "validation") + " set has " +
                        std::to_string(d->num_classes) + " classes but model.num_classes is " +
                        std::to_string(config.num_classes));
  validate_dataset(train, "training set");
  validate_dataset(val, "validation set");
  const Image& ref = train.samples.front().image;
  for (const auto& s : train.samples) {
    if (tc.crop_size > 0) {
      if (s.image.h < tc.crop_size || s.image.w < tc.crop_size)
        throw DataError("fit: sample '" + s.source_id + "' is smaller than train.crop_size " +
                        std::to_string(tc.crop_size));
    } else if (!s.image.same_dims(ref)) {
      throw DataError("fit: training images differ in size (" + dims_str(ref.h, ref.w) + " vs " +
                      dims_str(s.image.h, s.image.w) + " for '" + s.source_id + "'); set train.crop_size");
    }
  }
  if (tc.crop_size > 0) config.check_input(tc.crop_size, tc.crop_size);
  else config.check_input(ref.h, ref.w);
  for (const auto& s : val.samples) config.check_input(s.image.h, s.image.w);
}

Sample crop(const Sample& s, int size, std::uint64_t seed) {
  if (size <= 0 || (s.image.h == size && s.image.w == size)) return s;
  std::mt19937_64 rng(seed);
  const int y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(s.image.h - size + 1));
  const int x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(s.image.w - size + 1));
  Sample out{Image(size, size), ClassMask(size, size), s.source_id};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      out.image.at(y, x) = s.image.at(y0 + y, x0 + x);
      out.mask.at(y, x) = s.mask.at(y0 + y, x0 + x);
    }
  return out;
}

}  // namespace

FitResult fit(const UNetConfig& config, const Dataset& train, const Dataset& val, const TrainConfig& tc,
              const LossConfig& lc, const AugmentSpec& aug, std::uint64_t seed, const FitOptions& opts) {
  config.validate();
  tc.validate();
  lc.validate(config.num_classes);
  aug.validate();
  check_sets(config, train, val, tc);

  FitResult result;
  RunReport& rep = result.report;
  rep.seed = seed;
  UNetParams<float> params = init_params(config, seed);
  result.best_params = params;
  AdamState adam;
  TrainingSchedule schedule(tc);

  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(seed, {e, kShuffle}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const double lr = schedule.lr();
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size), ++batch_index) {
      const std::size_t count = std::min(order.size() - start, static_cast<std::size_t>(tc.batch_size));
      std::vector<Sample> batch;
      batch.reserve(count);
      for (std::size_t j = 0; j < count; ++j) {
        const std::size_t idx = order[start + j];
        const Sample& src = train.samples[idx];
        Sample s = aug.any() ? augment_sample(src, aug, derive_seed(seed, {e, idx, kAugment})) : src;
        batch.push_back(crop(s, tc.crop_size, derive_seed(seed, {e, idx, kCrop})));
      }
      const int h = batch.front().image.h, w = batch.front().image.w;
      Tensor x({static_cast<int>(count), 1, h, w});
      Tensor targets({static_cast<int>(count), config.num_classes, h, w});
      for (std::size_t j = 0; j < count; ++j) {
        std::copy(batch[j].image.data.begin(), batch[j].image.data.end(), x.item(static_cast<int>(j)));
        smoothed_targets_into(targets, static_cast<int>(j), batch[j].mask, lc.smoothing_alpha);
      }
      auto fwd = forward(params, config, x, Mode::train, derive_seed(seed, {e, batch_index, kDropout}));
      auto loss = cross_entropy_loss(fwd.probabilities, targets, lc.class_weights);
      rep.clamped_probabilities += loss.clamped;
      auto grads = backward(fwd.tape, loss.grad_logits);
      adam_step(params, grads.params, config, adam, lr);
      loss_sum += loss.loss * static_cast<double>(count);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_mcc = mcc(evaluate_counts(params, config, val, tc.batch_size));
    rec.lr = lr;
    const auto decision = schedule.observe(rec.val_mcc);
    rec.improved = decision.improved;
    rep.epochs.push_back(rec);
    if (decision.improved) {
      result.best_params = params;
      rep.best_epoch = epoch;
      rep.best_val_mcc = rec.val_mcc;
      if (!opts.checkpoint_path.empty()) {
        save_checkpoint(opts.checkpoint_path, {config, params, {epoch, rec.val_mcc, seed}});
        rep.checkpoint = opts.checkpoint_path.string();
      }
    }
    if (opts.on_epoch) opts.on_epoch(rep, rec);
    if (decision.stop) {
      rep.stopped_early = epoch < tc.epochs;
      break;
    }
  }
  return result;
}

TrainReport train_runs(const UNetConfig& config, const Dataset& train, const Dataset& val, const TrainConfig& tc,
                       const LossConfig& lc, const AugmentSpec& aug, const MultiRunOptions& opts) {
  tc.validate();
  TrainReport report;
  report.requested_runs = tc.runs;
  std::vector<double> finals;
  for (int i = 0; i < tc.runs; ++i) {
    const std::uint64_t seed = tc.repeat_seed ? tc.base_seed : tc.base_seed + static_cast<std::uint64_t>(i);
    FitOptions fo;
    if (!opts.checkpoint_dir.empty())
      fo.checkpoint_path = opts.checkpoint_dir / ("run" + std::to_string(i) + ".skrm");
    if (opts.on_epoch)
      fo.on_epoch = [&, i](const RunReport& r, const EpochRecord& e) {
        RunReport tagged = r;
        tagged.run = i;
        opts.on_epoch(tagged, e);
      };
    try {
      FitResult r = fit(config, train, val, tc, lc, aug, seed, fo);
      r.report.run = i;
      finals.push_back(r.report.best_val_mcc);
      report.runs.push_back(std::move(r.report));
    } catch (const NumericError& e) {
      RunReport failed;
      failed.run = i;
      failed.seed = seed;
      failed.aborted = true;
      failed.error = e.what();
      report.runs.push_back(std::move(failed));
      report.partial = true;
    }
  }
  const MeanSd s = mean_and_sd(finals);
  report.mean_mcc = s.mean;
  report.sd_mcc = s.sd;
  return report;
}

void write_train_csv(const std::filesystem::path& path, const TrainReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "run,seed,epoch,train_loss,val_mcc,lr,improved\n";
  out.precision(10);
  for (const auto& r : report.runs)
    for (const auto& e : r.epochs)
      out << r.run << ',' << r.seed << ',' << e.epoch << ',' << e.train_loss << ',' << e.val_mcc << ',' << e.lr
          << ',' << (e.improved ? 1 : 0) << '\n';
}

void write_train_json(const std::filesystem::path& path, const TrainReport& report) {
  nlohmann::json j;
  j["requested_runs"] = report.requested_runs;
  j["completed_runs"] = std::count_if(report.runs.begin(), report.runs.end(), [](const RunReport& r) { return !r.aborted; });
  j["mean_mcc"] = report.mean_mcc;
  j["sd_mcc"] = report.sd_mcc;
  j["partial"] = report.partial;
  j["runs"] = nlohmann::json::array();
  for (const auto& r : report.runs) {
    nlohmann::json jr;
    jr["run"] = r.run;
    jr["seed"] = r.seed;
    jr["epochs_trained"] = r.epochs.size();
    jr["best_epoch"] = r.best_epoch;
    jr["best_val_mcc"] = r.best_val_mcc;
    jr["checkpoint"] = r.checkpoint;
    jr["stopped_early"] = r.stopped_early;
    jr["aborted"] = r.aborted;
    if (!r.error.empty()) jr["error"] = r.error;
    jr["clamped_probabilities"] = r.clamped_probabilities;
    jr["val_mcc"] = nlohmann::json::array();
    jr["train_loss"] = nlohmann::json::array();
    for (const auto& e : r.epochs) {
      jr["val_mcc"].push_back(e.val_mcc);
      jr["train_loss"].push_back(e.train_loss);
    }
    j["runs"].push_back(std::move(jr));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

}  // namespace skyrm
