#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "skyrm/adam.hpp"
#include "skyrm/checkpoint.hpp"
#include "skyrm/gradcheck.hpp"
#include "skyrm/layers.hpp"
#include "skyrm/loss.hpp"
#include "skyrm/synth.hpp"
#include "skyrm/trainer.hpp"

using namespace skyrm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& sub) {
  auto dir = fs::temp_directory_path() / "skyrm_test_opt" / sub;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ClassMask random_mask(int h, int w, int k, std::mt19937_64& rng) {
  ClassMask m(h, w);
  std::uniform_int_distribution<int> cls(0, k - 1);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(cls(rng));
  return m;
}

// Independent scalar Adam in long double.
struct ScalarAdam {
  long double m = 0, v = 0;
  int t = 0;
  long double step(long double x, long double g, long double lr) {
    ++t;
    m = 0.9L * m + 0.1L * g;
    v = 0.999L * v + 0.001L * g * g;
    const long double mh = m / (1 - std::pow(0.9L, t));
    const long double vh = v / (1 - std::pow(0.999L, t));
    return x - lr * mh / (std::sqrt(vh) + 1e-8L);
  }
};

Dataset small_set(int count, std::uint64_t seed) {
  SynthSpec s;
  s.height = s.width = 64;
  s.skyrmion_fraction = 0.1f;
  return synth_generate(s, count, seed);
}

UNetConfig small_config(int classes = 3) {
  UNetConfig c;
  c.depth = 1;
  c.base_channels = 4;
  c.num_classes = classes;
  c.input_h = c.input_w = 64;
  return c;
}

TrainConfig short_train(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 4;
  tc.runs = 1;
  tc.crop_size = 32;
  return tc;
}

}  // namespace

TEST_CASE("smoothed targets") {
  ClassMask m(2, 3);
  m.data = {0, 1, 2, 0, 0, 1};
  SUBCASE("alpha 0 is one-hot") {
    const Tensor t = smoothed_targets(m, 3, 0.0f);
    for (std::size_t i = 0; i < m.size(); ++i)
      for (int c = 0; c < 3; ++c) CHECK(t.plane(0, c)[i] == (m.data[i] == c ? 1.0f : 0.0f));
  }
  SUBCASE("alpha 0.2, three classes") {
    const Tensor t = smoothed_targets(m, 3, 0.2f);
    CHECK(t.plane(0, 0)[0] == doctest::Approx(0.8 + 0.2 / 3).epsilon(1e-6));
    CHECK(t.plane(0, 1)[0] == doctest::Approx(0.2 / 3).epsilon(1e-6));
    CHECK(t.plane(0, 2)[0] == doctest::Approx(0.2 / 3).epsilon(1e-6));
    CHECK(t.plane(0, 0)[0] == doctest::Approx(0.8667).epsilon(1e-4));
  }
  SUBCASE("rows sum to one") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> a(0.0f, 0.99f);
    for (int trial = 0; trial < 50; ++trial) {
      const int k = 2 + trial % 3;
      const ClassMask r = random_mask(5, 4, k, rng);
      const float alpha = a(rng);
      const Tensor t = smoothed_targets(r, k, alpha);
      for (std::size_t i = 0; i < r.size(); ++i) {
        double s = 0;
        for (int c = 0; c < k; ++c) {
          CHECK(t.plane(0, c)[i] > 0.0f - 1e-9f);
          s += t.plane(0, c)[i];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
  SUBCASE("class out of range") {
    CHECK_THROWS_AS(smoothed_targets(m, 2, 0.1f), DataError);
  }
}

TEST_CASE("loss config validation") {
  LossConfig lc;
  CHECK_NOTHROW(lc.validate(3));
  lc.smoothing_alpha = 1.0f;
  CHECK_THROWS_AS(lc.validate(3), ConfigError);
  lc.smoothing_alpha = -0.1f;
  CHECK_THROWS_AS(lc.validate(3), ConfigError);
  lc.smoothing_alpha = 0.1f;
  lc.class_weights = {1.0f, 2.0f};
  CHECK_THROWS_AS(lc.validate(3), ConfigError);
  lc.class_weights = {1.0f, 0.0f, 1.0f};
  CHECK_THROWS_AS(lc.validate(3), ConfigError);
}

TEST_CASE("cross-entropy values") {
  ClassMask m(2, 2);
  m.data = {0, 1, 2, 1};
  const Tensor t = smoothed_targets(m, 3, 0.0f);

  SUBCASE("prediction equal to the one-hot target gives zero") {
    const auto r = cross_entropy_loss(t, t);
    CHECK(r.loss == 0.0);
    CHECK(r.clamped == 0);
  }
  SUBCASE("uniform prediction gives ln K") {
    Tensor p(t.shape(), 1.0f / 3.0f);
    const auto r = cross_entropy_loss(p, t);
    CHECK(r.loss == doctest::Approx(std::log(3.0)).epsilon(1e-6));
    const Tensor ts = smoothed_targets(m, 3, 0.2f);
    CHECK(cross_entropy_loss(p, ts).loss == doctest::Approx(std::log(3.0)).epsilon(1e-6));
  }
  SUBCASE("non-negative for alpha 0") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd(0.0, 3.0);
    for (int trial = 0; trial < 100; ++trial) {
      BasicTensor<double> logits({2, 3, 3, 3});
      for (auto& v : logits.values()) v = nd(rng);
      const auto p = softmax_channelwise(logits);
      BasicTensor<double> tg({2, 3, 3, 3});
      for (int n = 0; n < 2; ++n) {
        const ClassMask r = random_mask(3, 3, 3, rng);
        const Tensor one = smoothed_targets(r, 3, 0.0f);
        for (int c = 0; c < 3; ++c)
          for (std::size_t i = 0; i < 9; ++i) tg.plane(n, c)[i] = one.plane(0, c)[i];
      }
      CHECK(cross_entropy_loss(p, tg).loss >= 0.0);
    }
  }
  SUBCASE("clamped probabilities are counted") {
    Tensor p(t.shape(), 0.0f);
    // every pixel predicts class 0 with certainty; three targets miss it
    std::fill_n(p.plane(0, 0), 4, 1.0f);
    const auto r = cross_entropy_loss(p, t);
    CHECK(r.clamped == 3);
    CHECK(std::isfinite(r.loss));
    CHECK(r.loss == doctest::Approx(3.0 * -std::log(1e-12) / 4.0).epsilon(1e-9));
  }
  SUBCASE("class weights") {
    Tensor p(t.shape(), 1.0f / 3.0f);
    const std::vector<float> w{1.0f, 2.0f, 4.0f};
    // pixel weights 1, 2, 4, 2
    CHECK(cross_entropy_loss(p, t, w).loss == doctest::Approx(9.0 / 4.0 * std::log(3.0)).epsilon(1e-6));
  }
}

TEST_CASE("cross-entropy logits gradient against finite differences") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 1.5);
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const int k = 2 + trial % 2;
    const float alpha = trial % 3 == 0 ? 0.0f : 0.2f;
    std::vector<float> weights;
    if (trial % 4 == 1)
      for (int c = 0; c < k; ++c) weights.push_back(0.5f + static_cast<float>(c));
    const ClassMask mask = random_mask(2, 2, k, rng);
    const Tensor tf = smoothed_targets(mask, k, alpha);
    BasicTensor<double> targets(tf.shape());
    std::copy(tf.values().begin(), tf.values().end(), targets.values().begin());

    BasicTensor<double> logits(targets.shape());
    for (auto& v : logits.values()) v = nd(rng);
    const auto analytic = cross_entropy_loss(softmax_channelwise(logits), targets, weights);

    auto loss = [&](std::span<const double> x) {
      BasicTensor<double> l(targets.shape());
      std::copy(x.begin(), x.end(), l.values().begin());
      return cross_entropy_loss(softmax_channelwise(l), targets, weights).loss;
    };
    GradCheckOptions opts;
    opts.epsilon = 1e-6;
    opts.tolerance = 1e-5;
    const auto rep = gradient_check<double>(loss, logits.values(), analytic.grad_logits.values(), opts);
    CHECK(rep.max_rel_error < 1e-5);
  }
}

TEST_CASE("adam update") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    std::vector<float> p{0.5f, -1.25f, 3.0f}, g(3, 0.0f), m(3, 0.0f), v(3, 0.0f);
    const auto before = p;
    for (std::uint64_t t = 1; t <= 5; ++t) adam_update(p, g, m, v, t, 1e-3);
    CHECK(p == before);
  }
  SUBCASE("first step moves by lr / (1 + eps)") {
    std::vector<float> p{1.0f}, g{1.0f}, m{0.0f}, v{0.0f};
    adam_update(p, g, m, v, 1, 1e-3);
    CHECK(static_cast<double>(p[0]) == doctest::Approx(1.0 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-7));
  }
  SUBCASE("x squared against the scalar oracle") {
    std::vector<float> p{1.0f}, g(1), m{0.0f}, v{0.0f};
    ScalarAdam ref;
    long double x = 1.0L;
    const double lr = 0.05;
    for (std::uint64_t t = 1; t <= 200; ++t) {
      g[0] = 2.0f * p[0];
      adam_update(p, g, m, v, t, lr);
      x = ref.step(x, 2 * x, lr);
    }
    CHECK(std::abs(p[0]) < 0.05f);
    CHECK(static_cast<double>(p[0]) == doctest::Approx(static_cast<double>(x)).epsilon(1e-3));
  }
}

TEST_CASE("adam step over a network") {
  UNetConfig c = small_config();
  auto params = init_params(c, 1);
  auto grads = init_params(c, 2);
  AdamState state;
  const auto v0 = params.version;
  adam_step(params, grads, c, state, 1e-3);
  CHECK(params.version == v0 + 1);
  CHECK(state.step == 1);

  SUBCASE("non-finite gradient names the tensor and leaves params alone") {
    auto views = param_views(grads, c);
    views.back().values[0] = std::numeric_limits<float>::quiet_NaN();
    const auto snapshot = params;
    try {
      adam_step(params, grads, c, state, 1e-3);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find(views.back().name) != std::string::npos);
    }
    CHECK(param_views(params, c)[0].values[0] == param_views(snapshot, c)[0].values[0]);
    for (std::size_t k = 0; k < views.size(); ++k) {
      const auto a = param_views(params, c)[k].values;
      const auto b = param_views(snapshot, c)[k].values;
      CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
    }
    CHECK(params.version == v0 + 1);
    CHECK(state.step == 1);
  }
}

TEST_CASE("training schedule") {
  SUBCASE("patience 0 stops after the first non-improving epoch") {
    TrainConfig tc;
    tc.early_stop_patience = 0;
    tc.plateau_patience = -1;
    TrainingSchedule s(tc);
    CHECK(s.observe(0.5).improved);
    const auto d = s.observe(0.5);
    CHECK_FALSE(d.improved);
    CHECK(d.stop);
    CHECK(s.best_epoch() == 1);
  }
  SUBCASE("improvement threshold") {
    TrainConfig tc;
    TrainingSchedule s(tc);
    s.observe(0.5);
    CHECK_FALSE(s.observe(0.5 + 0.5e-4).improved);
    CHECK(s.observe(0.5 + 1.5e-4).improved);
    CHECK(s.best_epoch() == 3);
  }
  SUBCASE("plateau halves the rate every two flat epochs down to the floor") {
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.plateau_patience = 1;
    tc.plateau_factor = 0.5;
    tc.min_lr = 1e-4;
    tc.early_stop_patience = -1;
    TrainingSchedule s(tc);
    s.observe(0.3);
    std::vector<double> rates;
    for (int e = 0; e < 12; ++e) {
      s.observe(0.3);
      rates.push_back(s.lr());
    }
    const std::vector<double> expect{1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4, 1.25e-4, 1.25e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4};
    REQUIRE(rates.size() == expect.size());
    for (std::size_t i = 0; i < rates.size(); ++i) CHECK(rates[i] == doctest::Approx(expect[i]));
  }
  SUBCASE("rate never increases and never drops below the floor") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-0.2, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      TrainConfig tc;
      tc.plateau_patience = trial % 4;
      tc.early_stop_patience = -1;
      tc.min_lr = 1e-5;
      TrainingSchedule s(tc);
      double prev = s.lr();
      for (int e = 0; e < 60; ++e) {
        s.observe(u(rng));
        CHECK(s.lr() <= prev);
        CHECK(s.lr() >= tc.min_lr);
        prev = s.lr();
      }
    }
  }
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.epochs = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = {};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = {};
  tc.plateau_factor = 1.0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
  tc = {};
  tc.runs = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("mean and population sd") {
  const std::vector<double> a{0.8, 0.9};
  const auto r = mean_and_sd(a);
  CHECK(r.mean == doctest::Approx(0.85));
  CHECK(r.sd == doctest::Approx(0.05));
  const std::vector<double> one{0.7};
  CHECK(mean_and_sd(one).sd == 0.0);
  CHECK(mean_and_sd(std::span<const double>{}).mean == 0.0);
}

TEST_CASE("fit is deterministic and keeps the best epoch") {
  const Dataset train = small_set(6, 1);
  const Dataset val = small_set(3, 2);
  const UNetConfig c = small_config();
  TrainConfig tc = short_train(4);
  tc.early_stop_patience = -1;
  const auto dir = temp_dir("fit");

  FitOptions fo;
  fo.checkpoint_path = dir / "best.skrm";
  const FitResult a = fit(c, train, val, tc, LossConfig{}, AugmentSpec::standard(), 7, fo);
  const FitResult b = fit(c, train, val, tc, LossConfig{}, AugmentSpec::standard(), 7);

  REQUIRE(a.report.epochs.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.report.epochs[i].train_loss == b.report.epochs[i].train_loss);
    CHECK(a.report.epochs[i].val_mcc == b.report.epochs[i].val_mcc);
  }
  const auto pa = param_views(a.best_params, c), pb = param_views(b.best_params, c);
  for (std::size_t k = 0; k < pa.size(); ++k)
    CHECK(std::equal(pa[k].values.begin(), pa[k].values.end(), pb[k].values.begin(), pb[k].values.end()));

  double best = -2;
  int best_epoch = 0;
  for (const auto& e : a.report.epochs)
    if (e.val_mcc >= best + kMinImprovement) best = e.val_mcc, best_epoch = e.epoch;
  CHECK(a.report.best_epoch == best_epoch);
  CHECK(a.report.best_val_mcc == best);

  const Checkpoint ck = load_checkpoint(fo.checkpoint_path, &c);
  CHECK(ck.meta.epoch == best_epoch);
  CHECK(ck.meta.best_val_mcc == best);
  CHECK(ck.meta.seed == 7);
  CHECK(mcc(evaluate_counts(ck.params, c, val)) == doctest::Approx(best).epsilon(1e-12));

  const FitResult other = fit(c, train, val, tc, LossConfig{}, AugmentSpec::standard(), 8);
  CHECK(other.report.epochs[0].train_loss != a.report.epochs[0].train_loss);
}

TEST_CASE("fit input checks") {
  const Dataset train = small_set(2, 1);
  const UNetConfig c2 = small_config(2);
  CHECK_THROWS_AS(fit(c2, train, train, short_train(1), {}, {}, 0), ConfigError);
  CHECK_THROWS_AS(fit(small_config(), Dataset{}, train, short_train(1), {}, {}, 0), DataError);
  CHECK_THROWS_AS(fit(small_config(), train, Dataset{}, short_train(1), {}, {}, 0), DataError);
  TrainConfig big = short_train(1);
  big.crop_size = 128;
  CHECK_THROWS_AS(fit(small_config(), train, train, big, {}, {}, 0), DataError);
  LossConfig lc;
  lc.smoothing_alpha = 2.0f;
  CHECK_THROWS_AS(fit(small_config(), train, train, short_train(1), lc, {}, 0), ConfigError);
}

TEST_CASE("multi-run aggregate and reports") {
  const Dataset train = small_set(4, 3);
  const Dataset val = small_set(2, 4);
  const UNetConfig c = small_config();
  TrainConfig tc = short_train(2);
  tc.runs = 2;

  SUBCASE("repeat seed gives identical runs") {
    tc.repeat_seed = true;
    tc.base_seed = 5;
    const auto rep = train_runs(c, train, val, tc, {}, {});
    REQUIRE(rep.runs.size() == 2);
    CHECK(rep.runs[0].seed == 5);
    CHECK(rep.runs[1].seed == 5);
    CHECK(rep.sd_mcc == 0.0);
    CHECK_FALSE(rep.partial);
  }
  SUBCASE("seeds, checkpoints, csv and json") {
    tc.base_seed = 10;
    const auto dir = temp_dir("runs");
    MultiRunOptions mo;
    mo.checkpoint_dir = dir;
    int calls = 0;
    mo.on_epoch = [&](const RunReport& r, const EpochRecord&) { CHECK(r.run == calls++ / 2); };
    const auto rep = train_runs(c, train, val, tc, {}, {}, mo);
    CHECK(calls == 4);
    REQUIRE(rep.runs.size() == 2);
    CHECK(rep.runs[1].seed == 11);
    const std::vector<double> finals{rep.runs[0].best_val_mcc, rep.runs[1].best_val_mcc};
    CHECK(rep.mean_mcc == doctest::Approx(mean_and_sd(finals).mean));
    CHECK(rep.sd_mcc == doctest::Approx(mean_and_sd(finals).sd));
    for (const auto& r : rep.runs)
      if (r.best_epoch > 0) CHECK(fs::exists(r.checkpoint));

    write_train_csv(dir / "train.csv", rep);
    std::ifstream csv(dir / "train.csv");
    std::string header, row;
    std::getline(csv, header);
    CHECK(header == "run,seed,epoch,train_loss,val_mcc,lr,improved");
    int rows = 0;
    while (std::getline(csv, row))
      if (!row.empty()) ++rows;
    CHECK(rows == 4);

    write_train_json(dir / "train.json", rep);
    std::ifstream js(dir / "train.json");
    const auto j = nlohmann::json::parse(js);
    CHECK(j["runs"].size() == 2);
    CHECK(j["mean_mcc"].get<double>() == doctest::Approx(rep.mean_mcc));
    CHECK(j["partial"].get<bool>() == false);
  }
  SUBCASE("a non-finite run is recorded and marks the report partial") {
    Dataset bad = train;
    bad.samples[0].image.data.assign(bad.samples[0].image.size(), std::numeric_limits<float>::quiet_NaN());
    tc.crop_size = 0;
    const auto rep = train_runs(c, bad, val, tc, {}, {});
    CHECK(rep.partial);
    REQUIRE(rep.runs.size() == 2);
    CHECK(rep.runs[0].aborted);
    CHECK_FALSE(rep.runs[0].error.empty());
    CHECK(rep.requested_runs == 2);
  }
}

TEST_CASE("overfit oracle: 8 images, 200 epochs") {
  SynthSpec s;
  s.height = s.width = 64;
  s.skyrmion_fraction = 0.1f;
  const Dataset d = synth_generate(s, 8, 5);
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 8;
  c.num_classes = 3;
  c.input_h = c.input_w = 64;
  c.dropout_rate = 0.0f;  // leaves Adam as the only source of epoch-to-epoch noise
  TrainConfig tc;
  tc.epochs = 200;
  tc.early_stop_patience = -1;
  tc.plateau_patience = -1;
  tc.runs = 1;

  std::vector<double> loss;
  FitOptions fo;
  fo.on_epoch = [&](const RunReport&, const EpochRecord& e) { loss.push_back(e.train_loss); };
  const FitResult r = fit(c, d, d, tc, LossConfig{}, AugmentSpec{}, 0, fo);
  const double train_mcc = mcc(evaluate_counts(r.best_params, c, d));
  MESSAGE("overfit training MCC " << train_mcc);
  CHECK(train_mcc > 0.95);

  // Every 20-epoch window trends down; rises above a 0.5% band count as
  // non-monotone epochs, at most two per window.
  REQUIRE(loss.size() == 200);
  for (std::size_t start = 0; start + 19 < loss.size(); ++start) {
    CAPTURE(start);
    CHECK(loss[start + 19] < loss[start]);
    int rises = 0;
    for (std::size_t i = start + 1; i < start + 20; ++i)
      if (loss[i] > loss[i - 1] * 1.005) ++rises;
    CHECK(rises <= 2);
  }
}
