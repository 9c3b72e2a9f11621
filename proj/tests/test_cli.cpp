#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "skyrm/checkpoint.hpp"
#include "skyrm/cli.hpp"
#include "skyrm/image_io.hpp"
#include "skyrm/synth.hpp"

using namespace skyrm;
using namespace skyrm::cli;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& sub) {
  auto dir = fs::temp_directory_path() / "skyrm_test_cli" / sub;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Outcome {
  int code = -1;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "skyrm");
  std::ostringstream out, err;
  Outcome o;
  o.code = run_cli(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> echoed(const fs::path& run_dir) {
  std::map<std::string, std::string> m;
  for (const auto& [k, v] : parse_config_text(slurp(run_dir / "config.txt"), "echo")) m[k] = v;
  return m;
}

// Path, size and content of every file under `dir`.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) m[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return m;
}

std::vector<std::string> small_synth_flags() {
  return {"--set", "synth.height=64",     "--set", "synth.width=64",     "--set", "synth.skyrmion_fraction=0.1",
          "--set", "synth.train_count=6", "--set", "synth.val_count=3", "--set", "synth.test_count=3"};
}

std::vector<std::string> small_model_flags() {
  return {"--set", "model.depth=1", "--set", "model.base_channels=4", "--set", "train.crop_size=32",
          "--set", "train.batch_size=3", "--epochs", "2", "--runs", "1", "--threads", "1"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("config defaults and presets") {
  SUBCASE("empty file gives the defaults and benchmark3") {
    const auto dir = temp_dir("empty");
    std::ofstream(dir / "empty.cfg") << "# nothing here\n\n";
    const RunConfig cfg = resolve_config(dir / "empty.cfg", std::nullopt, {});
    CHECK(cfg.get("preset") == "benchmark3");
    CHECK(cfg.echo() == RunConfig().echo());
    const UNetConfig m = cfg.model();
    CHECK(m == UNetConfig{});
    const TrainConfig t = cfg.train();
    CHECK(t.epochs == TrainConfig{}.epochs);
    CHECK(t.early_stop_patience == TrainConfig{}.early_stop_patience);
    CHECK(t.min_lr == TrainConfig{}.min_lr);
    CHECK(cfg.loss().smoothing_alpha == LossConfig{}.smoothing_alpha);
    CHECK_FALSE(cfg.augment().any());
    const SynthSpec s = cfg.synth(), d{};
    CHECK(s.skyrmion_fraction == d.skyrmion_fraction);
    CHECK(s.noise_sigma == d.noise_sigma);
    CHECK(s.halo_width == d.halo_width);
    CHECK(s.max_attempts == d.max_attempts);
  }
  SUBCASE("golden presets") {
    RunConfig b2;
    b2.apply_preset("benchmark2");
    CHECK(b2.model().num_classes == 2);
    CHECK(b2.model().dropout_rate == doctest::Approx(0.05));
    CHECK(b2.model().activation.kind == ActivationKind::relu);
    CHECK(b2.loss().smoothing_alpha == doctest::Approx(0.2));
    CHECK_FALSE(b2.augment().any());

    RunConfig b3;
    b3.apply_preset("benchmark3");
    CHECK(b3.model().num_classes == 3);
    CHECK(b3.echo() == RunConfig().echo());

    RunConfig master;
    master.apply_preset("master");
    const AugmentSpec a = master.augment(), std_aug = AugmentSpec::standard();
    CHECK(master.model().num_classes == 3);
    CHECK(master.model().dropout_rate == doctest::Approx(0.1));
    CHECK(master.model().activation.kind == ActivationKind::relu);
    CHECK(master.loss().smoothing_alpha == doctest::Approx(0.2));
    CHECK(master.train().epochs == 15);
    CHECK(a.rot90 == std_aug.rot90);
    CHECK(a.noise == std_aug.noise);
    CHECK(a.shift == std_aug.shift);
    CHECK(a.scale == std_aug.scale);
    CHECK(a.contrast == std_aug.contrast);
    CHECK(a.brightness == std_aug.brightness);
    CHECK_FALSE(a.inversion);

    RunConfig inv;
    inv.apply_preset("inversion");
    CHECK(inv.augment().inversion);
    inv.set("augment.inversion", "false");
    inv.set("preset", "master");
    CHECK(inv.echo() == master.echo());

    RunConfig mish;
    mish.apply_preset("sweep-mish");
    CHECK(mish.model().activation.kind == ActivationKind::mish);
    CHECK(mish.train().epochs == 15);
    for (const auto& name : RunConfig::preset_names()) {
      RunConfig c;
      CHECK_NOTHROW(c.apply_preset(name));
      CHECK_NOTHROW(c.validate());
    }
    CHECK_THROWS_AS(RunConfig().apply_preset("nope"), ConfigError);
  }
  SUBCASE("a flag equal to the preset value is idempotent") {
    RunConfig master;
    master.apply_preset("master");
    const RunConfig cfg = resolve_config(std::nullopt, "master", {{"model.dropout", "0.10"}});
    CHECK(cfg.echo() == master.echo());
  }
}

TEST_CASE("config precedence and errors") {
  const auto dir = temp_dir("precedence");
  std::ofstream(dir / "run.cfg") << "preset = master\nmodel.dropout = 0.15  # file value\ntrain.runs = 2\n";

  SUBCASE("file over preset, flag over file") {
    const RunConfig cfg = resolve_config(dir / "run.cfg", std::nullopt, {{"model.dropout", "0.2"}});
    CHECK(cfg.get("preset") == "master");
    CHECK(cfg.model().dropout_rate == doctest::Approx(0.2));
    CHECK(cfg.train().runs == 2);
    CHECK(cfg.train().epochs == 15);
  }
  SUBCASE("the echoed config proves the flag won and reproduces the run") {
    std::ofstream(dir / "tiny.cfg") << "synth.train_count = 1\nsynth.val_count = 0\nsynth.test_count = 0\n"
                                       "synth.height = 64\nsynth.width = 64\nsynth.skyrmion_fraction = 0.1\n";
    const auto o = run({"synth", "--config", (dir / "tiny.cfg").string(), "--set", "synth.train_count=2",
                        "--run-dir", (dir / "a").string()});
    REQUIRE(o.code == kExitOk);
    const auto echo = echoed(dir / "a");
    CHECK(echo.at("synth.train_count") == "2");
    CHECK(echo.at("synth.height") == "64");
    CHECK(list_images(dir / "a" / "train" / "images").size() == 2);

    const auto again = run({"synth", "--config", (dir / "a" / "config.txt").string(), "--run-dir", (dir / "b").string()});
    REQUIRE(again.code == kExitOk);
    CHECK(slurp(dir / "a" / "config.txt") == slurp(dir / "b" / "config.txt"));
    CHECK(snapshot(dir / "a" / "train") == snapshot(dir / "b" / "train"));
  }
  SUBCASE("errors name the key") {
    std::ofstream(dir / "bad.cfg") << "model.depht = 3\n";
    try {
      resolve_config(dir / "bad.cfg", std::nullopt, {});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("model.depht") != std::string::npos);
      CHECK(std::string(e.what()).find("bad.cfg") != std::string::npos);
    }
    try {
      resolve_config(std::nullopt, std::nullopt, {{"train.epochs", "ten"}});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("train.epochs") != std::string::npos);
    }
    CHECK_THROWS_AS(resolve_config(dir / "missing.cfg", std::nullopt, {}), ConfigError);
    CHECK_THROWS_AS(resolve_config(std::nullopt, "nope", {}), ConfigError);
    CHECK_THROWS_AS(resolve_config(std::nullopt, std::nullopt, {{"model.activation", "sigmoid"}}), ConfigError);
    CHECK_THROWS_AS(resolve_config(std::nullopt, std::nullopt, {{"model.dropout", "1.5"}}), ConfigError);
    std::ofstream(dir / "syntax.cfg") << "just words\n";
    CHECK_THROWS_WITH_AS(resolve_config(dir / "syntax.cfg", std::nullopt, {}), doctest::Contains("syntax.cfg:1"),
                         ConfigError);
    RunConfig cfg;
    CHECK_THROWS_WITH_AS(cfg.require_path("data.train"), doctest::Contains("data.train"), ConfigError);
  }
  SUBCASE("cli exit codes") {
    CHECK(run({"train", "--set", "no.such=1"}).code == kExitConfig);
    CHECK(run({"train", "--epochs", "x"}).code == kExitConfig);
    CHECK(run({"frobnicate"}).code == kExitConfig);
    CHECK(run({}).code == kExitConfig);
    const auto o = run({"train", "--out", (dir / "out").string()});
    CHECK(o.code == kExitConfig);
    CHECK(o.err.find("data.train") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "out"));
  }
}

TEST_CASE("exit code mapping") {
  CHECK(exit_code_for(ConfigError("x")) == kExitConfig);
  CHECK(exit_code_for(GenerationError("x")) == kExitConfig);
  CHECK(exit_code_for(DataError("x")) == kExitData);
  CHECK(exit_code_for(FormatError("x")) == kExitData);
  CHECK(exit_code_for(CheckpointError(CheckpointErrorKind::io, "x")) == kExitData);
  CHECK(exit_code_for(ShapeError("x")) == kExitData);
  CHECK(exit_code_for(NumericError("x")) == kExitRuntime);
  CHECK(exit_code_for(InternalError("x")) == kExitRuntime);
  CHECK(exit_code_for(std::runtime_error("x")) == kExitOther);
}

TEST_CASE("merge_defects") {
  ClassMask labels(4, 6), pred(4, 6);
  // labelled skyrmion at columns 0-1, predicted defect over columns 1-4 of rows 0-3
  for (int y = 0; y < 4; ++y) {
    labels.at(y, 0) = labels.at(y, 1) = kSkyrmion;
    for (int x = 1; x < 5; ++x) pred.at(y, x) = kDefect;
  }
  pred.at(0, 5) = kDefect;  // 17-pixel component
  SUBCASE("skyrmion wins on conflict") {
    const ClassMask m = merge_defects(labels, pred, 1);
    for (int y = 0; y < 4; ++y) {
      CHECK(m.at(y, 0) == kSkyrmion);
      CHECK(m.at(y, 1) == kSkyrmion);
      for (int x = 2; x < 5; ++x) CHECK(m.at(y, x) == kDefect);
    }
    CHECK(m.at(0, 5) == kDefect);
    CHECK(m.at(1, 5) == kBackground);
  }
  SUBCASE("small components are dropped") {
    ClassMask speck(4, 6);
    speck.at(3, 5) = kDefect;
    CHECK(merge_defects(labels, speck, 2) == labels);
    CHECK(merge_defects(labels, speck, 1).at(3, 5) == kDefect);
    CHECK(merge_defects(labels, pred, 18) == labels);
    CHECK(merge_defects(labels, pred, 17).at(0, 2) == kDefect);
  }
  SUBCASE("no predicted defects leaves the labels") {
    ClassMask none(4, 6, kSkyrmion);
    CHECK(merge_defects(labels, none, 1) == labels);
  }
  CHECK_THROWS_AS(merge_defects(labels, ClassMask(3, 6), 1), ShapeError);
}

TEST_CASE("bootstrap with a model that predicts no defects") {
  // Threshold model widened to three classes: class 2 logit stays far below.
  auto tm = oracle::threshold_model(0.5f);
  UNetConfig c3 = tm.config;
  c3.num_classes = 3;
  UNetParams<float> p3 = init_params(c3, 0);
  // copy every tensor except the head, then pad the head with a dead class
  {
    auto src = param_views(tm.params, tm.config);
    auto dst = param_views(p3, c3);
    REQUIRE(src.size() == dst.size());
    for (std::size_t k = 0; k < src.size(); ++k) {
      if (src[k].values.size() == dst[k].values.size()) {
        std::copy(src[k].values.begin(), src[k].values.end(), dst[k].values.begin());
      } else {
        std::fill(dst[k].values.begin(), dst[k].values.end(), 0.0f);
        std::copy(src[k].values.begin(), src[k].values.end(), dst[k].values.begin());
        if (dst[k].name.find("bias") != std::string::npos) dst[k].values.back() = -1000.0f;
      }
    }
  }
  SynthSpec s;
  s.height = s.width = 16;
  s.skyrmion_fraction = 0.0f;
  s.defects_min = s.defects_max = 0;
  Dataset d = to_two_class(synth_generate(s, 3, 4));
  // put some labelled skyrmions in
  d.samples[0].mask.at(3, 3) = kSkyrmion;
  d.samples[1].mask.at(5, 6) = kSkyrmion;
  const Dataset out = bootstrap_relabel(p3, c3, d, 1);
  CHECK(out.num_classes == 3);
  REQUIRE(out.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(out.samples[i].mask == d.samples[i].mask);
    CHECK(out.samples[i].image == d.samples[i].image);
  }
  CHECK_THROWS_AS(bootstrap_relabel(tm.params, tm.config, d, 1), ConfigError);
  Dataset three = d;
  three.num_classes = 3;
  CHECK_THROWS_AS(bootstrap_relabel(p3, c3, three, 1), ConfigError);
}

TEST_CASE("command pipeline") {
  const auto dir = temp_dir("pipeline");
  const std::string data = (dir / "data").string();
  REQUIRE(run(cat({"synth", "--run-dir", data}, small_synth_flags())).code == kExitOk);
  const auto before = snapshot(dir / "data");

  const auto tr = run(cat({"train", "--preset", "master", "--train-dir", data + "/train", "--val-dir", data + "/val",
                           "--run-dir", (dir / "train").string()},
                          small_model_flags()));
  INFO(tr.err);
  REQUIRE(tr.code == kExitOk);
  for (const char* f : {"config.txt", "train.csv", "train.json", "best.skrm", "checkpoints/run0.skrm"})
    CHECK(fs::exists(dir / "train" / f));
  const std::string ckpt = (dir / "train" / "best.skrm").string();

  SUBCASE("train is reproducible") {
    const auto again = run(cat({"train", "--config", (dir / "train" / "config.txt").string(), "--run-dir",
                                (dir / "train2").string()},
                               {}));
    REQUIRE(again.code == kExitOk);
    CHECK(slurp(dir / "train" / "best.skrm") == slurp(dir / "train2" / "best.skrm"));
    CHECK(slurp(dir / "train" / "train.csv") == slurp(dir / "train2" / "train.csv"));
  }
  SUBCASE("predict, eval, probe, report") {
    const auto pr = run({"predict", "--checkpoint", ckpt, "--input", data + "/test", "--tta", "--run-dir",
                         (dir / "pred").string()});
    REQUIRE(pr.code == kExitOk);
    CHECK(list_images(dir / "pred" / "masks").size() == 3);
    CHECK(fs::exists(dir / "pred" / "predictions.csv"));

    const auto ev = run({"eval", "--pred", (dir / "pred" / "masks").string(), "--truth", data + "/test",
                         "--run-dir", (dir / "eval").string()});
    REQUIRE(ev.code == kExitOk);
    for (const char* f : {"metrics.csv", "histogram.csv", "histogram_truth.csv", "histogram.png", "sizes.csv"})
      CHECK(fs::exists(dir / "eval" / f));
    const std::string metrics = slurp(dir / "eval" / "metrics.csv");
    CHECK(metrics.rfind("id,tp,tn,fp,fn,mcc,speckles,skyrmions_pred,skyrmions_true\n", 0) == 0);
    CHECK(metrics.find("\npooled,") != std::string::npos);

    const auto ev2 = run({"eval", "--checkpoint", ckpt, "--truth", data + "/test", "--tta", "--run-dir",
                          (dir / "eval2").string()});
    REQUIRE(ev2.code == kExitOk);
    CHECK(slurp(dir / "eval2" / "metrics.csv") == metrics);

    const auto pb = run({"probe", "--checkpoint", ckpt, "--image", data + "/test/images/img00000.png", "--set",
                         "probe.size=32", "--run-dir", (dir / "probe").string()});
    REQUIRE(pb.code == kExitOk);
    for (const char* f : {"probe.csv", "probe.png", "inversion.csv"}) CHECK(fs::exists(dir / "probe" / f));

    const auto rp = run({"report", (dir / "train").string(), "--run-dir", (dir / "report").string()});
    REQUIRE(rp.code == kExitOk);
    CHECK(rp.out.find("master") != std::string::npos);
    CHECK(fs::exists(dir / "report" / "report.csv"));

    CHECK(snapshot(dir / "data") == before);
  }
  SUBCASE("predict with a missing checkpoint leaves nothing behind") {
    const auto o = run({"predict", "--checkpoint", (dir / "none.skrm").string(), "--input", data + "/test",
                        "--out", (dir / "outroot").string()});
    CHECK(o.code == kExitData);
    CHECK_FALSE(fs::exists(dir / "outroot"));
  }
  SUBCASE("eval dims mismatch names both files") {
    fs::create_directories(dir / "badpred");
    for (const auto& f : list_images(fs::path(data) / "test" / "masks"))
      save_mask(dir / "badpred" / f.filename(), ClassMask(32, 32));
    const auto o = run({"eval", "--pred", (dir / "badpred").string(), "--truth", data + "/test", "--run-dir",
                        (dir / "evalbad").string()});
    CHECK(o.code == kExitData);
    CHECK(o.err.find((dir / "badpred" / "img00000.png").string()) != std::string::npos);
    CHECK(o.err.find((fs::path(data) / "test" / "masks" / "img00000.png").string()) != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "evalbad"));
  }
  SUBCASE("bootstrap rejects a 2-class checkpoint") {
    const auto tr2 = run(cat({"train", "--preset", "benchmark2", "--train-dir", data + "/train", "--val-dir",
                              data + "/val", "--run-dir", (dir / "train2c").string()},
                             small_model_flags()));
    REQUIRE(tr2.code == kExitOk);
    const auto o = run({"bootstrap", "--checkpoint", (dir / "train2c" / "best.skrm").string(), "--input",
                        data + "/test", "--run-dir", (dir / "boot").string()});
    CHECK(o.code == kExitConfig);
    CHECK(o.err.find("3") != std::string::npos);
  }
}

TEST_CASE("bootstrap recovers generator defects") {
  SynthSpec s;
  s.height = s.width = 64;
  s.skyrmion_fraction = 0.1f;
  const Dataset train = synth_generate(s, 48, 21);
  const Dataset val = synth_generate(s, 8, 22);
  const Dataset held = synth_generate(s, 12, 23);
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 8;
  c.num_classes = 3;
  c.input_h = c.input_w = 64;
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 2;
  tc.runs = 1;
  tc.early_stop_patience = -1;
  const FitResult model = fit(c, train, val, tc, LossConfig{}, AugmentSpec{}, 1);

  const Dataset weak = bootstrap_relabel(model.best_params, c, to_two_class(held), 20);
  std::size_t true_defect = 0, recovered = 0;
  for (std::size_t i = 0; i < held.size(); ++i)
    for (std::size_t p = 0; p < held.samples[i].mask.size(); ++p) {
      if (held.samples[i].mask.data[p] != kDefect) continue;
      ++true_defect;
      if (weak.samples[i].mask.data[p] == kDefect) ++recovered;
    }
  REQUIRE(true_defect > 0);
  const double rate = static_cast<double>(recovered) / static_cast<double>(true_defect);
  MESSAGE("defect pixels recovered by bootstrap: " << rate);
  CHECK(rate >= 0.8);
  for (std::size_t i = 0; i < held.size(); ++i)
    for (std::size_t p = 0; p < held.samples[i].mask.size(); ++p)
      if (held.samples[i].mask.data[p] == kSkyrmion) CHECK(weak.samples[i].mask.data[p] == kSkyrmion);
}
