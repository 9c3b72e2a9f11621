#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "skyrm/checkpoint.hpp"
#include "skyrm/gradcheck.hpp"
#include "skyrm/unet.hpp"

using namespace skyrm;

namespace {

UNetConfig tiny_config(ActivationKind act = ActivationKind::relu) {
  UNetConfig c;
  c.depth = 1;
  c.base_channels = 2;
  c.num_classes = 3;
  c.activation.kind = act;
  c.dropout_rate = 0.1f;
  c.input_h = 8;
  c.input_w = 8;
  return c;
}

std::vector<double> flatten(const UNetParams<double>& p, const UNetConfig& c) {
  std::vector<double> out;
  for (const auto& v : param_views(p, c)) out.insert(out.end(), v.values.begin(), v.values.end());
  return out;
}

template <typename T>
std::vector<T> flatten_grads(const UNetParams<T>& g, const UNetConfig& c) {
  std::vector<T> out;
  for (const auto& v : param_views(g, c)) out.insert(out.end(), v.values.begin(), v.values.end());
  return out;
}

void unflatten(UNetParams<double>& p, const UNetConfig& c, std::span<const double> values) {
  std::size_t off = 0;
  for (auto& v : param_views(p, c)) {
    std::copy(values.begin() + off, values.begin() + off + v.values.size(), v.values.begin());
    off += v.values.size();
  }
}

// Scalar loss sum(r * probabilities) and its gradient with respect to the logits.
template <typename T>
double projected_loss(const BasicTensor<T>& probs, const BasicTensor<T>& r) {
  return dot<T>(probs.values(), r.values());
}

// Zero biases put ReLU pre-activations exactly on the kink wherever the
// previous layer is dead; checks are taken away from it.
void jitter_biases(UNetParams<float>& p, const UNetConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.2f, 0.2f);
  for (auto& v : param_views(p, c))
    if (v.name.ends_with(".bias"))
      for (auto& b : v.values) b = u(rng);
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "skyrm_test_unet";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("init_params: determinism, shapes, He variance") {
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 8;
  c.num_classes = 3;
  c.input_h = c.input_w = 32;
  auto a = init_params(c, 7);
  auto b = init_params(c, 7);
  CHECK(a.same_values(b));
  CHECK_FALSE(a.same_values(init_params(c, 8)));
  CHECK(a.head.weights.shape() == Shape4{3, 8, 1, 1});

  // Channel-doubling law.
  for (int i = 0; i <= c.depth; ++i) {
    CHECK(a.encoder[i].conv1.out_c() == 8 << i);
    CHECK(a.encoder[i].conv2.out_c() == 8 << i);
  }
  for (int i = 0; i < c.depth; ++i) {
    CHECK(a.decoder[i].conv2.out_c() == a.encoder[i].conv2.out_c());
    CHECK(a.decoder[i].conv1.in_c() == 2 * (8 << i));
    CHECK(a.up[i].in_c() == 8 << (i + 1));
  }

  UNetConfig big;
  big.depth = 3;
  big.base_channels = 16;
  big.input_h = big.input_w = 64;
  auto p = init_params(big, 1);
  const auto& w = p.encoder[2].conv2.weights;  // 64 x 64 x 3 x 3 = 36864 samples
  REQUIRE(w.size() >= 10000);
  double mean = 0.0;
  for (float v : w.values()) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0.0;
  for (float v : w.values()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size());
  const double expected = 2.0 / (64 * 9);
  CHECK(std::abs(var - expected) / expected < 0.1);
  for (float bias : p.encoder[2].conv2.bias) CHECK(bias == 0.0f);
}

TEST_CASE("config validation") {
  UNetConfig c;
  c.input_h = 100;
  CHECK_THROWS_AS(init_params(c, 0), ConfigError);
  c = UNetConfig{};
  c.num_classes = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = UNetConfig{};
  c.depth = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = UNetConfig{};
  c.dropout_rate = 1.0f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("forward preserves spatial shape and yields distributions") {
  UNetConfig c;
  c.depth = 3;
  c.base_channels = 4;
  c.num_classes = 2;
  c.input_h = c.input_w = 32;
  auto p = init_params(c, 3);
  std::mt19937_64 rng(3);
  for (auto [h, w] : {std::pair{32, 32}, std::pair{64, 96}, std::pair{256, 256}}) {
    auto x = oracle::random_tensor<float>({1, 1, h, w}, rng, 0.0, 1.0);
    auto r = forward(p, c, x, Mode::infer);
    CHECK(r.probabilities.shape() == Shape4{1, 2, h, w});
    CHECK(r.tape.params == nullptr);
    for (int y = 0; y < h; y += 7)
      for (int xx = 0; xx < w; xx += 5)
        CHECK(std::abs(r.probabilities(0, 0, y, xx) + r.probabilities(0, 1, y, xx) - 1.0f) < 1e-5);
  }
  auto x = oracle::random_tensor<float>({2, 1, 32, 32}, rng, 0.0, 1.0);
  auto a = forward(p, c, x, Mode::infer);
  auto b = forward(p, c, x, Mode::infer);
  CHECK(a.probabilities == b.probabilities);
  CHECK_THROWS_AS(forward(p, c, Tensor({1, 1, 36, 32}), Mode::infer), ShapeError);
  CHECK_THROWS_AS(forward(p, c, Tensor({1, 2, 32, 32}), Mode::infer), ShapeError);
}

TEST_CASE("backward: zero loss gradient gives zero parameter gradients") {
  auto c = tiny_config();
  auto p = init_params(c, 1);
  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor<float>({2, 1, 8, 8}, rng);
  auto r = forward(p, c, x, Mode::train, 5);
  auto g = backward(r.tape, Tensor(r.logits.shape()));
  for (float v : flatten_grads(g.params, c)) CHECK(v == 0.0f);
}

TEST_CASE("whole-network gradient passes finite differences (depth 1, base 2, 8x8)") {
  for (ActivationKind act : {ActivationKind::relu, ActivationKind::prelu, ActivationKind::mish, ActivationKind::tanh}) {
    for (int seed = 0; seed < 20; ++seed) {
      CAPTURE(seed);
      const std::string act_name = to_string(act);
      CAPTURE(act_name);
      auto c = tiny_config(act);
      std::mt19937_64 rng(1000 + seed);
      auto pf = init_params(c, seed);
      jitter_biases(pf, c, seed);
      auto x = oracle::random_tensor<float>({2, 1, 8, 8}, rng, 0.0, 1.0);
      auto r = oracle::random_tensor<float>({2, 3, 8, 8}, rng);
      const std::uint64_t drop_seed = 77 + seed;

      // 64-bit: analytic and numeric both in double.
      auto pd = pf.cast<double>();
      auto xd = x.cast<double>();
      auto rd = r.cast<double>();
      auto fd = forward(pd, c, xd, Mode::train, drop_seed);
      auto gd = backward(fd.tape, softmax_backward(fd.probabilities, rd), {SkipPath::both, true});
      auto loss64 = [&](std::span<const double> v) {
        UNetParams<double> q = pd;
        unflatten(q, c, v);
        return projected_loss(forward(q, c, xd, Mode::train, drop_seed).probabilities, rd);
      };
      GradCheckOptions o64;
      o64.epsilon = 1e-6;
      o64.tolerance = 1e-6;
      auto rep64 = gradient_check<double>(loss64, flatten(pd, c), flatten_grads(gd.params, c), o64);
      CHECK(rep64.max_rel_error < 1e-6);

      // 32-bit analytic gradient against the 64-bit shadow.
      auto ff = forward(pf, c, x, Mode::train, drop_seed);
      auto gf = backward(ff.tape, softmax_backward(ff.probabilities, r));
      std::vector<float> point32;
      for (const auto& v : param_views(pf, c)) point32.insert(point32.end(), v.values.begin(), v.values.end());
      GradCheckOptions o32 = o64;
      o32.tolerance = 1e-3;
      auto rep = gradient_check_shadow(loss64, point32, flatten_grads(gf.params, c), o32);
      CHECK(rep.max_rel_error < 1e-3);
    }
  }
}

TEST_CASE("skip-connection gradient is the sum of both consumer paths") {
  auto c = tiny_config();
  c.dropout_rate = 0.0f;
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto pf = init_params(c, seed);
    jitter_biases(pf, c, seed);
    auto p = pf.cast<double>();
    auto x = oracle::random_tensor<double>({1, 1, 8, 8}, rng, -1.0, 1.0);
    auto r = oracle::random_tensor<double>({1, 3, 8, 8}, rng);
    auto run = [&](SkipPath path) {
      auto f = forward(p, c, x, Mode::train, 0);
      return backward(f.tape, softmax_backward(f.probabilities, r), {path, true});
    };
    auto both = run(SkipPath::both);
    auto concat_only = run(SkipPath::concat_only);
    auto pool_only = run(SkipPath::pool_only);
    // Everything downstream of level 0's output is unaffected by the ablation.
    CHECK(both.params.head == concat_only.params.head);
    CHECK(both.params.decoder == pool_only.params.decoder);
    // Upstream of it, gradients superpose.
    for (std::size_t i = 0; i < both.input.size(); ++i)
      CHECK(both.input.data()[i] ==
            doctest::Approx(concat_only.input.data()[i] + pool_only.input.data()[i]).epsilon(1e-9));
    auto wb = both.params.encoder[0].conv1.weights.values();
    auto wc = concat_only.params.encoder[0].conv1.weights.values();
    auto wp = pool_only.params.encoder[0].conv1.weights.values();
    for (std::size_t i = 0; i < wb.size(); ++i) CHECK(wb[i] == doctest::Approx(wc[i] + wp[i]).epsilon(1e-9));
    // Both paths actually carry signal.
    double nc = 0.0;
    double np = 0.0;
    for (std::size_t i = 0; i < wc.size(); ++i) {
      nc += std::abs(wc[i]);
      np += std::abs(wp[i]);
    }
    CHECK(nc > 0.0);
    CHECK(np > 0.0);
  }
}

TEST_CASE("tape misuse is rejected") {
  auto c = tiny_config();
  auto p = init_params(c, 1);
  Tensor x({1, 1, 8, 8}, 0.5f);
  auto r = forward(p, c, x, Mode::train, 1);
  Tensor g(r.logits.shape(), 0.1f);
  backward(r.tape, g);
  CHECK_THROWS_AS(backward(r.tape, g), InternalError);

  auto r2 = forward(p, c, x, Mode::train, 1);
  p.version++;
  CHECK_THROWS_AS(backward(r2.tape, g), InternalError);

  auto r3 = forward(p, c, x, Mode::infer);
  CHECK_THROWS_AS(backward(r3.tape, g), InternalError);
}

TEST_CASE("argmax masks") {
  Tensor probs({1, 2, 3, 3});
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      probs(0, 0, y, x) = 0.9f;
      probs(0, 1, y, x) = 0.1f;
    }
  for (auto v : argmax_mask(probs).data) CHECK(v == kBackground);
  Tensor tie({1, 2, 2, 2}, 0.5f);
  for (auto v : argmax_mask(tie).data) CHECK(v == kBackground);

  std::mt19937_64 rng(5);
  auto field = oracle::random_tensor<float>({2, 3, 6, 7}, rng, 0.0, 1.0);
  for (int n = 0; n < 2; ++n) {
    auto m = argmax_mask(field, n);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 7; ++x) {
        int best = 0;
        float bv = field(n, 0, y, x);
        for (int k = 1; k < 3; ++k)
          if (field(n, k, y, x) > bv) {
            bv = field(n, k, y, x);
            best = k;
          }
        CHECK(m.at(y, x) == best);
      }
  }

  // A model whose head is all zeros predicts the uniform distribution.
  auto c = tiny_config();
  auto p = init_params(c, 2);
  p.head = ConvKernel<float>::zeros(3, 2, 1, 1);
  Image img(8, 8, 0.3f);
  for (auto v : predict(p, c, img).data) CHECK(v == kBackground);
}

TEST_CASE("checkpoint round trip is bit exact") {
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 4;
  c.num_classes = 3;
  c.activation.kind = ActivationKind::prelu;
  c.dropout_rate = 0.1f;
  c.input_h = c.input_w = 16;
  Checkpoint ck{c, init_params(c, 9), {12, 0.8123456789, 42}};
  ck.params.encoder[1].slope2 = 0.1234567f;
  const auto path = temp_path("roundtrip.skrm");
  save_checkpoint(path, ck);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.config == c);
  CHECK(loaded.meta == ck.meta);
  CHECK(loaded.params.same_values(ck.params));
  CHECK(encode_checkpoint(loaded) == encode_checkpoint(ck));

  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor<float>({1, 1, 16, 16}, rng, 0.0, 1.0);
  CHECK(forward(ck.params, c, x, Mode::infer).probabilities ==
        forward(loaded.params, c, x, Mode::infer).probabilities);
}

TEST_CASE("checkpoint errors are distinct") {
  UNetConfig c2;
  c2.depth = 2;
  c2.base_channels = 4;
  c2.input_h = c2.input_w = 16;
  const auto bytes = encode_checkpoint({c2, init_params(c2, 1), {}});

  auto expect_kind = [](std::vector<std::uint8_t> b, CheckpointErrorKind kind, const UNetConfig* expected = nullptr) {
    try {
      decode_checkpoint(b, expected);
      FAIL("decode succeeded");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == kind);
      return std::string(e.what());
    }
    return std::string();
  };

  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  expect_kind(bad_magic, CheckpointErrorKind::bad_magic);

  auto bad_version = bytes;
  bad_version[4] = 2;
  expect_kind(bad_version, CheckpointErrorKind::version_mismatch);

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  expect_kind(truncated, CheckpointErrorKind::truncated);
  auto no_crc = bytes;
  no_crc.resize(bytes.size() - 2);
  expect_kind(no_crc, CheckpointErrorKind::truncated);

  auto flipped = bytes;
  flipped[bytes.size() - 10] ^= 0x40;
  expect_kind(flipped, CheckpointErrorKind::crc_mismatch);

  UNetConfig c3 = c2;
  c3.depth = 3;
  c3.input_h = c3.input_w = 32;
  const std::string msg = expect_kind(bytes, CheckpointErrorKind::shape_mismatch, &c3);
  CHECK(msg.find("enc3.conv1.weight") != std::string::npos);

  UNetConfig wider = c2;
  wider.base_channels = 8;
  const std::string msg2 = expect_kind(bytes, CheckpointErrorKind::shape_mismatch, &wider);
  CHECK(msg2.find("enc0.conv1.weight") != std::string::npos);

  CHECK_NOTHROW(decode_checkpoint(bytes, &c2));
  CHECK_THROWS_AS(load_checkpoint(temp_path("does-not-exist.skrm")), CheckpointError);
}
