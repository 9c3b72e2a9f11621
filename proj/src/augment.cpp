#include "skyrm/augment.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace skyrm {

AugmentSpec AugmentSpec::standard() {
  AugmentSpec s;
  s.rot90 = s.noise = s.shift = s.scale = s.contrast = s.brightness = true;
  return s;
}

void AugmentSpec::validate() const {
  auto check = [](float v, const char* key) {
    if (!(v >= 0.0f) || !std::isfinite(v)) throw ConfigError(std::string("augment.") + key + " must be >= 0");
  };
  check(noise_sigma_max, "noise_sigma_max");
  check(shift_max_fraction, "shift_max_fraction");
  check(scale_max_factor, "scale_max_factor");
  check(contrast_limit, "contrast_limit");
  check(brightness_limit, "brightness_limit");
  if (scale_max_factor >= 1.0f) throw ConfigError("augment.scale_max_factor must be < 1");
  if (shift_max_fraction > 1.0f) throw ConfigError("augment.shift_max_fraction must be <= 1");
}

int reflect_index(int i, int n) noexcept {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <typename T>
Grid<T> rotate90(const Grid<T>& g, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return g;
  if (k == 2) {
    Grid<T> out(g.h, g.w);
    std::reverse_copy(g.data.begin(), g.data.end(), out.data.begin());
    return out;
  }
  Grid<T> out(g.w, g.h);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      out.at(y, x) = k == 1 ? g.at(x, g.w - 1 - y) : g.at(g.h - 1 - x, y);
  return out;
}

template <typename T>
Grid<T> flip_horizontal(const Grid<T>& g) {
  Grid<T> out(g.h, g.w);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) out.at(y, x) = g.at(y, g.w - 1 - x);
  return out;
}

template <typename T>
Grid<T> flip_vertical(const Grid<T>& g) {
  Grid<T> out(g.h, g.w);
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) out.at(y, x) = g.at(g.h - 1 - y, x);
  return out;
}

template <typename T>
Grid<T> apply_transform(const Grid<T>& g, Transform t) {
  switch (t) {
    case Transform::identity: return g;
    case Transform::rot90: return rotate90(g, 1);
    case Transform::rot180: return rotate90(g, 2);
    case Transform::rot270: return rotate90(g, 3);
    case Transform::hflip: return flip_horizontal(g);
    case Transform::vflip: return flip_vertical(g);
  }
  return g;
}

Transform inverse(Transform t) noexcept {
  if (t == Transform::rot90) return Transform::rot270;
  if (t == Transform::rot270) return Transform::rot90;
  return t;
}

namespace {

// Resamples image and mask through the same output -> source pixel map.
template <typename Map>
void remap(Sample& s, Map source_of) {
  Image img(s.image.h, s.image.w);
  ClassMask mask(s.mask.h, s.mask.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      auto [sy, sx] = source_of(y, x);
      sy = reflect_index(sy, img.h);
      sx = reflect_index(sx, img.w);
      img.at(y, x) = s.image.at(sy, sx);
      mask.at(y, x) = s.mask.at(sy, sx);
    }
  s.image = std::move(img);
  s.mask = std::move(mask);
}

void clamp01(Image& img) {
  for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace

Sample augment_sample(const Sample& sample, const AugmentSpec& spec, std::uint64_t seed) {
  if (!sample.image.same_dims(sample.mask))
    throw ShapeError("augment_sample: image " + dims_str(sample.image.h, sample.image.w) + " vs mask " +
                     dims_str(sample.mask.h, sample.mask.w));
  Sample s = sample;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto coin = [&] { return unit(rng) < 0.5; };
  auto symmetric = [&](double limit) { return (2.0 * unit(rng) - 1.0) * limit; };

  if (spec.rot90 && coin()) {
    const bool square = s.image.h == s.image.w;
    const int k = square ? 1 + static_cast<int>(rng() % 3) : 2;
    s.image = rotate90(s.image, k);
    s.mask = rotate90(s.mask, k);
  }
  if (spec.noise && coin()) {
    const double sigma = unit(rng) * spec.noise_sigma_max;
    std::normal_distribution<double> n(0.0, 1.0);
    for (float& v : s.image.data) v = static_cast<float>(v + sigma * n(rng));
    clamp01(s.image);
  }
  if (spec.shift && coin()) {
    const int dy = static_cast<int>(std::lround(symmetric(spec.shift_max_fraction) * s.image.h));
    const int dx = static_cast<int>(std::lround(symmetric(spec.shift_max_fraction) * s.image.w));
    remap(s, [&](int y, int x) { return std::pair{y - dy, x - dx}; });
  }
  if (spec.scale && coin()) {
    const double f = 1.0 + symmetric(spec.scale_max_factor);
    const double cy = 0.5 * (s.image.h - 1), cx = 0.5 * (s.image.w - 1);
    remap(s, [&](int y, int x) {
      return std::pair{static_cast<int>(std::floor(cy + (y - cy) / f + 0.5)),
                       static_cast<int>(std::floor(cx + (x - cx) / f + 0.5))};
    });
  }
  if (spec.contrast && coin()) {
    const double u = symmetric(spec.contrast_limit);
    for (float& v : s.image.data) v = static_cast<float>(0.5 + (1.0 + u) * (v - 0.5));
    clamp01(s.image);
  }
  if (spec.brightness && coin()) {
    const double b = symmetric(spec.brightness_limit);
    for (float& v : s.image.data) v = static_cast<float>(v + b);
    clamp01(s.image);
  }
  if (spec.inversion && coin())
    for (float& v : s.image.data) v = 1.0f - v;
  return s;
}

std::vector<Transform> default_tta_transforms(int h, int w) {
  if (h == w) return {Transform::rot90, Transform::rot180, Transform::rot270};
  return {Transform::identity, Transform::hflip, Transform::vflip};
}

Tensor tta_predict(const UNetParams<float>& params, const UNetConfig& config, const Image& image,
                   std::vector<Transform> transforms) {
  if (transforms.empty()) transforms = default_tta_transforms(image.h, image.w);
  if (image.h != image.w &&
      std::any_of(transforms.begin(), transforms.end(),
                  [](Transform t) { return t == Transform::rot90 || t == Transform::rot270; }))
    transforms = default_tta_transforms(image.h, image.w);

  const int k = config.num_classes;
  std::vector<double> sum(static_cast<std::size_t>(k) * image.size(), 0.0);
  for (Transform t : transforms) {
    const Tensor p = predict_probabilities(params, config, apply_transform(image, t));
    for (int c = 0; c < k; ++c) {
      Image plane(p.h(), p.w());
      std::copy_n(p.plane(0, c), plane.size(), plane.data.begin());
      const Image back = apply_transform(plane, inverse(t));
      double* dst = sum.data() + static_cast<std::size_t>(c) * image.size();
      for (std::size_t i = 0; i < back.size(); ++i) dst[i] += back.data[i];
    }
  }
  Tensor out({1, k, image.h, image.w});
  const double n = static_cast<double>(transforms.size());
  for (std::size_t i = 0; i < sum.size(); ++i) out.data()[i] = static_cast<float>(sum[i] / n);
  return out;
}

ClassMask tta_predict_mask(const UNetParams<float>& params, const UNetConfig& config, const Image& image,
                           std::vector<Transform> transforms) {
  return argmax_mask(tta_predict(params, config, image, std::move(transforms)));
}

#define SKYRM_GRID_INSTANTIATE(T)                                \
  template Grid<T> rotate90(const Grid<T>&, int);                \
  template Grid<T> flip_horizontal(const Grid<T>&);              \
  template Grid<T> flip_vertical(const Grid<T>&);                \
  template Grid<T> apply_transform(const Grid<T>&, Transform);
SKYRM_GRID_INSTANTIATE(float)
SKYRM_GRID_INSTANTIATE(std::uint8_t)
#undef SKYRM_GRID_INSTANTIATE

}  // namespace skyrm
