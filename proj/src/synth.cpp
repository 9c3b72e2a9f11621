#include "skyrm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <random>

#include "skyrm/rng.hpp"

namespace skyrm {

void SynthSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synth." + msg); };
  if (height < 8 || width < 8) fail("height/width must be >= 8");
  auto unit = [&](float v, const char* key) {
    if (!(v >= 0.0f && v <= 1.0f)) fail(std::string(key) + " must be in [0, 1]");
  };
  unit(background, "background");
  unit(skyrmion_grey, "skyrmion_grey");
  unit(defect_grey, "defect_grey");
  unit(halo_grey, "halo_grey");
  if (!(skyrmion_fraction >= 0.0f && skyrmion_fraction < 1.0f)) fail("skyrmion_fraction must be in [0, 1)");
  if (!(radius_min > 0.0f && radius_min <= radius_max)) fail("radius_min must be in (0, radius_max]");
  if (!(radius_sd >= 0.0f)) fail("radius_sd must be >= 0");
  if (!(max_eccentricity >= 1.0f)) fail("max_eccentricity must be >= 1");
  if (!(edge_softness > 0.0f)) fail("edge_softness must be > 0");
  if (min_gap < 0) fail("min_gap must be >= 0");
  if (defects_min < 0 || defects_max < defects_min) fail("need 0 <= defects_min <= defects_max");
  if (!(defect_radius_min > 0.0f && defect_radius_min <= defect_radius_max))
    fail("defect_radius_min must be in (0, defect_radius_max]");
  if (!(halo_width >= 0.0f)) fail("halo_width must be >= 0");
  if (defect_lobes_max < 2) fail("defect_lobes_max must be >= 2");
  if (!(defect_dark_fraction >= 0.0f && defect_dark_fraction <= 1.0f)) fail("defect_dark_fraction must be in [0, 1]");
  if (!(noise_sigma >= 0.0f)) fail("noise_sigma must be >= 0");
  if (!(gradient_max >= 0.0f)) fail("gradient_max must be >= 0");
  if (max_attempts < 1) fail("max_attempts must be >= 1");
}

namespace {

struct Canvas {
  int h, w;
  std::vector<float> base;      // background with gradient
  std::vector<float> image;
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> occupied;

  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * w + x; }
};

void mark_occupied(Canvas& cv, const std::vector<std::pair<int, int>>& pixels, int gap) {
  for (auto [y, x] : pixels)
    for (int dy = -gap; dy <= gap; ++dy)
      for (int dx = -gap; dx <= gap; ++dx) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < cv.h && xx >= 0 && xx < cv.w) cv.occupied[cv.idx(yy, xx)] = 1;
      }
}

void add_defect(Canvas& cv, const SynthSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double rmax = spec.defect_radius_max;
  const double cy = rmax + u(rng) * (cv.h - 2 * rmax), cx = rmax + u(rng) * (cv.w - 2 * rmax);
  // Irregular blob: overlapping lobes, each clipped bright or dark, so one
  // defect mixes very different contrasts. The first lobe is always bright.
  struct Lobe { double y, x, r; bool dark; };
  std::vector<Lobe> lobes;
  const int parts = 2 + static_cast<int>(rng() % static_cast<std::uint64_t>(spec.defect_lobes_max - 1));
  for (int k = 0; k < parts; ++k) {
    const double r = spec.defect_radius_min + u(rng) * (spec.defect_radius_max - spec.defect_radius_min);
    const double off = k == 0 ? 0.0 : (0.5 + 0.5 * u(rng)) * lobes.front().r;
    const double a = u(rng) * 2.0 * std::numbers::pi;
    lobes.push_back({cy + off * std::sin(a), cx + off * std::cos(a), r, k > 0 && u(rng) < spec.defect_dark_fraction});
  }
  const double shadow_dir = u(rng) * 2.0 * std::numbers::pi;
  const double half_span = (0.45 + 0.25 * u(rng)) * std::numbers::pi;
  const double reach = 2.0 * rmax + spec.halo_width + 1.0;

  std::vector<std::pair<int, int>> pixels;
  for (int y = std::max(0, static_cast<int>(cy - reach)); y < std::min(cv.h, static_cast<int>(cy + reach) + 1); ++y)
    for (int x = std::max(0, static_cast<int>(cx - reach)); x < std::min(cv.w, static_cast<int>(cx + reach) + 1);
         ++x) {
      double d = 1e9;
      const Lobe* owner = nullptr;
      for (const auto& lb : lobes) {
        const double dl = std::hypot(y - lb.y, x - lb.x) - lb.r;
        if (dl < d) {
          d = dl;
          owner = &lb;
        }
      }
      const auto i = cv.idx(y, x);
      const float shade = cv.base[i] - spec.background;
      if (d <= 0.0) {
        cv.image[i] = owner->dark ? spec.halo_grey + shade
                                  : std::min(1.0f, static_cast<float>(spec.defect_grey + 0.03 * u(rng)));
        cv.mask[i] = kDefect;
        pixels.emplace_back(y, x);
      } else if (d <= spec.halo_width) {
        double diff = std::atan2(y - cy, x - cx) - shadow_dir;
        diff = std::remainder(diff, 2.0 * std::numbers::pi);
        if (std::abs(diff) > half_span) continue;
        cv.image[i] = spec.halo_grey + shade;
        cv.mask[i] = kDefect;
        pixels.emplace_back(y, x);
      }
    }
  mark_occupied(cv, pixels, spec.min_gap + 1);
}

// Tries one ellipse; returns the number of labelled pixels (0 if rejected).
int try_skyrmion(Canvas& cv, const SynthSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(spec.radius_mean, spec.radius_sd);
  const double r = std::clamp(n(rng), static_cast<double>(spec.radius_min), static_cast<double>(spec.radius_max));
  const double e = 1.0 + u(rng) * (spec.max_eccentricity - 1.0);
  const double a = r * std::sqrt(e), b = r / std::sqrt(e);
  const double theta = u(rng) * std::numbers::pi;
  const double margin = a + 1.0;
  if (cv.h <= 2 * margin + 1 || cv.w <= 2 * margin + 1) return 0;
  const double cy = margin + u(rng) * (cv.h - 1 - 2 * margin);
  const double cx = margin + u(rng) * (cv.w - 1 - 2 * margin);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double soft = spec.edge_softness;
  const double reach = a + soft + 1.0;

  struct Px { int y, x; float alpha; bool inside; };
  std::vector<Px> px;
  for (int y = std::max(0, static_cast<int>(cy - reach)); y < std::min(cv.h, static_cast<int>(cy + reach) + 2); ++y)
    for (int x = std::max(0, static_cast<int>(cx - reach)); x < std::min(cv.w, static_cast<int>(cx + reach) + 2);
         ++x) {
      const double dy = y - cy, dx = x - cx;
      const double p = dx * ct + dy * st, q = -dx * st + dy * ct;
      const double rho = std::sqrt((p / a) * (p / a) + (q / b) * (q / b));
      const double edge = (1.0 - rho) * std::sqrt(a * b);  // approx. signed distance to the rim
      const double alpha = std::clamp(0.5 + edge / soft, 0.0, 1.0);
      if (alpha <= 0.0) continue;
      if (cv.occupied[cv.idx(y, x)]) return 0;
      px.push_back({y, x, static_cast<float>(alpha), rho <= 1.0});
    }
  int labelled = 0;
  std::vector<std::pair<int, int>> pixels;
  for (const auto& p : px) {
    const auto i = cv.idx(p.y, p.x);
    const float dark = spec.skyrmion_grey + (cv.base[i] - spec.background);
    cv.image[i] = cv.image[i] * (1.0f - p.alpha) + dark * p.alpha;
    if (p.inside) {
      cv.mask[i] = kSkyrmion;
      ++labelled;
    }
    pixels.emplace_back(p.y, p.x);
  }
  mark_occupied(cv, pixels, spec.min_gap);
  return labelled;
}

Sample generate_one(const SynthSpec& spec, std::uint64_t seed, int index) {
  std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(index)}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Canvas cv{spec.height, spec.width, {}, {}, {}, {}};
  const std::size_t n = static_cast<std::size_t>(cv.h) * cv.w;

  const double g = (2.0 * u(rng) - 1.0) * spec.gradient_max;
  const double phi = u(rng) * 2.0 * std::numbers::pi;
  const double ycen = 0.5 * (cv.h - 1), xcen = 0.5 * (cv.w - 1);
  const double extent = std::abs(xcen * std::cos(phi)) + std::abs(ycen * std::sin(phi));
  cv.base.resize(n);
  for (int y = 0; y < cv.h; ++y)
    for (int x = 0; x < cv.w; ++x) {
      const double proj = (x - xcen) * std::cos(phi) + (y - ycen) * std::sin(phi);
      cv.base[cv.idx(y, x)] = static_cast<float>(spec.background + (extent > 0 ? g * proj / extent : 0.0));
    }
  cv.image = cv.base;
  cv.mask.assign(n, kBackground);
  cv.occupied.assign(n, 0);

  const int defects = spec.defects_min + static_cast<int>(rng() % (spec.defects_max - spec.defects_min + 1));
  for (int k = 0; k < defects; ++k) add_defect(cv, spec, rng);

  const double target = spec.skyrmion_fraction * static_cast<double>(n);
  double placed = 0.0;
  int attempts = 0;
  while (placed < target && attempts < spec.max_attempts) {
    placed += try_skyrmion(cv, spec, rng);
    ++attempts;
  }
  if (placed < 0.8 * target)
    throw GenerationError("synth: reached skyrmion fraction " + std::to_string(placed / n) + " of requested " +
                          std::to_string(spec.skyrmion_fraction) + " after " + std::to_string(attempts) +
                          " placement attempts; lower synth.skyrmion_fraction or the radii");

  std::normal_distribution<double> noise(0.0, 1.0);
  Sample s{Image(cv.h, cv.w), ClassMask(cv.h, cv.w), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const double v = cv.image[i] + (spec.noise_sigma > 0.0f ? spec.noise_sigma * noise(rng) : 0.0);
    s.image.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  s.mask.data = std::move(cv.mask);
  char id[32];
  std::snprintf(id, sizeof id, "img%05d", index);
  s.source_id = id;
  return s;
}

}  // namespace

Dataset synth_generate(const SynthSpec& spec, int count, std::uint64_t seed) {
  spec.validate();
  if (count < 0) throw ConfigError("synth: image count must be >= 0");
  Dataset data;
  data.num_classes = 3;
  data.samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) data.samples.push_back(generate_one(spec, seed, i));
  return data;
}

}  // namespace skyrm
