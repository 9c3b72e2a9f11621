#include "skyrm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "skyrm/image_io.hpp"

namespace skyrm {

namespace {

int dominant_class(const std::vector<double>& fractions) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(fractions.size()); ++k)
    if (fractions[k] > fractions[best]) best = k;
  return best;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.precision(10);
  return out;
}

}  // namespace

ProbeResult greyscale_probe(const UNetParams<float>& params, const UNetConfig& config, int h, int w, int first,
                            int last) {
  if (h <= 0) h = config.input_h;
  if (w <= 0) w = config.input_w;
  if (first < 0 || last > 255 || first > last) throw ConfigError("probe: levels must satisfy 0 <= first <= last <= 255");
  config.check_input(h, w);
  ProbeResult result;
  constexpr int kBatch = 8;
  for (int start = first; start <= last; start += kBatch) {
    const int count = std::min(kBatch, last - start + 1);
    Tensor x({count, 1, h, w});
    for (int j = 0; j < count; ++j) std::fill_n(x.item(j), x.shape().plane(), static_cast<float>(start + j) / 255.0f);
    const auto masks = predict(params, config, x);
    for (int j = 0; j < count; ++j) {
      ProbeRow row;
      row.level = start + j;
      row.fractions = class_fractions(masks[j], config.num_classes);
      row.dominant = dominant_class(row.fractions);
      if (!result.rows.empty() && result.rows.back().dominant != row.dominant) result.transitions.push_back(row.level);
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

void write_probe_csv(const std::filesystem::path& path, const ProbeResult& probe) {
  auto out = open_csv(path);
  out << "level,dominant_class";
  const std::size_t k = probe.rows.empty() ? 0 : probe.rows.front().fractions.size();
  for (std::size_t c = 0; c < k; ++c) out << ",fraction_" << c;
  out << '\n';
  for (const auto& r : probe.rows) {
    out << r.level << ',' << r.dominant;
    for (double f : r.fractions) out << ',' << f;
    out << '\n';
  }
}

InversionReport inversion_experiment(const UNetParams<float>& params, const UNetConfig& config, const Image& image) {
  Image inv = image;
  for (float& v : inv.data) v = 1.0f - v;
  InversionReport r;
  r.original = predict(params, config, image);
  r.inverted = predict(params, config, inv);
  r.original_fractions = class_fractions(r.original, config.num_classes);
  r.inverted_fractions = class_fractions(r.inverted, config.num_classes);
  std::size_t same = 0;
  for (std::size_t i = 0; i < r.original.size(); ++i) same += r.original.data[i] == r.inverted.data[i];
  r.agreement = static_cast<double>(same) / static_cast<double>(r.original.size());
  return r;
}

void write_histogram_csv(const std::filesystem::path& path, const SizeHistogram& hist) {
  auto out = open_csv(path);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < hist.counts.size(); ++i)
    out << hist.edges[i] << ',' << hist.edges[i + 1] << ',' << hist.counts[i] << '\n';
}

namespace {

constexpr int kMargin = 10;

void line(Gray8& g, int x0, int y0, int x1, int y1, std::uint8_t v) {
  const int steps = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
  for (int s = 0; s <= steps; ++s) {
    const int x = x0 + (x1 - x0) * s / steps, y = y0 + (y1 - y0) * s / steps;
    if (y >= 0 && y < g.h && x >= 0 && x < g.w) g.at(y, x) = v;
  }
}

void axes(Gray8& g) {
  line(g, kMargin, kMargin, kMargin, g.h - kMargin, 0);
  line(g, kMargin, g.h - kMargin, g.w - kMargin, g.h - kMargin, 0);
}

}  // namespace

void render_histogram_png(const std::filesystem::path& path, const SizeHistogram& hist) {
  const int bins = static_cast<int>(hist.counts.size());
  const int bar = std::max(2, 600 / std::max(bins, 1));
  Gray8 g(220, bins * bar + 2 * kMargin, 255);
  axes(g);
  const std::uint64_t peak = hist.counts.empty() ? 0 : *std::max_element(hist.counts.begin(), hist.counts.end());
  const int plot_h = g.h - 2 * kMargin - 1;
  for (int b = 0; b < bins && peak > 0; ++b) {
    const int top = static_cast<int>(std::lround(static_cast<double>(hist.counts[b]) / peak * plot_h));
    for (int x = kMargin + 1 + b * bar; x < kMargin + (b + 1) * bar; ++x)
      for (int y = g.h - kMargin - top; y < g.h - kMargin; ++y) g.at(y, x) = 64;
  }
  write_gray8(path, g);
}

void render_probe_png(const std::filesystem::path& path, const ProbeResult& probe) {
  const int n = static_cast<int>(probe.rows.size());
  const int step = 2;
  Gray8 g(160 + 12, std::max(n, 1) * step + 2 * kMargin, 255);
  const int base = g.h - kMargin - 12;
  line(g, kMargin, kMargin, kMargin, base, 0);
  line(g, kMargin, base, g.w - kMargin, base, 0);
  const int plot_h = base - kMargin;
  static constexpr std::uint8_t shade[] = {200, 0, 110};
  const std::size_t k = n ? probe.rows.front().fractions.size() : 0;
  for (std::size_t c = 0; c < k; ++c)
    for (int i = 1; i < n; ++i) {
      const int y0 = base - static_cast<int>(std::lround(probe.rows[i - 1].fractions[c] * plot_h));
      const int y1 = base - static_cast<int>(std::lround(probe.rows[i].fractions[c] * plot_h));
      line(g, kMargin + (i - 1) * step, y0, kMargin + i * step, y1, c < 3 ? shade[c] : 0);
    }
  static constexpr std::uint8_t strip[] = {255, 0, 128};
  for (int i = 0; i < n; ++i)
    for (int y = base + 3; y < base + 11; ++y)
      for (int x = kMargin + i * step; x < kMargin + (i + 1) * step; ++x)
        g.at(y, x) = strip[std::min(probe.rows[i].dominant, 2)];
  write_gray8(path, g);
}

}  // namespace skyrm
