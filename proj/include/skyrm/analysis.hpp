#pragma once

#include <filesystem>
#include <vector>

#include "skyrm/metrics.hpp"
#include "skyrm/unet.hpp"

namespace skyrm {

struct ProbeRow {
  int level = 0;
  int dominant = 0;               // majority predicted class, ties to the lower index
  std::vector<double> fractions;  // per class
};

struct ProbeResult {
  std::vector<ProbeRow> rows;
  std::vector<int> transitions;  // levels whose dominant class differs from the previous level's
};

/// Predicts uniform images of grey level v / 255 for v in [first, last] and
/// records the class make-up of each prediction. h and w default to the
/// model's input size.
ProbeResult greyscale_probe(const UNetParams<float>& params, const UNetConfig& config, int h = 0, int w = 0,
                            int first = 0, int last = 255);

/// level,dominant_class,fraction_<class>...
void write_probe_csv(const std::filesystem::path& path, const ProbeResult& probe);

struct InversionReport {
  ClassMask original;
  ClassMask inverted;
  std::vector<double> original_fractions;
  std::vector<double> inverted_fractions;
  double agreement = 0.0;  // fraction of pixels with equal class in both masks
};

/// Predicts `image` and 1 - image.
InversionReport inversion_experiment(const UNetParams<float>& params, const UNetConfig& config,
                                     const Image& image);

/// bin_lo,bin_hi,count
void write_histogram_csv(const std::filesystem::path& path, const SizeHistogram& hist);

/// Bar chart of the histogram counts as an 8-bit greyscale PNG.
void render_histogram_png(const std::filesystem::path& path, const SizeHistogram& hist);

/// One curve per class fraction over the grey levels, with a strip along the
/// bottom showing the dominant class (white background, black skyrmion, grey
/// defect).
void render_probe_png(const std::filesystem::path& path, const ProbeResult& probe);

}  // namespace skyrm
