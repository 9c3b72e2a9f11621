#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "skyrm/image.hpp"

namespace skyrm {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const noexcept { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Which class indices count as positive. The default (skyrmion positive,
/// background and defect negative) is valid for 2- and 3-class masks alike.
struct PositiveRule {
  std::array<bool, 256> positive{};

  PositiveRule() { positive[kSkyrmion] = true; }
  static PositiveRule only(std::uint8_t cls) {
    PositiveRule r;
    r.positive = {};
    r.positive[cls] = true;
    return r;
  }
  bool operator()(std::uint8_t cls) const noexcept { return positive[cls]; }
};

/// Pixel-wise tallies. Throws ShapeError on a dims mismatch.
ConfusionCounts confusion_from_masks(const ClassMask& pred, const ClassMask& truth,
                                     const PositiveRule& rule = {});

/// Matthews correlation coefficient in double precision; 0 when any factor of
/// the denominator is 0.
double mcc(const ConfusionCounts& c) noexcept;

enum class Connectivity { four = 4, eight = 8 };

struct Component {
  int size = 0;
  int top = 0;   // row of the first pixel in raster order
  int left = 0;  // column of that pixel
  double centroid_y = 0.0;
  double centroid_x = 0.0;
  std::vector<std::int32_t> pixels;  // linear indices y * w + x, ascending
};

/// Labels pixels equal to `class_id`. Components are ordered by their first
/// pixel in raster order. Throws ConfigError for class_id > kDefect.
std::vector<Component> connected_components(const ClassMask& mask, int class_id,
                                            Connectivity connectivity = Connectivity::eight);

struct SizeHistogram {
  std::vector<double> edges;         // strictly increasing, size = counts.size() + 1
  std::vector<std::uint64_t> counts;
  std::vector<int> sizes;            // every component, in mask then component order
  std::optional<double> mean;        // absent without components
  std::optional<double> median;
  std::optional<std::size_t> primary_mode;    // bin index
  std::optional<std::size_t> secondary_mode;  // highest other local maximum
};

/// Uniform bin edges lo, lo+width, ..., up to and including hi.
std::vector<double> uniform_edges(double lo, double hi, double width);

/// Aggregates component sizes of `class_id` over `masks`. Sizes below the
/// first edge are dropped from the counts; sizes at or above the last edge go
/// into the last bin. Throws ConfigError on fewer than two edges or edges that
/// are not strictly increasing.
SizeHistogram size_histogram(std::span<const ClassMask> masks, int class_id,
                             std::span<const double> edges,
                             Connectivity connectivity = Connectivity::eight);

/// Number of components of `class_id` with size <= max_size.
int speckle_count(const ClassMask& mask, int class_id, int max_size = 10,
                  Connectivity connectivity = Connectivity::eight);

/// Fraction of pixels per class index 0..num_classes-1.
std::vector<double> class_fractions(const ClassMask& mask, int num_classes);

}  // namespace skyrm
