#pragma once

#include <cstdint>

#include "skyrm/dataset.hpp"

namespace skyrm {

/// Parameters of the synthetic Kerr-microscopy image generator. Grey levels
/// are normalized intensities in [0, 1].
struct SynthSpec {
  int height = 128;
  int width = 128;
  float background = 0.7f;
  float skyrmion_grey = 0.25f;
  // Skyrmions are ellipses of area pi r^2 with r ~ N(radius_mean, radius_sd)
  // clipped to [radius_min, radius_max] and axis ratio up to max_eccentricity.
  float radius_mean = 6.0f;
  float radius_sd = 1.5f;
  float radius_min = 2.5f;
  float radius_max = 12.0f;
  float max_eccentricity = 1.5f;
  float edge_softness = 1.5f;  // width of the blurred rim in pixels
  int min_gap = 1;             // pixels kept free between objects
  float skyrmion_fraction = 0.19f;
  // Defects: irregular blobs of 2..defect_lobes_max overlapping lobes, the
  // first clipped bright, the others dark with probability
  // defect_dark_fraction, plus a dark crescent-shaped shadow.
  int defects_min = 1;
  int defects_max = 4;
  float defect_grey = 0.97f;
  float defect_radius_min = 3.0f;
  float defect_radius_max = 8.0f;
  int defect_lobes_max = 5;
  float defect_dark_fraction = 0.5f;
  float halo_grey = 0.3f;
  float halo_width = 4.0f;
  float noise_sigma = 0.06f;
  float gradient_max = 0.15f;  // linear intensity ramp spans +-this value
  int max_attempts = 4000;     // skyrmion placement attempts per image

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

/// Requested skyrmion density cannot be packed.
class GenerationError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// `count` images with exact 3-class masks (defect core and shadow are class
/// 2). Image i depends only on (spec, seed, i). Ids are "img00000", ...
Dataset synth_generate(const SynthSpec& spec, int count, std::uint64_t seed);

}  // namespace skyrm
