#pragma once

#include <cstdint>
#include <vector>

#include "skyrm/dataset.hpp"
#include "skyrm/unet.hpp"

namespace skyrm {

/// Online augmentation settings. Each enabled transform fires independently
/// with probability 0.5.
struct AugmentSpec {
  bool rot90 = false;
  bool noise = false;
  float noise_sigma_max = 0.05f;
  bool shift = false;
  float shift_max_fraction = 0.1f;
  bool scale = false;
  float scale_max_factor = 0.2f;
  bool contrast = false;
  float contrast_limit = 0.3f;
  bool brightness = false;
  float brightness_limit = 0.3f;
  bool inversion = false;

  /// Every transform except inversion.
  static AugmentSpec standard();
  bool any() const noexcept {
    return rot90 || noise || shift || scale || contrast || brightness || inversion;
  }
  /// Throws ConfigError on negative limits or scale_max_factor >= 1.
  void validate() const;
};

/// Applies the enabled transforms in a fixed order: rotation, noise, shift,
/// scale, contrast, brightness, inversion. Geometric transforms move image and
/// mask pixels together (nearest neighbour, reflect padding); intensity
/// transforms touch the image only and clamp to [0, 1]. Rotation by 90 or 270
/// degrees is used only for square samples.
Sample augment_sample(const Sample& sample, const AugmentSpec& spec, std::uint64_t seed);

/// Index into [0, n) by mirror reflection without repeating the edge.
int reflect_index(int i, int n) noexcept;

/// Counter-clockwise rotation by k * 90 degrees.
template <typename T>
Grid<T> rotate90(const Grid<T>& g, int k);
template <typename T>
Grid<T> flip_horizontal(const Grid<T>& g);
template <typename T>
Grid<T> flip_vertical(const Grid<T>& g);

enum class Transform { identity, rot90, rot180, rot270, hflip, vflip };

template <typename T>
Grid<T> apply_transform(const Grid<T>& g, Transform t);
Transform inverse(Transform t) noexcept;

/// The three right-angle rotations for square images; identity and the two
/// flips otherwise.
std::vector<Transform> default_tta_transforms(int h, int w);

/// Mean of inverse-mapped infer-mode probabilities over `transforms`, as a
/// (1, num_classes, h, w) tensor. Averaging is done in double. Rotations by 90
/// or 270 degrees on a non-square image fall back to the non-square default.
Tensor tta_predict(const UNetParams<float>& params, const UNetConfig& config, const Image& image,
                   std::vector<Transform> transforms = {});

ClassMask tta_predict_mask(const UNetParams<float>& params, const UNetConfig& config, const Image& image,
                           std::vector<Transform> transforms = {});

}  // namespace skyrm
