#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "skyrm/image.hpp"
#include "skyrm/tensor.hpp"

namespace skyrm {

struct LossConfig {
  float smoothing_alpha = 0.2f;
  std::vector<float> class_weights;  // empty means 1 for every class

  /// Throws ConfigError unless 0 <= alpha < 1 and every weight is > 0.
  void validate(int num_classes) const;
};

/// Label-smoothed one-hot targets (1, K, h, w):
/// target = (1 - alpha) * onehot + alpha / K. Throws DataError on a class
/// index >= num_classes.
Tensor smoothed_targets(const ClassMask& mask, int num_classes, float alpha);

/// Writes the targets of `mask` into item `n` of an (N, K, h, w) tensor.
void smoothed_targets_into(Tensor& targets, int n, const ClassMask& mask, float alpha);

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> grad_logits;
  std::uint64_t clamped = 0;  // targeted probabilities clamped at 1e-12
};

/// Weighted cross-entropy, averaged over all N * h * w pixels. Each pixel is
/// weighted by w_pix = sum_c weight_c * target_c, so with weights of 1 this is
/// plain cross-entropy. The logits gradient is w_pix * (p - target) / pixels,
/// exact for the softmax that produced `probabilities`.
template <typename T>
LossResult<T> cross_entropy_loss(const BasicTensor<T>& probabilities, const BasicTensor<T>& targets,
                                 std::span<const float> class_weights = {});

}  // namespace skyrm
