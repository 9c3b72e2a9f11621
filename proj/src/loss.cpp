#include "skyrm/loss.hpp"

#include <algorithm>
#include <cmath>

namespace skyrm {

void LossConfig::validate(int num_classes) const {
  if (!(smoothing_alpha >= 0.0f && smoothing_alpha < 1.0f))
    throw ConfigError("loss.smoothing_alpha must be in [0, 1), got " + std::to_string(smoothing_alpha));
  if (!class_weights.empty() && static_cast<int>(class_weights.size()) != num_classes)
    throw ConfigError("loss.class_weights has " + std::to_string(class_weights.size()) + " entries for " +
                      std::to_string(num_classes) + " classes");
  for (float w : class_weights)
    if (!(w > 0.0f) || !std::isfinite(w)) throw ConfigError("loss.class_weights must be > 0");
}

void smoothed_targets_into(Tensor& targets, int n, const ClassMask& mask, float alpha) {
  const int k = targets.c();
  if (targets.h() != mask.h || targets.w() != mask.w)
    throw ShapeError("smoothed_targets: mask " + dims_str(mask.h, mask.w) + " vs targets " + targets.shape().str());
  const float off = alpha / static_cast<float>(k);
  const float on = (1.0f - alpha) + off;
  for (int c = 0; c < k; ++c) std::fill_n(targets.plane(n, c), mask.size(), off);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const int cls = mask.data[i];
    if (cls >= k)
      throw DataError("smoothed_targets: class " + std::to_string(cls) + " at pixel (" +
                      std::to_string(i / mask.w) + ", " + std::to_string(i % mask.w) + ") but only " +
                      std::to_string(k) + " classes");
    targets.plane(n, cls)[i] = on;
  }
}

Tensor smoothed_targets(const ClassMask& mask, int num_classes, float alpha) {
  Tensor t({1, num_classes, mask.h, mask.w});
  smoothed_targets_into(t, 0, mask, alpha);
  return t;
}

template <typename T>
LossResult<T> cross_entropy_loss(const BasicTensor<T>& probabilities, const BasicTensor<T>& targets,
                                 std::span<const float> class_weights) {
  if (probabilities.shape() != targets.shape())
    throw ShapeError("cross_entropy_loss: probabilities " + probabilities.shape().str() + " vs targets " +
                     targets.shape().str());
  const int n = probabilities.n(), k = probabilities.c();
  if (!class_weights.empty() && static_cast<int>(class_weights.size()) != k)
    throw ShapeError("cross_entropy_loss: " + std::to_string(class_weights.size()) + " class weights for " +
                     std::to_string(k) + " classes");
  const std::size_t plane = probabilities.shape().plane();
  const double inv_pixels = 1.0 / (static_cast<double>(n) * static_cast<double>(plane));

  LossResult<T> r;
  r.grad_logits = BasicTensor<T>(probabilities.shape());
  double total = 0.0;
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      double wpix = 1.0;
      if (!class_weights.empty()) {
        wpix = 0.0;
        for (int c = 0; c < k; ++c) wpix += class_weights[c] * static_cast<double>(targets.plane(b, c)[i]);
      }
      double ce = 0.0;
      double tsum = 0.0;
      for (int c = 0; c < k; ++c) {
        const double t = targets.plane(b, c)[i];
        tsum += t;
        if (t == 0.0) continue;
        double p = probabilities.plane(b, c)[i];
        if (p < 1e-12) {
          p = 1e-12;
          ++r.clamped;
        }
        ce -= t * std::log(p);
      }
      total += wpix * ce;
      // p * sum(t) - t, not p - t: rows rounded from float do not sum to exactly 1.
      const double scale = wpix * inv_pixels;
      for (int c = 0; c < k; ++c)
        r.grad_logits.plane(b, c)[i] = static_cast<T>(
            scale * (static_cast<double>(probabilities.plane(b, c)[i]) * tsum - targets.plane(b, c)[i]));
    }
  r.loss = total * inv_pixels;
  if (!std::isfinite(r.loss)) throw NumericError("cross_entropy_loss: non-finite loss");
  return r;
}

template LossResult<float> cross_entropy_loss(const BasicTensor<float>&, const BasicTensor<float>&,
                                              std::span<const float>);
template LossResult<double> cross_entropy_loss(const BasicTensor<double>&, const BasicTensor<double>&,
                                               std::span<const float>);

}  // namespace skyrm
