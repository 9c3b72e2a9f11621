#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "skyrm/unet.hpp"

namespace skyrm {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment estimates, one flat buffer per parameter tensor.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of a single tensor at step t (t >= 1).
void adam_update(std::span<float> params, std::span<const float> grads, std::span<float> m, std::span<float> v,
                 std::uint64_t t, double lr, const AdamConfig& cfg = {});

/// Updates every learnable tensor of `params` and bumps params.version.
/// Throws NumericError naming the tensor if any gradient is non-finite; the
/// parameters are left untouched in that case.
void adam_step(UNetParams<float>& params, const UNetParams<float>& grads, const UNetConfig& config,
               AdamState& state, double lr, const AdamConfig& cfg = {});

}  // namespace skyrm
