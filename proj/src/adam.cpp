#include "skyrm/adam.hpp"

#include <cmath>

namespace skyrm {

void adam_update(std::span<float> params, std::span<const float> grads, std::span<float> m, std::span<float> v,
                 std::uint64_t t, double lr, const AdamConfig& cfg) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size())
    throw ShapeError("adam_update: buffer sizes differ");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    params[i] = static_cast<float>(params[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon));
  }
}

void adam_step(UNetParams<float>& params, const UNetParams<float>& grads, const UNetConfig& config,
               AdamState& state, double lr, const AdamConfig& cfg) {
  auto pv = param_views(params, config);
  const auto gv = param_views(grads, config);
  if (pv.size() != gv.size()) throw ShapeError("adam_step: gradient layout differs from parameters");
  for (std::size_t k = 0; k < gv.size(); ++k) {
    if (gv[k].values.size() != pv[k].values.size())
      throw ShapeError("adam_step: gradient '" + gv[k].name + "' has the wrong size");
    for (float g : gv[k].values)
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in '" + gv[k].name + "'");
  }
  if (state.m.empty()) {
    for (const auto& p : pv) {
      state.m.emplace_back(p.values.size(), 0.0f);
      state.v.emplace_back(p.values.size(), 0.0f);
    }
  }
  if (state.m.size() != pv.size()) throw ShapeError("adam_step: optimizer state layout differs from parameters");
  ++state.step;
  for (std::size_t k = 0; k < pv.size(); ++k)
    adam_update(pv[k].values, gv[k].values, state.m[k], state.v[k], state.step, lr, cfg);
  ++params.version;
}

}  // namespace skyrm
