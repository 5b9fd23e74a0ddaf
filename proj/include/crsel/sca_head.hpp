#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crsel/ops.hpp"
#include "crsel/tensor.hpp"

namespace crsel {

/// Ordered pyramid levels sharing batch and channel counts.
template <typename T>
using PyramidFeatures = std::vector<BasicTensor<T>>;

template <typename T>
void validate_pyramid(const PyramidFeatures<T>& levels) {
  if (levels.empty()) throw DimensionError("pyramid must have at least one level");
  for (std::size_t h = 1; h < levels.size(); ++h) {
    if (levels[h].n() != levels[0].n() || levels[h].c() != levels[0].c()) {
      throw DimensionError("pyramid level " + std::to_string(h) + " shape " + levels[h].shape().str() +
                           " disagrees with level 0 " + levels[0].shape().str() + " in batch/channels");
    }
  }
}

/// Shared gate convolution (c -> 1).
template <typename T>
struct ScAParams {
  Conv1x1Params<T> gate_conv;

  void validate() const {
    gate_conv.validate();
    if (gate_conv.c_out() != 1) {
      throw DimensionError("ScAParams: gate_conv must have c_out 1, got " +
                           std::to_string(gate_conv.c_out()));
    }
  }

  template <typename U>
  ScAParams<U> cast() const {
    return {gate_conv.template cast<U>()};
  }

  bool operator==(const ScAParams&) const = default;
};

/// gamma[b][level], each in [0, 1].
template <typename T>
struct ScaleWeights {
  std::size_t batch = 0;
  std::size_t levels = 0;
  std::vector<T> gamma;

  T operator()(std::size_t b, std::size_t h) const { return gamma[b * levels + h]; }
  T& operator()(std::size_t b, std::size_t h) { return gamma[b * levels + h]; }
};

/// Pre-activation of the gate for each (batch, level): gate_conv(avg_pool(F_h)).
template <typename T>
ScaleWeights<T> gate_logits(const PyramidFeatures<T>& f, const ScAParams<T>& p) {
  validate_pyramid(f);
  p.validate();
  ScaleWeights<T> z{f[0].n(), f.size(), std::vector<T>(f[0].n() * f.size())};
  for (std::size_t h = 0; h < f.size(); ++h) {
    const BasicTensor<T> g = conv1x1(global_avg_pool(f[h]), p.gate_conv);
    for (std::size_t b = 0; b < z.batch; ++b) z(b, h) = g(b, 0, 0, 0);
  }
  return z;
}

/// gamma_h = hard_sigmoid(relu(gate_conv(avg_pool(F_h)))), per batch element.
template <typename T>
ScaleWeights<T> scale_weights(const PyramidFeatures<T>& f, const ScAParams<T>& p) {
  ScaleWeights<T> g = gate_logits(f, p);
  for (auto& v : g.gamma) v = hard_sigmoid_scalar(relu_scalar(v));
  return g;
}

/// out_h = gamma_h * F_h + F_h, one output per level.
template <typename T>
PyramidFeatures<T> apply_scale_weighting(const PyramidFeatures<T>& f, const ScaleWeights<T>& g) {
  validate_pyramid(f);
  if (g.levels != f.size() || g.batch != f[0].n() || g.gamma.size() != g.batch * g.levels) {
    throw DimensionError("apply_scale_weighting: " + std::to_string(g.levels) + " weights for " +
                         std::to_string(f.size()) + " levels");
  }
  PyramidFeatures<T> out;
  out.reserve(f.size());
  for (std::size_t h = 0; h < f.size(); ++h) {
    BasicTensor<T> level(f[h].shape());
    const std::size_t per_batch = f[h].c() * f[h].shape().plane();
    for (std::size_t b = 0; b < f[h].n(); ++b) {
      const T gamma = g(b, h);
      for (std::size_t k = b * per_batch; k < (b + 1) * per_batch; ++k) {
        level[k] = gamma * f[h][k] + f[h][k];
      }
    }
    out.push_back(std::move(level));
  }
  return out;
}

template <typename T>
PyramidFeatures<T> sca_forward(const PyramidFeatures<T>& f, const ScAParams<T>& p) {
  return apply_scale_weighting(f, scale_weights(f, p));
}

}  // namespace crsel
