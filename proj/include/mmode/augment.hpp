#pragma once

#include <algorithm>
#include <random>

#include "mmode/errors.hpp"
#include "mmode/mmode_gen.hpp"
#include "mmode/rng.hpp"

namespace mmode {

struct AugmentConfig {
  double flip_prob = 0.5;
  double noise_sigma = 0.05;  // on the [0, 1] intensity scale

  void validate() const {
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0))
      throw ArgumentError("flip_prob must lie in [0, 1]");
    if (!(noise_sigma >= 0.0)) throw ArgumentError("noise_sigma must be non-negative");
  }

  static AugmentConfig identity() { return {0.0, 0.0}; }
};

/// Reverses the time (horizontal) axis in place.
inline void flip_time(MModeImage& img) {
  for (std::uint32_t k = 0; k < img.depth; ++k) {
    float* row = img.pixels.data() + static_cast<std::size_t>(k) * img.time;
    std::reverse(row, row + img.time);
  }
}

/// Random time flip with probability flip_prob, then additive Gaussian noise
/// clamped to [0, 1]. Consumes exactly one uniform draw plus one normal draw
/// per pixel when noise is on.
inline MModeImage augment(const MModeImage& image, const AugmentConfig& cfg, Rng& rng) {
  MModeImage out = image;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < cfg.flip_prob) flip_time(out);
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<float> noise(0.0f, static_cast<float>(cfg.noise_sigma));
    for (auto& v : out.pixels) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
  }
  return out;
}

inline MModeStack augment(const MModeStack& stack, const AugmentConfig& cfg, Rng& rng) {
  MModeStack out = stack;
  for (auto& img : out.images) img = augment(img, cfg, rng);
  return out;
}

}  // namespace mmode
