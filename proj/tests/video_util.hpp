#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "mmode/data_model.hpp"

namespace testutil {

using mmode::VideoTensor;

inline VideoTensor smooth_video(std::uint32_t t, std::uint32_t n, std::uint64_t seed) {
  // Sum of a few low-frequency plane waves; gradients stay small so bilinear
  // resampling is accurate.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  struct Wave {
    double kr, kc, kt, ph, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i)
    waves.push_back({(u(rng) - 0.5) * 0.12, (u(rng) - 0.5) * 0.12, u(rng) * 0.2,
                     u(rng) * 2 * std::numbers::pi, 20 + 10 * u(rng)});
  VideoTensor v("smooth", t, n, n);
  for (std::uint32_t f = 0; f < t; ++f)
    for (std::uint32_t r = 0; r < n; ++r)
      for (std::uint32_t c = 0; c < n; ++c) {
        double val = 128;
        for (const auto& w : waves) val += w.amp * std::sin(w.kr * r + w.kc * c + w.kt * f + w.ph);
        v.at(f, r, c) = static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 255.0)));
      }
  return v;
}

/// Test-only bilinear rotation about the frame center: out(p) = in(c + R(p - c)),
/// where R turns the downward direction (1, 0) into (cos theta, sin theta).
inline VideoTensor rotate(const VideoTensor& v, double theta_deg) {
  const double th = theta_deg * std::numbers::pi / 180.0, cs = std::cos(th), sn = std::sin(th);
  const double c = (v.h - 1) / 2.0;
  VideoTensor out(v.patient_id, v.t, v.h, v.w);
  for (std::uint32_t f = 0; f < v.t; ++f)
    for (std::uint32_t r = 0; r < v.h; ++r)
      for (std::uint32_t q = 0; q < v.w; ++q) {
        const double dr = r - c, dc = q - c;
        const double sr = std::clamp(c + cs * dr - sn * dc, 0.0, v.h - 1.0);
        const double sc = std::clamp(c + sn * dr + cs * dc, 0.0, v.w - 1.0);
        const auto r0 = static_cast<std::uint32_t>(sr), c0 = static_cast<std::uint32_t>(sc);
        const auto r1 = std::min(r0 + 1, v.h - 1), c1 = std::min(c0 + 1, v.w - 1);
        const double wr = sr - r0, wc = sc - c0;
        const double val = (1 - wr) * ((1 - wc) * v.at(f, r0, c0) + wc * v.at(f, r0, c1)) +
                           wr * ((1 - wc) * v.at(f, r1, c0) + wc * v.at(f, r1, c1));
        out.at(f, r, q) = static_cast<std::uint8_t>(std::lround(val));
      }
  return out;
}

}  // namespace testutil
