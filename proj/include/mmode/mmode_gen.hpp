#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmode/data_model.hpp"
#include "mmode/errors.hpp"
#include "mmode/rng.hpp"

namespace mmode {

/// Equally spaced scan-line angles in degrees over the half-open range [0, 180).
inline std::vector<double> angle_set(int modes) {
  if (modes < 1) throw ArgumentError("angle_set: need at least one mode");
  std::vector<double> out(static_cast<std::size_t>(modes));
  for (int m = 0; m < modes; ++m) out[m] = 180.0 * m / modes;
  return out;
}

/// cos/sin of an angle in degrees; exact at multiples of 90.
inline std::pair<double, double> cos_sin_deg(double deg) {
  const double q = deg / 90.0;
  if (q == std::floor(q)) {
    switch (static_cast<long long>(std::fmod(std::fmod(q, 4.0) + 4.0, 4.0))) {
      case 0: return {1.0, 0.0};
      case 1: return {0.0, 1.0};
      case 2: return {-1.0, 0.0};
      default: return {0.0, -1.0};
    }
  }
  const double rad = deg * std::numbers::pi / 180.0;
  return {std::cos(rad), std::sin(rad)};
}

struct ScanLineSpec {
  double theta = 0.0;  // degrees in [0, 180)
  std::uint32_t length = 0;
  double center_row = 0.0;
  double center_col = 0.0;

  /// Line of length h through the continuous center of an h x h frame.
  static ScanLineSpec centered(double theta, std::uint32_t h) {
    const double c = (static_cast<double>(h) - 1.0) / 2.0;
    return {theta, h, c, c};
  }

  void validate(const VideoTensor& v) const {
    if (!(theta >= 0.0 && theta < 180.0))
      throw ArgumentError("scan-line angle must lie in [0, 180), got " + std::to_string(theta));
    if (length != v.h) throw ArgumentError("scan-line length must equal the video height");
  }
};

/// Sample point for index k: center + (k - (s-1)/2) * (cos theta, sin theta)
/// in (row, col). theta = 0 walks the center column top to bottom and
/// theta = 90 walks the center row left to right.
class LineSampler {
 public:
  LineSampler(const ScanLineSpec& spec, std::uint32_t h, std::uint32_t w) : w_(w) {
    const auto [c, s] = cos_sin_deg(spec.theta);
    const double half = (static_cast<double>(spec.length) - 1.0) / 2.0;
    taps_.reserve(spec.length);
    for (std::uint32_t k = 0; k < spec.length; ++k) {
      const double u = static_cast<double>(k) - half;
      const double r = std::clamp(spec.center_row + u * c, 0.0, h - 1.0);
      const double q = std::clamp(spec.center_col + u * s, 0.0, w - 1.0);
      Tap t;
      const auto r0 = static_cast<std::uint32_t>(std::floor(r));
      const auto c0 = static_cast<std::uint32_t>(std::floor(q));
      t.r0 = r0;
      t.r1 = std::min(r0 + 1, h - 1);
      t.c0 = c0;
      t.c1 = std::min(c0 + 1, w - 1);
      t.wr = r - r0;
      t.wc = q - c0;
      taps_.push_back(t);
    }
  }

  std::size_t size() const { return taps_.size(); }

  /// Writes one line sample per tap into out[k * stride].
  void sample(const std::uint8_t* frame, float* out, std::size_t stride) const {
    for (std::size_t k = 0; k < taps_.size(); ++k) {
      const Tap& t = taps_[k];
      const double p00 = frame[t.r0 * w_ + t.c0], p01 = frame[t.r0 * w_ + t.c1];
      const double p10 = frame[t.r1 * w_ + t.c0], p11 = frame[t.r1 * w_ + t.c1];
      const double top = (1.0 - t.wc) * p00 + t.wc * p01;
      const double bot = (1.0 - t.wc) * p10 + t.wc * p11;
      out[k * stride] = static_cast<float>(((1.0 - t.wr) * top + t.wr * bot) / 255.0);
    }
  }

 private:
  struct Tap {
    std::uint32_t r0, r1, c0, c1;
    double wr, wc;
  };
  std::uint32_t w_;
  std::vector<Tap> taps_;
};

/// Depth x time image, row-major [depth][time], values in [0, 1].
struct MModeImage {
  std::uint32_t depth = 0;  // s
  std::uint32_t time = 0;   // t_clip
  std::vector<float> pixels;
  double theta = 0.0;
  std::string patient_id;
  int mode_index = 1;  // 1-based

  float at(std::size_t k, std::size_t f) const { return pixels[k * time + f]; }
  float& at(std::size_t k, std::size_t f) { return pixels[k * time + f]; }
};

/// Frames begin, begin+step, ..., count of them.
struct FrameRange {
  std::uint32_t begin = 0;
  std::uint32_t count = 0;
  std::uint32_t step = 1;

  std::uint32_t last() const { return begin + (count - 1) * step; }
  std::vector<std::uint32_t> indices() const {
    std::vector<std::uint32_t> out(count);
    for (std::uint32_t i = 0; i < count; ++i) out[i] = begin + i * step;
    return out;
  }
};

inline MModeImage extract_mmode(const VideoTensor& video, const ScanLineSpec& spec,
                                const FrameRange& range) {
  spec.validate(video);
  if (range.count == 0 || range.step == 0 || range.last() >= video.t)
    throw ArgumentError("extract_mmode: frame range outside [0, t)");
  MModeImage img;
  img.depth = spec.length;
  img.time = range.count;
  img.theta = spec.theta;
  img.patient_id = video.patient_id;
  img.pixels.resize(static_cast<std::size_t>(img.depth) * img.time);
  const LineSampler sampler(spec, video.h, video.w);
  for (std::uint32_t i = 0; i < range.count; ++i)
    sampler.sample(video.frame(range.begin + i * range.step), img.pixels.data() + i, img.time);
  return img;
}

enum class ClipPolicy { Full112, Short32Period2 };

inline constexpr std::uint32_t kFullClipFrames = 112;
inline constexpr std::uint32_t kShortClipFrames = 32;
inline constexpr std::uint32_t kShortClipPeriod = 2;

inline std::uint32_t clip_length(ClipPolicy p) {
  return p == ClipPolicy::Full112 ? kFullClipFrames : kShortClipFrames;
}

/// Number of source frames a clip spans (64 frames cover 32 samples at period 2).
inline std::uint32_t clip_span(ClipPolicy p) {
  return p == ClipPolicy::Full112 ? kFullClipFrames
                                  : kShortClipFrames * kShortClipPeriod;
}

inline std::string_view to_string(ClipPolicy p) {
  return p == ClipPolicy::Full112 ? "full" : "short";
}

inline ClipPolicy parse_clip_policy(std::string_view s) {
  if (s == "full" || s == "Full112") return ClipPolicy::Full112;
  if (s == "short" || s == "Short32Period2") return ClipPolicy::Short32Period2;
  throw ArgumentError("unknown clip policy '" + std::string(s) + "'");
}

/// Full112 always starts at frame 0. Short32Period2 draws its start uniformly
/// from {0, ..., t - 63} unless `fixed_start` is given.
inline FrameRange choose_clip(std::uint32_t t, ClipPolicy policy, Rng* rng,
                              std::optional<std::uint32_t> fixed_start = std::nullopt) {
  const std::uint32_t span = clip_span(policy);
  if (t < span)
    throw ArgumentError("video has " + std::to_string(t) + " frames, clip needs " +
                        std::to_string(span));
  if (policy == ClipPolicy::Full112) return {0, kFullClipFrames, 1};
  std::uint32_t start = 0;
  if (fixed_start) {
    start = *fixed_start;
    if (start + (kShortClipFrames - 1) * kShortClipPeriod >= t)
      throw ArgumentError("clip start out of range");
  } else if (rng != nullptr) {
    std::uniform_int_distribution<std::uint32_t> dist(0, t - span + 1);
    start = dist(*rng);
  }
  return {start, kShortClipFrames, kShortClipPeriod};
}

struct MModeStack {
  std::vector<MModeImage> images;
  std::vector<double> angles;
  FrameRange clip;
  std::string patient_id;

  std::size_t modes() const { return images.size(); }
};

/// Extracts all M modes over one shared clip.
inline MModeStack extract_stack(const VideoTensor& video, int modes, const FrameRange& clip) {
  MModeStack st;
  st.angles = angle_set(modes);
  st.clip = clip;
  st.patient_id = video.patient_id;
  st.images.reserve(st.angles.size());
  for (std::size_t m = 0; m < st.angles.size(); ++m) {
    auto img = extract_mmode(video, ScanLineSpec::centered(st.angles[m], video.h), clip);
    img.mode_index = static_cast<int>(m) + 1;
    st.images.push_back(std::move(img));
  }
  return st;
}

inline MModeStack extract_stack(const VideoTensor& video, int modes, ClipPolicy policy,
                                std::uint64_t seed) {
  Rng rng(seed);
  return extract_stack(video, modes, choose_clip(video.t, policy, &rng));
}

}  // namespace mmode
