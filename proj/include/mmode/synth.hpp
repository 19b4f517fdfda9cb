#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mmode/data_model.hpp"
#include "mmode/errors.hpp"
#include "mmode/rng.hpp"

namespace mmode {

/// Pulsating ellipse with a bright rim on speckled tissue. Area is the volume
/// proxy, so EF = (A_dia - A_sys) / A_dia holds by construction.
struct SynthParams {
  double a_dia = 36.0;  // row semi-axis at end-diastole (pixels)
  double b_dia = 27.0;  // column semi-axis at end-diastole (pixels)
  double ef_target = 0.5;
  double period = 35.0;  // frames per cardiac cycle
  double phase = 0.0;    // radians
  double noise_sigma = 0.0;  // additive per-frame noise, 0..255 intensity units
  std::uint64_t texture_seed = 0;
  double rim_width = 4.0;
  std::uint32_t size = 112;

  double area_dia() const { return std::numbers::pi * a_dia * b_dia; }
  double area_sys() const { return (1.0 - ef_target) * area_dia(); }

  /// Raised-cosine area waveform; maximal (end-diastole) where the cosine is 1.
  double area_at(double frame) const {
    const double wave =
        (1.0 + std::cos(2.0 * std::numbers::pi * frame / period + phase)) / 2.0;
    return area_sys() + (area_dia() - area_sys()) * wave;
  }

  void validate() const {
    if (!(ef_target > 0.0 && ef_target < 0.95))
      throw ArgumentError("ef_target must lie in (0, 0.95)");
    if (!(a_dia > 0.0 && b_dia > 0.0 && period > 0.0 && rim_width >= 0.0 &&
          noise_sigma >= 0.0))
      throw ArgumentError("synthetic parameters must be positive");
    const double limit = (static_cast<double>(size) - 1.0) / 2.0;
    if (a_dia + rim_width > limit || b_dia + rim_width > limit)
      throw ArgumentError("ellipse exceeds the frame at end-diastole");
  }
};

/// Intensity levels before texture. Interior stays below kInteriorThreshold
/// for every texture draw, tissue and rim stay above it.
inline constexpr double kBloodLevel = 24.0;
inline constexpr double kTissueLevel = 90.0;
inline constexpr double kRimLevel = 210.0;
inline constexpr std::uint8_t kInteriorThreshold = 50;

inline std::pair<VideoTensor, PatientRecord> synth_video(const SynthParams& p,
                                                         std::uint32_t t,
                                                         std::string patient_id = "synth") {
  if (t < kMinFrames)
    throw ArgumentError("synthetic videos need at least " + std::to_string(kMinFrames) +
                        " frames");
  p.validate();
  const std::uint32_t n = p.size;
  VideoTensor v(patient_id, t, n, n);

  // Static multiplicative speckle in [0.75, 1.25].
  Rng tex_rng(derive_seed(p.texture_seed, 1));
  std::uniform_real_distribution<double> speckle_dist(0.75, 1.25);
  std::vector<double> speckle(static_cast<std::size_t>(n) * n);
  for (auto& s : speckle) s = speckle_dist(tex_rng);

  Rng noise_rng(derive_seed(p.texture_seed, 2));
  std::normal_distribution<double> noise(0.0, 1.0);

  const double center = (static_cast<double>(n) - 1.0) / 2.0;
  for (std::uint32_t f = 0; f < t; ++f) {
    const double scale = std::sqrt(p.area_at(f) / p.area_dia());
    const double a = p.a_dia * scale, b = p.b_dia * scale;
    const double ra = a + p.rim_width, rb = b + p.rim_width;
    for (std::uint32_t r = 0; r < n; ++r) {
      const double dr = r - center;
      for (std::uint32_t c = 0; c < n; ++c) {
        const double dc = c - center;
        double level = kTissueLevel;
        if ((dr * dr) / (a * a) + (dc * dc) / (b * b) < 1.0)
          level = kBloodLevel;
        else if ((dr * dr) / (ra * ra) + (dc * dc) / (rb * rb) < 1.0)
          level = kRimLevel;
        double value = level * speckle[static_cast<std::size_t>(r) * n + c];
        if (p.noise_sigma > 0.0) value += p.noise_sigma * noise(noise_rng);
        v.at(f, r, c) = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
      }
    }
  }
  PatientRecord rec{std::move(patient_id), p.ef_target, Split::Train};
  return {std::move(v), std::move(rec)};
}

/// Pixel count of the dark interior in frame f (noise-free videos).
inline std::size_t measure_interior_area(const VideoTensor& v, std::size_t f) {
  std::size_t count = 0;
  const auto* px = v.frame(f);
  for (std::size_t i = 0; i < v.frame_size(); ++i) count += px[i] < kInteriorThreshold;
  return count;
}

struct SynthDatasetOptions {
  std::uint32_t frames = 112;
  std::uint32_t size = 112;
  double a_min = 30.0, a_max = 42.0;
  double aspect_min = 0.65, aspect_max = 0.85;  // b_dia / a_dia
  double period_min = 30.0, period_max = 40.0;
  double noise_sigma = 6.0;
  double rim_width = 4.0;
};

inline std::string synth_patient_id(std::size_t i) {
  std::ostringstream os;
  os << 'P' << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

/// Writes n videos plus manifest.csv into out_dir; 70/15/15 seeded split.
inline Manifest synth_dataset(std::size_t n, double ef_min, double ef_max, std::uint64_t seed,
                              const fs::path& out_dir, const SynthDatasetOptions& opt = {}) {
  if (n < 10) throw ArgumentError("synth_dataset needs n >= 10");
  if (!(ef_min > 0.0 && ef_min <= ef_max && ef_max < 0.95))
    throw ArgumentError("ef range must satisfy 0 < ef_min <= ef_max < 0.95");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw IoError("cannot create output directory " + out_dir.string());

  const auto n_train = static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng split_rng(derive_seed(seed, 0x5917));
  std::shuffle(order.begin(), order.end(), split_rng);
  std::vector<Split> split_of(n, Split::Test);
  for (std::size_t i = 0; i < n; ++i)
    split_of[order[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);

  Manifest m;
  m.source_dir = out_dir;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 0xA11CE, i));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    SynthParams p;
    p.size = opt.size;
    p.ef_target = uniform(ef_min, ef_max);
    p.a_dia = uniform(opt.a_min, opt.a_max);
    p.b_dia = p.a_dia * uniform(opt.aspect_min, opt.aspect_max);
    p.period = uniform(opt.period_min, opt.period_max);
    p.phase = uniform(0.0, 2.0 * std::numbers::pi);
    p.noise_sigma = opt.noise_sigma;
    p.rim_width = opt.rim_width;
    p.texture_seed = rng();
    auto [video, rec] = synth_video(p, opt.frames, synth_patient_id(i));
    rec.split = split_of[i];
    write_video(m.video_path(rec), video);
    m.records.push_back(std::move(rec));
  }
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

}  // namespace mmode
