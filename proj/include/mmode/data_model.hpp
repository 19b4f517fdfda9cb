#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "mmode/errors.hpp"

namespace mmode {

namespace fs = std::filesystem;

/// Minimum number of frames a video needs to be part of any split.
inline constexpr std::uint32_t kMinFrames = 112;

/// Grayscale echo clip, stored frame-major then row-major.
struct VideoTensor {
  std::string patient_id;
  std::uint32_t t = 0;
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  std::vector<std::uint8_t> frames;

  VideoTensor() = default;
  VideoTensor(std::string id, std::uint32_t frames_, std::uint32_t height,
              std::uint32_t width)
      : patient_id(std::move(id)), t(frames_), h(height), w(width),
        frames(static_cast<std::size_t>(frames_) * height * width, 0) {}

  std::size_t frame_size() const { return static_cast<std::size_t>(h) * w; }

  std::uint8_t at(std::size_t f, std::size_t r, std::size_t c) const {
    return frames[f * frame_size() + r * w + c];
  }
  std::uint8_t& at(std::size_t f, std::size_t r, std::size_t c) {
    return frames[f * frame_size() + r * w + c];
  }

  const std::uint8_t* frame(std::size_t f) const {
    return frames.data() + f * frame_size();
  }

  bool operator==(const VideoTensor& o) const {
    return t == o.t && h == o.h && w == o.w && frames == o.frames;
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff),
                              static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) |
      (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

struct VideoHeader {
  std::uint32_t t = 0, h = 0, w = 0;
};

inline VideoHeader read_video_header(std::istream& is, const std::string& what) {
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "MMV1")
    throw FormatError(what + ": missing MMV1 magic");
  VideoHeader hdr;
  if (!get_u32(is, hdr.t) || !get_u32(is, hdr.h) || !get_u32(is, hdr.w))
    throw FormatError(what + ": truncated header");
  return hdr;
}

}  // namespace detail

/// Writes `MMV1`, then t, h, w as little-endian u32, then the raw bytes.
inline void write_video(const fs::path& path, const VideoTensor& v) {
  if (v.frames.size() != static_cast<std::size_t>(v.t) * v.h * v.w)
    throw ShapeError("write_video: payload does not match declared shape");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("MMV1", 4);
  detail::put_u32(os, v.t);
  detail::put_u32(os, v.h);
  detail::put_u32(os, v.w);
  os.write(reinterpret_cast<const char*>(v.frames.data()),
           static_cast<std::streamsize>(v.frames.size()));
  if (!os) throw IoError("short write to " + path.string());
}

/// Reads an MMV1 file. The patient id defaults to the file stem.
inline VideoTensor load_video(const fs::path& path, bool require_square = true) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const auto hdr = detail::read_video_header(is, path.string());
  if (require_square && hdr.h != hdr.w)
    throw ShapeError(path.string() + ": video must be square, got " +
                     std::to_string(hdr.h) + "x" + std::to_string(hdr.w));
  VideoTensor v(path.stem().string(), hdr.t, hdr.h, hdr.w);
  if (!is.read(reinterpret_cast<char*>(v.frames.data()),
               static_cast<std::streamsize>(v.frames.size())))
    throw FormatError(path.string() + ": truncated payload");
  return v;
}

/// Header-only probe: returns (t, h, w) and checks the payload length.
inline detail::VideoHeader probe_video(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const auto hdr = detail::read_video_header(is, path.string());
  const auto need = 16 + static_cast<std::uintmax_t>(hdr.t) * hdr.h * hdr.w;
  if (fs::file_size(path) < need)
    throw FormatError(path.string() + ": truncated payload");
  return hdr;
}

enum class Split { Train, Val, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ArgumentError("unknown split '" + std::string(s) + "'");
}

struct PatientRecord {
  std::string patient_id;
  double ef = 0.0;  // fraction, not percent
  Split split = Split::Train;
};

struct Manifest {
  std::vector<PatientRecord> records;
  fs::path source_dir;
  std::size_t dropped_short = 0;

  fs::path video_path(const PatientRecord& r) const {
    return source_dir / (r.patient_id + ".mmv");
  }

  std::vector<PatientRecord> split(Split s) const {
    std::vector<PatientRecord> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(r);
    return out;
  }

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(
        records.begin(), records.end(), [s](const auto& r) { return r.split == s; }));
  }
};

struct ManifestOptions {
  /// When false, missing or NaN labels are accepted (unsupervised use).
  bool require_labels = true;
  /// When false, video files are not opened at load time.
  bool check_videos = true;
  std::uint32_t min_frames = kMinFrames;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Loads `patient_id,ef,split` rows. Records whose video is shorter than
/// `min_frames` are dropped and counted in `dropped_short`.
inline Manifest load_manifest(const fs::path& csv_path, const fs::path& video_dir,
                              const ManifestOptions& opts = {}) {
  std::ifstream is(csv_path);
  if (!is) throw IoError("cannot open manifest " + csv_path.string());
  std::string line;
  if (!std::getline(is, line)) throw ManifestError("empty manifest");
  auto header = detail::split_csv_line(line);
  // Tolerate a UTF-8 BOM on the first header cell.
  if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0].erase(0, 3);
  auto column = [&](std::string_view name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ManifestError("manifest missing column '" + std::string(name) + "'");
  };
  const std::size_t c_id = column("patient_id"), c_ef = column("ef"),
                    c_split = column("split");

  Manifest m;
  m.source_dir = video_dir;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    const auto where = csv_path.string() + ":" + std::to_string(line_no);
    if (cells.size() < header.size()) throw ManifestError(where + ": too few columns");

    PatientRecord r;
    r.patient_id = cells[c_id];
    if (r.patient_id.empty()) throw ManifestError(where + ": empty patient_id");
    if (!seen.insert(r.patient_id).second)
      throw ManifestError(where + ": duplicate patient_id '" + r.patient_id + "'");

    const std::string& ef_text = cells[c_ef];
    try {
      std::size_t used = 0;
      r.ef = std::stod(ef_text, &used);
      if (used != ef_text.size()) throw std::invalid_argument(ef_text);
    } catch (const std::exception&) {
      if (opts.require_labels) throw ManifestError(where + ": bad ef '" + ef_text + "'");
      r.ef = std::numeric_limits<double>::quiet_NaN();
    }
    if (std::isnan(r.ef)) {
      if (opts.require_labels) throw ManifestError(where + ": ef is NaN");
    } else if (r.ef < 0.0 || r.ef > 1.0) {
      throw ManifestError(where + ": ef " + ef_text + " outside [0,1]");
    }
    try {
      r.split = parse_split(cells[c_split]);
    } catch (const ArgumentError& e) {
      throw ManifestError(where + ": " + e.what());
    }

    if (opts.check_videos) {
      const auto hdr = probe_video(m.video_path(r));
      if (hdr.h != hdr.w)
        throw ShapeError(where + ": video for '" + r.patient_id + "' is not square");
      if (hdr.t < opts.min_frames) {
        ++m.dropped_short;
        continue;
      }
    }
    m.records.push_back(std::move(r));
  }
  if (m.dropped_short > 0)
    std::clog << "[mmode] dropped " << m.dropped_short << " record(s) with fewer than "
              << opts.min_frames << " frames\n";
  return m;
}

inline void write_manifest(const fs::path& csv_path, const Manifest& m) {
  std::ofstream os(csv_path);
  if (!os) throw IoError("cannot open " + csv_path.string() + " for writing");
  os << "patient_id,ef,split\n";
  os.precision(17);
  for (const auto& r : m.records)
    os << r.patient_id << ',' << r.ef << ',' << to_string(r.split) << '\n';
  if (!os) throw IoError("short write to " + csv_path.string());
}

/// Keeps a seeded uniformly random ceil(p*n) subset of the train split.
/// The subset is a prefix of one seeded permutation, so smaller fractions nest
/// inside larger ones for the same seed. Val/test records are untouched.
inline Manifest subsample_train(const Manifest& m, double p, std::uint64_t seed) {
  if (!(p > 0.0) || p > 1.0)
    throw ArgumentError("label fraction must lie in (0, 1], got " + std::to_string(p));
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < m.records.size(); ++i)
    if (m.records[i].split == Split::Train) train_idx.push_back(i);

  const auto n = train_idx.size();
  const auto keep = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9)));
  std::mt19937_64 rng(seed);
  std::shuffle(train_idx.begin(), train_idx.end(), rng);
  std::vector<char> selected(m.records.size(), 0);
  for (std::size_t i = 0; i < keep; ++i) selected[train_idx[i]] = 1;

  Manifest out;
  out.source_dir = m.source_dir;
  out.dropped_short = m.dropped_short;
  for (std::size_t i = 0; i < m.records.size(); ++i)
    if (m.records[i].split != Split::Train || selected[i]) out.records.push_back(m.records[i]);
  return out;
}

}  // namespace mmode
