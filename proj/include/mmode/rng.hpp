#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mmode {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class... Rest>
constexpr std::uint64_t derive_seed(std::uint64_t base, Rest... rest) {
  std::uint64_t s = mix64(base);
  ((s = mix64(s ^ static_cast<std::uint64_t>(rest))), ...);
  return s;
}

/// Stream seed for per-patient draws (clip starts, augmentation).
inline std::uint64_t patient_seed(std::uint64_t global, std::string_view patient_id,
                                  std::uint64_t epoch, std::uint64_t purpose = 0) {
  return derive_seed(global, fnv1a64(patient_id), epoch, purpose);
}

using Rng = std::mt19937_64;

}  // namespace mmode
