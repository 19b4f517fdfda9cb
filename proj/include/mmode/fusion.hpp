#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mmode/errors.hpp"
#include "mmode/mmode_gen.hpp"
#include "mmode/nn.hpp"

namespace mmode {

enum class FusionKind { EarlyChannels, LateConcat, LateMean, LateLSTM };

inline std::string_view to_string(FusionKind k) {
  switch (k) {
    case FusionKind::EarlyChannels: return "early";
    case FusionKind::LateConcat: return "concat";
    case FusionKind::LateMean: return "mean";
    case FusionKind::LateLSTM: return "lstm";
  }
  return "?";
}

inline FusionKind parse_fusion(std::string_view s) {
  if (s == "early") return FusionKind::EarlyChannels;
  if (s == "concat") return FusionKind::LateConcat;
  if (s == "mean") return FusionKind::LateMean;
  if (s == "lstm") return FusionKind::LateLSTM;
  throw ArgumentError("unknown fusion '" + std::string(s) + "' (early|concat|mean|lstm)");
}

struct FusionConfig {
  FusionKind kind = FusionKind::LateConcat;
  std::size_t modes = 10;
  std::size_t feature_dim = 512;  // K
  std::size_t lstm_dim = 256;

  bool late() const { return kind != FusionKind::EarlyChannels; }

  /// Size of the joint representation handed to the head.
  std::size_t joint_dim() const {
    switch (kind) {
      case FusionKind::LateConcat: return feature_dim * modes;
      case FusionKind::LateMean: return feature_dim;
      case FusionKind::LateLSTM: return lstm_dim;
      case FusionKind::EarlyChannels: return feature_dim;
    }
    return 0;
  }
};

/// M-channel image, channel-major [M][s][t].
struct ChannelImage {
  std::size_t channels = 0, depth = 0, time = 0;
  std::vector<float> data;

  const float* channel(std::size_t m) const { return data.data() + m * depth * time; }
};

/// Stacks the M images as channels in angle order.
inline ChannelImage fuse_early(const MModeStack& stack) {
  if (stack.images.empty()) throw ShapeError("fuse_early: empty stack");
  ChannelImage out;
  out.channels = stack.images.size();
  out.depth = stack.images[0].depth;
  out.time = stack.images[0].time;
  out.data.reserve(out.channels * out.depth * out.time);
  for (const auto& img : stack.images) {
    if (img.depth != out.depth || img.time != out.time)
      throw ShapeError("fuse_early: M-mode images differ in shape");
    out.data.insert(out.data.end(), img.pixels.begin(), img.pixels.end());
  }
  return out;
}

/// Late fusion of per-mode features [B, K] (one tensor per mode, angle order)
/// into [B, joint_dim]. The LSTM consumes modes in increasing angle order and
/// its final hidden state is the joint vector.
template <class T>
nn::Tensor<T> fuse_late(const std::vector<nn::Tensor<T>>& per_mode, const FusionConfig& cfg,
                        const nn::LstmCell<T>* lstm = nullptr) {
  if (per_mode.size() != cfg.modes)
    throw ShapeError("fuse_late: expected " + std::to_string(cfg.modes) + " feature sets, got " +
                     std::to_string(per_mode.size()));
  for (const auto& f : per_mode)
    if (f.rank() != 2 || f.dim(1) != cfg.feature_dim || f.dim(0) != per_mode[0].dim(0))
      throw ShapeError("fuse_late: feature shape " + nn::shape_str(f.shape()) +
                       ", expected [B, " + std::to_string(cfg.feature_dim) + "]");
  switch (cfg.kind) {
    case FusionKind::LateConcat:
      return nn::concat_cols(per_mode);
    case FusionKind::LateMean: {
      nn::Tensor<T> acc = per_mode[0];
      for (std::size_t m = 1; m < per_mode.size(); ++m) acc = nn::add(acc, per_mode[m]);
      return nn::scale(acc, T(1) / static_cast<T>(per_mode.size()));
    }
    case FusionKind::LateLSTM: {
      if (!lstm || lstm->in != cfg.feature_dim || lstm->hidden != cfg.lstm_dim)
        throw ShapeError("fuse_late: LSTM cell missing or mis-sized");
      auto state = lstm->zero_state(per_mode[0].dim(0));
      for (const auto& f : per_mode) state = (*lstm)(f, state);
      return state.h;
    }
    case FusionKind::EarlyChannels:
      break;
  }
  throw ArgumentError("fuse_late: early fusion has no late aggregation");
}

/// Batched late fusion of encoder output [N*M, K] whose rows are patient-major
/// (row n*M + m is mode m of patient n).
template <class T>
nn::Tensor<T> fuse_late_batched(const nn::Tensor<T>& features, const FusionConfig& cfg,
                                const nn::LstmCell<T>* lstm = nullptr) {
  if (features.rank() != 2 || features.dim(1) != cfg.feature_dim ||
      features.dim(0) % cfg.modes != 0)
    throw ShapeError("fuse_late: features " + nn::shape_str(features.shape()) +
                     " do not split into " + std::to_string(cfg.modes) + " modes of dim " +
                     std::to_string(cfg.feature_dim));
  const std::size_t n = features.dim(0) / cfg.modes;
  switch (cfg.kind) {
    case FusionKind::LateConcat:
      return nn::reshape(features, {n, cfg.modes * cfg.feature_dim});
    case FusionKind::LateMean:
      return nn::mean_row_groups(features, cfg.modes);
    case FusionKind::LateLSTM: {
      std::vector<nn::Tensor<T>> per_mode;
      for (std::size_t m = 0; m < cfg.modes; ++m)
        per_mode.push_back(nn::take_rows_strided(features, m, cfg.modes));
      return fuse_late(per_mode, cfg, lstm);
    }
    case FusionKind::EarlyChannels:
      break;
  }
  throw ArgumentError("fuse_late: early fusion has no late aggregation");
}

}  // namespace mmode
