#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmode/augment.hpp"
#include "mmode/checkpoint.hpp"
#include "mmode/fusion.hpp"
#include "mmode/mmode_gen.hpp"
#include "mmode/nn.hpp"
#include "mmode/rng.hpp"

namespace mmode {

using nlohmann::json;
using Tensor = nn::Tensor<float>;

struct ModelConfig {
  nn::EncoderConfig encoder;  // in_channels is derived from fusion and modes
  FusionKind fusion = FusionKind::LateConcat;
  std::size_t modes = 10;
  std::size_t lstm_dim = 256;
  std::size_t head_hidden = 256;
  std::size_t proj_hidden = 2048;
  std::size_t proj_out = 128;

  FusionConfig fusion_config() const {
    return {fusion, modes, encoder.out_dim, lstm_dim};
  }

  nn::EncoderConfig resolved_encoder() const {
    auto e = encoder;
    e.in_channels = fusion == FusionKind::EarlyChannels ? modes : 1;
    return e;
  }

  bool operator==(const ModelConfig&) const = default;
};

inline json to_json(const nn::EncoderConfig& e) {
  return {{"in_channels", e.in_channels}, {"stem_width", e.stem_width},
          {"stem_kernel", e.stem_kernel}, {"stem_stride", e.stem_stride},
          {"stem_pool", e.stem_pool},     {"stage_widths", e.stage_widths},
          {"blocks_per_stage", e.blocks_per_stage}, {"out_dim", e.out_dim}};
}

inline nn::EncoderConfig encoder_config_from_json(const json& j) {
  nn::EncoderConfig e;
  e.in_channels = j.at("in_channels").get<std::size_t>();
  e.stem_width = j.at("stem_width").get<std::size_t>();
  e.stem_kernel = j.at("stem_kernel").get<std::size_t>();
  e.stem_stride = j.at("stem_stride").get<std::size_t>();
  e.stem_pool = j.at("stem_pool").get<bool>();
  e.stage_widths = j.at("stage_widths").get<std::vector<std::size_t>>();
  e.blocks_per_stage = j.at("blocks_per_stage").get<std::vector<std::size_t>>();
  e.out_dim = j.at("out_dim").get<std::size_t>();
  return e;
}

inline json to_json(const ModelConfig& c) {
  return {{"encoder", to_json(c.encoder)}, {"fusion", std::string(to_string(c.fusion))},
          {"modes", c.modes},              {"lstm_dim", c.lstm_dim},
          {"head_hidden", c.head_hidden},  {"proj_hidden", c.proj_hidden},
          {"proj_out", c.proj_out}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.encoder = encoder_config_from_json(j.at("encoder"));
  c.fusion = parse_fusion(j.at("fusion").get<std::string>());
  c.modes = j.at("modes").get<std::size_t>();
  c.lstm_dim = j.at("lstm_dim").get<std::size_t>();
  c.head_hidden = j.at("head_hidden").get<std::size_t>();
  c.proj_hidden = j.at("proj_hidden").get<std::size_t>();
  c.proj_out = j.at("proj_out").get<std::size_t>();
  return c;
}

/// Encoder, projection head (pre-training only), fusion LSTM (when used) and
/// EF head. Parameter tensors are shared handles: copies alias the same weights.
class ModelBundle {
 public:
  ModelBundle() = default;
  ModelBundle(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.modes == 0) throw ArgumentError("model needs at least one mode");
    Rng enc_rng(derive_seed(seed, 0xE1C)), proj_rng(derive_seed(seed, 0x960)),
        head_rng(derive_seed(seed, 0x11EAD));
    encoder_ = nn::Encoder<float>(cfg.resolved_encoder(), enc_rng);
    const auto k = cfg.encoder.out_dim;
    proj_ = nn::Mlp2<float>(k, cfg.proj_hidden, cfg.proj_out, proj_rng);
    if (cfg.fusion == FusionKind::LateLSTM) lstm_ = nn::LstmCell<float>(k, cfg.lstm_dim, head_rng);
    head_ = nn::Mlp2<float>(cfg.fusion_config().joint_dim(), cfg.head_hidden, 1, head_rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const nn::Encoder<float>& encoder() const { return encoder_; }
  const nn::Mlp2<float>& proj() const { return proj_; }
  const nn::Mlp2<float>& head() const { return head_; }
  const nn::LstmCell<float>* lstm() const {
    return cfg_.fusion == FusionKind::LateLSTM ? &lstm_ : nullptr;
  }

  bool freeze_encoder() const { return freeze_; }
  /// Frozen encoder parameters take no gradient and are left out of the
  /// trainable set.
  void set_freeze_encoder(bool on) {
    freeze_ = on;
    for (auto& p : encoder_params()) p.tensor.set_requires_grad(!on);
  }

  nn::ParamList<float> encoder_params() const { return encoder_.params("encoder"); }
  nn::ParamList<float> proj_params() const {
    nn::ParamList<float> out;
    proj_.collect("proj", out);
    return out;
  }
  /// Head plus the fusion LSTM when present.
  nn::ParamList<float> head_params() const {
    nn::ParamList<float> out;
    if (lstm()) lstm_.collect("fusion.lstm", out);
    head_.collect("head", out);
    return out;
  }
  nn::ParamList<float> all_params() const {
    auto out = encoder_params();
    for (auto& p : proj_params()) out.push_back(p);
    for (auto& p : head_params()) out.push_back(p);
    return out;
  }
  /// Parameters updated by supervised training (excludes the projection head).
  nn::ParamList<float> supervised_params() const {
    nn::ParamList<float> out;
    if (!freeze_) out = encoder_params();
    for (auto& p : head_params()) out.push_back(p);
    return out;
  }
  nn::ParamList<float> contrastive_params() const {
    auto out = encoder_params();
    for (auto& p : proj_params()) out.push_back(p);
    return out;
  }

  std::size_t param_count() const { return nn::count_params(all_params()); }

  std::vector<ckpt::Block> to_blocks(const json& extra_meta = json::object()) const {
    json meta = {{"model", to_json(cfg_)}, {"freeze_encoder", freeze_}};
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) meta[it.key()] = it.value();
    std::vector<ckpt::Block> blocks{ckpt::text_block("meta/config", meta.dump())};
    ckpt::append_params(blocks, all_params());
    return blocks;
  }

  /// Writes the checkpoint and returns its git-style content hash.
  std::string save(const std::filesystem::path& path, const json& extra_meta = json::object()) const {
    const auto bytes = ckpt::serialize(to_blocks(extra_meta));
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("short write to " + path.string());
    return ckpt::content_hash(bytes);
  }

  static json read_meta(const std::vector<ckpt::Block>& blocks) {
    const auto* b = ckpt::find(blocks, "meta/config");
    if (!b) throw CheckpointError("checkpoint has no meta/config block");
    try {
      return json::parse(ckpt::block_text(*b));
    } catch (const json::exception& e) {
      throw CheckpointError(std::string("bad checkpoint metadata: ") + e.what());
    }
  }

  static ModelBundle load(const std::filesystem::path& path) {
    const auto blocks = ckpt::read_file(path);
    const auto meta = read_meta(blocks);
    ModelConfig cfg;
    try {
      cfg = model_config_from_json(meta.at("model"));
    } catch (const json::exception& e) {
      throw CheckpointError(std::string("bad checkpoint model config: ") + e.what());
    }
    ModelBundle b(cfg, 0);
    auto ps = b.all_params();
    ckpt::load_params(blocks, ps);
    b.set_freeze_encoder(meta.value("freeze_encoder", false));
    return b;
  }

  /// Copies encoder weights from a checkpoint; encoder configs must agree.
  void load_encoder_from(const std::filesystem::path& path) {
    const auto blocks = ckpt::read_file(path);
    const auto meta = read_meta(blocks);
    nn::EncoderConfig theirs;
    try {
      theirs = encoder_config_from_json(meta.at("model").at("encoder"));
    } catch (const json::exception& e) {
      throw CheckpointError(std::string("bad checkpoint encoder config: ") + e.what());
    }
    auto mine = cfg_.encoder;
    theirs.in_channels = mine.in_channels;
    if (!(theirs == mine) || encoder_.config().in_channels != 1)
      throw CheckpointError("encoder in checkpoint is incompatible with this model");
    auto ps = encoder_params();
    ckpt::load_params(blocks, ps);
  }

 private:
  ModelConfig cfg_;
  nn::Encoder<float> encoder_;
  nn::Mlp2<float> proj_;
  nn::Mlp2<float> head_;
  nn::LstmCell<float> lstm_;
  bool freeze_ = false;
};

namespace detail {

inline void check_stacks(const std::vector<const MModeStack*>& stacks, std::size_t modes) {
  if (stacks.empty()) throw ShapeError("empty batch");
  const auto& ref = stacks[0]->images.at(0);
  for (const auto* s : stacks) {
    if (s->images.size() != modes)
      throw ShapeError("stack has " + std::to_string(s->images.size()) + " modes, model expects " +
                       std::to_string(modes));
    for (const auto& img : s->images)
      if (img.depth != ref.depth || img.time != ref.time)
        throw ShapeError("M-mode images in a batch must share one shape");
  }
}

}  // namespace detail

/// Late fusion: [1, N*M, s, t], patient-major. Early fusion: [M, N, s, t].
inline Tensor encoder_input(const std::vector<const MModeStack*>& stacks, FusionKind kind) {
  const std::size_t n = stacks.size(), m = stacks[0]->images.size();
  const std::size_t s = stacks[0]->images[0].depth, t = stacks[0]->images[0].time;
  const std::size_t plane = s * t;
  std::vector<float> buf(n * m * plane);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t slot = kind == FusionKind::EarlyChannels ? k * n + i : i * m + k;
      std::copy(stacks[i]->images[k].pixels.begin(), stacks[i]->images[k].pixels.end(),
                buf.begin() + static_cast<std::ptrdiff_t>(slot * plane));
    }
  if (kind == FusionKind::EarlyChannels) return Tensor::from({m, n, s, t}, std::move(buf));
  return Tensor::from({1, n * m, s, t}, std::move(buf));
}

/// Predicted EF per patient, [N, 1]. Used for end-to-end training and for
/// fine-tuning / probing a pre-trained encoder; the projection head is never
/// evaluated here. A frozen encoder runs without recording a graph.
inline Tensor forward_supervised(const std::vector<const MModeStack*>& stacks,
                                 const ModelBundle& bundle) {
  const auto& cfg = bundle.config();
  detail::check_stacks(stacks, cfg.modes);
  const auto x = encoder_input(stacks, cfg.fusion);
  Tensor features;
  if (bundle.freeze_encoder()) {
    nn::NoGradGuard guard;
    features = bundle.encoder()(x);
  } else {
    features = bundle.encoder()(x);
  }
  const auto joint = cfg.fusion == FusionKind::EarlyChannels
                         ? features
                         : fuse_late_batched(features, cfg.fusion_config(), bundle.lstm());
  return bundle.head()(joint);
}

inline Tensor forward_probe(const std::vector<const MModeStack*>& stacks, const ModelBundle& bundle) {
  return forward_supervised(stacks, bundle);
}

/// Projection batch [N, 2M, D]: per patient the M originals, then one augmented
/// view of each. Features are L2-normalized before the projection head and
/// projections are L2-normalized after it.
inline Tensor forward_contrastive(const std::vector<const MModeStack*>& stacks,
                                  const ModelBundle& bundle, const AugmentConfig& aug, Rng& rng) {
  const auto& cfg = bundle.config();
  if (stacks.size() < 2) throw ArgumentError("contrastive batch needs at least 2 patients");
  if (cfg.fusion == FusionKind::EarlyChannels)
    throw ShapeError("contrastive pre-training needs a per-mode (late fusion) encoder");
  detail::check_stacks(stacks, cfg.modes);
  std::vector<MModeStack> views;
  views.reserve(stacks.size());
  for (const auto* s : stacks) {
    MModeStack v = *s;
    for (const auto& img : s->images) v.images.push_back(augment(img, aug, rng));
    views.push_back(std::move(v));
  }
  std::vector<const MModeStack*> ptrs;
  for (const auto& v : views) ptrs.push_back(&v);
  const auto x = encoder_input(ptrs, FusionKind::LateConcat);
  const auto z = nn::l2_normalize_rows(bundle.encoder()(x));
  const auto p = nn::l2_normalize_rows(bundle.proj()(z));
  return nn::reshape(p, {stacks.size(), 2 * cfg.modes, cfg.proj_out});
}

}  // namespace mmode
