#pragma once

// Run configuration. Files use one `key = value` pair per line; `#` starts a
// comment. Lists are comma-separated. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmode/augment.hpp"
#include "mmode/errors.hpp"
#include "mmode/losses.hpp"
#include "mmode/mmode_gen.hpp"
#include "mmode/model.hpp"

namespace mmode {

struct TrainConfig {
  ModelConfig model;
  ClipPolicy clip = ClipPolicy::Full112;

  std::size_t epochs_sup = 100;
  std::size_t epochs_cl = 300;
  std::size_t warmup_epochs = 30;  // contrastive pre-training
  std::size_t warmup_sup = 0;      // supervised training; 0 disables
  double lr_sup = 1e-3;
  double lr_cl = 1e-3;  // 1.0 in the reference hyperparameter table
  std::size_t bsz_sup = 64;
  std::size_t bsz_cl = 256;
  double fraction = 1.0;  // share of train labels used by supervised runs
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  ContrastiveConfig loss;
  AugmentConfig augment;
  bool augment_sup = true;  // augment images during supervised training
  bool verbose = false;

  void validate() const {
    if (epochs_sup == 0 || epochs_cl == 0 || bsz_sup == 0 || bsz_cl == 0)
      throw ArgumentError("epochs and batch sizes must be positive");
    if (!(lr_sup > 0.0) || !(lr_cl > 0.0)) throw ArgumentError("learning rates must be positive");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ArgumentError("fraction must lie in (0, 1]");
    if (model.modes == 0) throw ArgumentError("modes must be positive");
    if (workers == 0) throw ArgumentError("workers must be positive");
    loss.validate();
    augment.validate();
    model.encoder.validate();
  }
};

namespace detail {

inline std::vector<std::size_t> parse_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoull(trim(item)));
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ArgumentError("not a boolean: '" + v + "'");
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_size_list;
  auto sz = [&] { return static_cast<std::size_t>(std::stoull(value)); };
  auto dbl = [&] { return std::stod(value); };
  try {
    if (key == "fusion") c.model.fusion = parse_fusion(value);
    else if (key == "modes") c.model.modes = sz();
    else if (key == "clip") c.clip = parse_clip_policy(value);
    else if (key == "enc_out_dim") c.model.encoder.out_dim = sz();
    else if (key == "enc_stem_width") c.model.encoder.stem_width = sz();
    else if (key == "enc_stem_kernel") c.model.encoder.stem_kernel = sz();
    else if (key == "enc_stem_stride") c.model.encoder.stem_stride = sz();
    else if (key == "enc_stem_pool") c.model.encoder.stem_pool = parse_bool(value);
    else if (key == "enc_stage_widths") c.model.encoder.stage_widths = parse_size_list(value);
    else if (key == "enc_blocks") c.model.encoder.blocks_per_stage = parse_size_list(value);
    else if (key == "lstm_dim") c.model.lstm_dim = sz();
    else if (key == "head_hidden") c.model.head_hidden = sz();
    else if (key == "proj_hidden") c.model.proj_hidden = sz();
    else if (key == "proj_out") c.model.proj_out = sz();
    else if (key == "epochs_sup") c.epochs_sup = sz();
    else if (key == "epochs_cl") c.epochs_cl = sz();
    else if (key == "warmup_epochs") c.warmup_epochs = sz();
    else if (key == "warmup_sup") c.warmup_sup = sz();
    else if (key == "lr_sup") c.lr_sup = dbl();
    else if (key == "lr_cl") c.lr_cl = dbl();
    else if (key == "bsz_sup") c.bsz_sup = sz();
    else if (key == "bsz_cl") c.bsz_cl = sz();
    else if (key == "fraction") c.fraction = dbl();
    else if (key == "seed") c.seed = std::stoull(value);
    else if (key == "workers") c.workers = sz();
    else if (key == "tau") c.loss.tau = dbl();
    else if (key == "alpha") c.loss.alpha = dbl();
    else if (key == "flip_prob") c.augment.flip_prob = dbl();
    else if (key == "noise_sigma") c.augment.noise_sigma = dbl();
    else if (key == "augment_sup") c.augment_sup = parse_bool(value);
    else if (key == "verbose") c.verbose = parse_bool(value);
    else throw ArgumentError("unknown config key '" + key + "'");
  } catch (const std::logic_error&) {
    throw ArgumentError("bad value '" + value + "' for config key '" + key + "'");
  }
}

/// Parses "key=value" (used for command-line overrides).
inline void apply_override(TrainConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ArgumentError("override must look like key=value: " + kv);
  apply_setting(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

inline TrainConfig parse_config(std::istream& is, TrainConfig base = {}) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ArgumentError("config line " + std::to_string(line_no) + ": expected key = value");
    apply_setting(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  return parse_config(is, std::move(base));
}

inline json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"clip", std::string(to_string(c.clip))},
          {"epochs_sup", c.epochs_sup},
          {"epochs_cl", c.epochs_cl},
          {"warmup_epochs", c.warmup_epochs},
          {"warmup_sup", c.warmup_sup},
          {"lr_sup", c.lr_sup},
          {"lr_cl", c.lr_cl},
          {"bsz_sup", c.bsz_sup},
          {"bsz_cl", c.bsz_cl},
          {"fraction", c.fraction},
          {"seed", c.seed},
          {"workers", c.workers},
          {"tau", c.loss.tau},
          {"alpha", c.loss.alpha},
          {"flip_prob", c.augment.flip_prob},
          {"noise_sigma", c.augment.noise_sigma},
          {"augment_sup", c.augment_sup}};
}

/// Writes the configuration back in the key-value file format.
inline std::string to_config_text(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& e = c.model.encoder;
  os << "fusion = " << to_string(c.model.fusion) << "\nmodes = " << c.model.modes
     << "\nclip = " << to_string(c.clip) << "\nenc_out_dim = " << e.out_dim
     << "\nenc_stem_width = " << e.stem_width << "\nenc_stem_kernel = " << e.stem_kernel
     << "\nenc_stem_stride = " << e.stem_stride << "\nenc_stem_pool = " << (e.stem_pool ? "true" : "false")
     << "\nenc_stage_widths = " << detail::join(e.stage_widths)
     << "\nenc_blocks = " << detail::join(e.blocks_per_stage) << "\nlstm_dim = " << c.model.lstm_dim
     << "\nhead_hidden = " << c.model.head_hidden << "\nproj_hidden = " << c.model.proj_hidden
     << "\nproj_out = " << c.model.proj_out << "\nepochs_sup = " << c.epochs_sup
     << "\nepochs_cl = " << c.epochs_cl << "\nwarmup_epochs = " << c.warmup_epochs
     << "\nwarmup_sup = " << c.warmup_sup << "\nlr_sup = " << c.lr_sup << "\nlr_cl = " << c.lr_cl
     << "\nbsz_sup = " << c.bsz_sup << "\nbsz_cl = " << c.bsz_cl << "\nfraction = " << c.fraction
     << "\nseed = " << c.seed << "\nworkers = " << c.workers << "\ntau = " << c.loss.tau
     << "\nalpha = " << c.loss.alpha << "\nflip_prob = " << c.augment.flip_prob
     << "\nnoise_sigma = " << c.augment.noise_sigma
     << "\naugment_sup = " << (c.augment_sup ? "true" : "false") << '\n';
  return os.str();
}

}  // namespace mmode
