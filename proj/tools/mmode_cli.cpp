// Command-line front end: synth, extract, train, pretrain, finetune, eval,
// curve, bench. Every training or evaluation run writes report.json and
// predictions.csv into its --out directory.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmode/config.hpp"
#include "mmode/data_model.hpp"
#include "mmode/mmode_gen.hpp"
#include "mmode/model.hpp"
#include "mmode/synth.hpp"
#include "mmode/train.hpp"

namespace fs = std::filesystem;
using namespace mmode;

namespace {

struct RunArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string manifest;
  std::string data_dir;
  std::string out = "run";
};

void add_run_options(CLI::App* cmd, RunArgs& a, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", a.config, "key = value configuration file");
    cmd->add_option("--set", a.overrides, "config override key=value (repeatable)");
  }
  cmd->add_option("--manifest", a.manifest, "manifest CSV")->required();
  cmd->add_option("--data-dir", a.data_dir, "video directory (default: manifest's directory)");
  cmd->add_option("--out", a.out, "output directory");
}

TrainConfig resolve_config(const RunArgs& a) {
  TrainConfig c = a.config.empty() ? TrainConfig{} : load_config(a.config);
  for (const auto& kv : a.overrides) apply_override(c, kv);
  c.validate();
  return c;
}

Manifest open_manifest(const RunArgs& a, bool require_labels = true) {
  const fs::path csv = a.manifest;
  const fs::path dir = a.data_dir.empty() ? csv.parent_path() : fs::path(a.data_dir);
  ManifestOptions opt;
  opt.require_labels = require_labels;
  return load_manifest(csv, dir, opt);
}

// Frame f of the output holds depth sample k of mode m at (f * s + k) * M + m.
void extract_one(const fs::path& in, const fs::path& out_path, int modes, ClipPolicy policy,
                 std::uint64_t seed) {
  const auto video = load_video(in);
  const auto st = extract_stack(video, modes, policy, seed);
  const std::uint32_t s = st.images[0].depth, t = st.images[0].time;
  const auto M = static_cast<std::uint32_t>(st.images.size());
  VideoTensor out(video.patient_id, t, s, M);
  for (std::uint32_t f = 0; f < t; ++f)
    for (std::uint32_t k = 0; k < s; ++k)
      for (std::uint32_t m = 0; m < M; ++m)
        out.frames[(static_cast<std::size_t>(f) * s + k) * M + m] = static_cast<std::uint8_t>(
            std::lround(std::clamp(st.images[m].at(k, f), 0.0f, 1.0f) * 255.0f));
  write_video(out_path, out);
  const json side = {{"patient_id", video.patient_id}, {"modes", M},
                     {"angles_deg", st.angles},        {"frames", st.clip.indices()},
                     {"clip", std::string(to_string(policy))}};
  write_json(fs::path(out_path).replace_extension(".json"), side);
}

json checkpoint_json(const fs::path& path, const std::string& hash) {
  return {{"path", path.filename().string()}, {"content_hash", hash}};
}

void write_run(const fs::path& out, json report, const std::vector<Prediction>& preds) {
  write_json(out / "report.json", report);
  write_predictions_csv(out / "predictions.csv", preds);
  std::cout << report.dump(2) << '\n';
}

json supervised_report(const std::string& command, const TrainConfig& cfg, const TrainResult& r,
                       const fs::path& ckpt, const std::string& hash, const EvalResult& ev) {
  return {{"command", command},
          {"seed", cfg.seed},
          {"config", to_json(cfg)},
          {"checkpoint", checkpoint_json(ckpt, hash)},
          {"metrics", ev.report.to_json()},
          {"history", r.history.to_json()},
          {"parameters", r.bundle.param_count()}};
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(detail::trim(item)));
  return out;
}

std::vector<std::string> parse_words(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(detail::trim(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"M-mode EF estimation: data, training and evaluation"};
  app.require_subcommand(1);

  // synth
  std::size_t synth_n = 100;
  double ef_min = 0.2, ef_max = 0.8;
  std::uint64_t synth_seed = 0;
  std::string synth_out = "synth";
  SynthDatasetOptions synth_opt;
  auto* synth = app.add_subcommand("synth", "generate a synthetic beating-ellipse dataset");
  synth->add_option("--n", synth_n, "number of patients");
  synth->add_option("--ef-min", ef_min);
  synth->add_option("--ef-max", ef_max);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--frames", synth_opt.frames);
  synth->add_option("--size", synth_opt.size);
  synth->add_option("--noise", synth_opt.noise_sigma, "additive noise sigma in grey levels");
  synth->add_option("--out", synth_out, "output directory");

  // extract
  std::string ex_video, ex_in, ex_manifest, ex_out = "mmode.mmv", ex_clip = "full";
  int ex_modes = 10;
  std::uint64_t ex_seed = 0;
  auto* extract = app.add_subcommand("extract", "extract M-mode stacks from one video or a dataset");
  auto* ex_one = extract->add_option("--video", ex_video, "single input video");
  auto* ex_set = extract->add_option("--manifest", ex_manifest, "dataset manifest; --out is a directory");
  ex_one->excludes(ex_set);
  extract->add_option("--in", ex_in, "video directory (defaults to the manifest's)")->needs(ex_set);
  extract->add_option("--modes", ex_modes);
  extract->add_option("--clip", ex_clip, "full or short");
  extract->add_option("--seed", ex_seed, "clip start seed (short clips)");
  extract->add_option("--out", ex_out, "output MMV1 file; a .json sidecar is written next to it");

  // train / pretrain
  RunArgs train_args, pre_args, ft_args, eval_args, curve_args, bench_args;
  auto* train = app.add_subcommand("train", "end-to-end supervised EF regression");
  add_run_options(train, train_args);
  auto* pretrain = app.add_subcommand("pretrain", "contrastive pre-training (labels unused)");
  add_run_options(pretrain, pre_args);

  // finetune
  std::string ft_ckpt;
  bool ft_freeze = false;
  std::optional<double> ft_fraction;
  auto* ft = app.add_subcommand("finetune", "train an EF head on a pre-trained encoder");
  add_run_options(ft, ft_args);
  ft->add_option("--ckpt", ft_ckpt, "pre-trained checkpoint")->required();
  ft->add_flag("--freeze", ft_freeze, "keep encoder weights fixed");
  ft->add_option("--fraction", ft_fraction, "share of train labels");

  // eval
  std::string ev_ckpt, ev_split = "test", ev_clip = "full";
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  add_run_options(ev, eval_args, false);
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--split", ev_split, "train, val or test");
  ev->add_option("--clip", ev_clip, "full or short");

  // curve
  std::string cv_fractions = "0.01,0.02,0.03,0.05,0.1,0.2,0.3,0.5,0.75,1.0";
  std::string cv_methods = "E2E,E2E+,CL,CL+,CL-freeze,CL+-freeze";
  std::string cv_seeds = "0,1,2,3,4";
  auto* curve = app.add_subcommand("curve", "learning curve over label fractions");
  add_run_options(curve, curve_args);
  curve->add_option("--fractions", cv_fractions);
  curve->add_option("--methods", cv_methods);
  curve->add_option("--seeds", cv_seeds);

  // bench
  std::string bn_ckpt;
  std::size_t bn_batch = 16, bn_repeats = 3;
  auto* bn = app.add_subcommand("bench", "parameter count, timings and memory per batch");
  add_run_options(bn, bench_args, false);
  bn->add_option("--ckpt", bn_ckpt, "checkpoint (default: untrained model from --config)");
  bn->add_option("--config", bench_args.config);
  bn->add_option("--set", bench_args.overrides);
  bn->add_option("--batch-size", bn_batch);
  bn->add_option("--repeats", bn_repeats, "measured repeats after one warm-up");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      // Geometry defaults describe 112-pixel frames; scale them to the requested size.
      const double k = static_cast<double>(synth_opt.size) / 112.0;
      synth_opt.a_min *= k;
      synth_opt.a_max *= k;
      synth_opt.rim_width *= k;
      const auto m = synth_dataset(synth_n, ef_min, ef_max, synth_seed, synth_out, synth_opt);
      std::cout << "wrote " << m.records.size() << " videos (" << m.count(Split::Train) << " train, "
                << m.count(Split::Val) << " val, " << m.count(Split::Test) << " test) to "
                << synth_out << '\n';
    } else if (*extract) {
      const auto policy = parse_clip_policy(ex_clip);
      if (!ex_manifest.empty()) {
        ManifestOptions opt;
        opt.require_labels = false;
        const auto m = load_manifest(ex_manifest,
                                     ex_in.empty() ? fs::path(ex_manifest).parent_path() : fs::path(ex_in), opt);
        fs::create_directories(ex_out);
        for (const auto& r : m.records)
          extract_one(m.video_path(r), fs::path(ex_out) / (r.patient_id + ".mmv"), ex_modes, policy, ex_seed);
        std::cout << "wrote " << m.records.size() << " stacks to " << ex_out << '\n';
      } else if (!ex_video.empty()) {
        extract_one(ex_video, ex_out, ex_modes, policy, ex_seed);
        std::cout << "wrote " << ex_modes << " M-modes to " << ex_out << '\n';
      } else {
        throw ArgumentError("extract needs --video or --manifest");
      }
    } else if (*train) {
      const auto cfg = resolve_config(train_args);
      const auto m = open_manifest(train_args);
      fs::create_directories(train_args.out);
      const auto r = train_supervised(m, cfg);
      const auto ckpt = fs::path(train_args.out) / "model.mmck";
      const auto hash = r.bundle.save(ckpt);
      const auto ev = evaluate(r.bundle, m, Split::Test, cfg.clip);
      write_run(train_args.out, supervised_report("train", cfg, r, ckpt, hash, ev), ev.predictions);
    } else if (*pretrain) {
      const auto cfg = resolve_config(pre_args);
      const auto m = open_manifest(pre_args, false);
      fs::create_directories(pre_args.out);
      const auto r = pretrain_contrastive(m, cfg);
      const auto ckpt = fs::path(pre_args.out) / "pretrained.mmck";
      const auto hash = r.bundle.save(ckpt);
      const json report = {{"command", "pretrain"},
                           {"seed", cfg.seed},
                           {"config", to_json(cfg)},
                           {"checkpoint", checkpoint_json(ckpt, hash)},
                           {"metrics", {{"final_loss", r.history.epochs.empty()
                                                           ? json(nullptr)
                                                           : json(r.history.epochs.back().train_loss)}}},
                           {"history", r.history.to_json()},
                           {"parameters", r.bundle.param_count()}};
      // No EF predictions exist yet; the CSV carries only its header.
      write_run(pre_args.out, report, {});
    } else if (*ft) {
      auto cfg = resolve_config(ft_args);
      if (ft_fraction) cfg.fraction = *ft_fraction;
      cfg.validate();
      const auto m = open_manifest(ft_args);
      fs::create_directories(ft_args.out);
      const auto r = finetune(m, ft_ckpt, cfg, ft_freeze);
      const auto ckpt = fs::path(ft_args.out) / "model.mmck";
      const auto hash = r.bundle.save(ckpt);
      const auto ev = evaluate(r.bundle, m, Split::Test, cfg.clip);
      auto report = supervised_report("finetune", cfg, r, ckpt, hash, ev);
      report["pretrained"] = checkpoint_json(ft_ckpt, ckpt::content_hash(ckpt::read_bytes(ft_ckpt)));
      report["freeze_encoder"] = ft_freeze;
      write_run(ft_args.out, report, ev.predictions);
    } else if (*ev) {
      const auto m = open_manifest(eval_args);
      fs::create_directories(eval_args.out);
      const auto bundle = ModelBundle::load(ev_ckpt);
      const auto res = evaluate(bundle, m, parse_split(ev_split), parse_clip_policy(ev_clip));
      const json report = {{"command", "eval"},
                           {"seed", nullptr},
                           {"config", {{"model", to_json(bundle.config())},
                                       {"split", ev_split},
                                       {"clip", ev_clip}}},
                           {"checkpoint", checkpoint_json(ev_ckpt, ckpt::content_hash(ckpt::read_bytes(ev_ckpt)))},
                           {"metrics", res.report.to_json()}};
      write_run(eval_args.out, report, res.predictions);
    } else if (*curve) {
      const auto cfg = resolve_config(curve_args);
      const auto m = open_manifest(curve_args);
      fs::create_directories(curve_args.out);
      std::vector<Method> methods;
      for (const auto& w : parse_words(cv_methods)) methods.push_back(parse_method(w));
      std::vector<std::uint64_t> seeds;
      for (const auto& w : parse_words(cv_seeds)) seeds.push_back(std::stoull(w));
      const auto cells =
          learning_curve(m, parse_doubles(cv_fractions), methods, seeds, cfg, curve_args.out);
      json rows = json::array();
      for (const auto& c : cells) rows.push_back(c.to_json());
      const json report = {{"command", "curve"}, {"seeds", seeds}, {"config", to_json(cfg)},
                           {"table", rows}};
      write_json(fs::path(curve_args.out) / "report.json", report);
      std::ofstream csv(fs::path(curve_args.out) / "curve.csv");
      csv << "method,fraction,auroc_mean,auroc_std,auprc_mean,auprc_std,mae_mean,mae_std,r2_mean,r2_std\n";
      for (const auto& r : rows)
        csv << r["method"].get<std::string>() << ',' << r["fraction"].get<double>() << ','
            << r["auroc"]["mean"] << ',' << r["auroc"]["std"] << ',' << r["auprc"]["mean"] << ','
            << r["auprc"]["std"] << ',' << r["mae"]["mean"] << ',' << r["mae"]["std"] << ','
            << r["r2"]["mean"] << ',' << r["r2"]["std"] << '\n';
      std::cout << report.dump(2) << '\n';
    } else if (*bn) {
      const auto m = open_manifest(bench_args, false);
      fs::create_directories(bench_args.out);
      const auto cfg = resolve_config(bench_args);
      const ModelBundle bundle = bn_ckpt.empty() ? ModelBundle(cfg.model, cfg.seed)
                                                 : ModelBundle::load(bn_ckpt);
      const auto rep = bench(bundle, m, bn_batch, bn_repeats, cfg.clip);
      json report = {{"command", "bench"}, {"model", to_json(bundle.config())}, {"metrics", rep.to_json()}};
      if (!bn_ckpt.empty())
        report["checkpoint"] = checkpoint_json(bn_ckpt, ckpt::content_hash(ckpt::read_bytes(bn_ckpt)));
      write_json(fs::path(bench_args.out) / "report.json", report);
      std::cout << report.dump(2) << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
