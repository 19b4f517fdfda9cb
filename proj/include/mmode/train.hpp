#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "mmode/augment.hpp"
#include "mmode/config.hpp"
#include "mmode/data_model.hpp"
#include "mmode/losses.hpp"
#include "mmode/metrics.hpp"
#include "mmode/mmode_gen.hpp"
#include "mmode/model.hpp"
#include "mmode/optim.hpp"
#include "mmode/rng.hpp"

namespace mmode {

// Stream purposes for patient_seed().
inline constexpr std::uint64_t kClipStream = 1;
inline constexpr std::uint64_t kAugmentStream = 2;

/// Loads videos and extracts M-mode stacks. Training clips are drawn from a
/// stream seeded by (seed, patient, epoch); evaluation clips are fixed
/// (frame 0 for both clip policies).
class StackLoader {
 public:
  StackLoader(const Manifest& manifest, std::size_t modes, ClipPolicy policy, std::uint64_t seed)
      : manifest_(manifest), modes_(static_cast<int>(modes)), policy_(policy), seed_(seed) {}

  MModeStack train_stack(const PatientRecord& r, std::size_t epoch) const {
    const auto video = load_video(manifest_.video_path(r));
    Rng rng(patient_seed(seed_, r.patient_id, epoch, kClipStream));
    auto st = extract_stack(video, modes_, choose_clip(video.t, policy_, &rng));
    st.patient_id = r.patient_id;
    return st;
  }

  MModeStack eval_stack(const PatientRecord& r) const {
    const auto video = load_video(manifest_.video_path(r));
    auto st = extract_stack(video, modes_, choose_clip(video.t, policy_, nullptr, 0u));
    st.patient_id = r.patient_id;
    return st;
  }

  ClipPolicy policy() const { return policy_; }

 private:
  const Manifest& manifest_;
  int modes_;
  ClipPolicy policy_;
  std::uint64_t seed_;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double lr = 0;
  std::optional<double> val_mae;
};

struct History {
  std::string kind;
  json config;
  std::vector<EpochLog> epochs;
  std::size_t labeled_patients = 0;
  std::optional<std::size_t> best_epoch;
  std::optional<double> best_val_mae;

  json to_json() const {
    json j = {{"kind", kind}, {"config", config}, {"labeled_patients", labeled_patients}};
    json rows = json::array();
    for (const auto& e : epochs) {
      json r = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"lr", e.lr}};
      r["val_mae"] = e.val_mae ? json(*e.val_mae) : json(nullptr);
      rows.push_back(r);
    }
    j["epochs"] = rows;
    j["best_epoch"] = best_epoch ? json(*best_epoch) : json(nullptr);
    j["best_val_mae"] = best_val_mae ? json(*best_val_mae) : json(nullptr);
    return j;
  }
};

struct TrainResult {
  ModelBundle bundle;
  History history;
};

struct Prediction {
  std::string patient_id;
  double true_ef = 0;
  double pred_ef = 0;
};

struct EvalReport {
  std::optional<double> auroc, auprc;
  double mae = 0, rmse = 0, r2 = 0;
  double threshold = metrics::kCardiomyopathyThreshold;
  std::size_t n = 0;
  std::string split;

  json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json("undefined"); };
    auto num = [](double v) { return std::isnan(v) ? json("undefined") : json(v); };
    return {{"auroc", opt(auroc)}, {"auprc", opt(auprc)}, {"mae", num(mae)},
            {"rmse", num(rmse)},   {"r2", num(r2)},       {"threshold", threshold},
            {"n", n},              {"split", split}};
  }
};

struct EvalResult {
  EvalReport report;
  std::vector<Prediction> predictions;
};

namespace detail {

inline void log_line(const TrainConfig& cfg, const std::string& msg) {
  if (cfg.verbose) std::clog << "[mmode] " << msg << '\n';
}

inline std::vector<const MModeStack*> pointers(const std::vector<MModeStack>& v) {
  std::vector<const MModeStack*> out;
  out.reserve(v.size());
  for (const auto& s : v) out.push_back(&s);
  return out;
}

inline std::vector<PatientRecord> shuffled(std::vector<PatientRecord> recs, std::uint64_t seed,
                                           std::size_t epoch) {
  Rng rng(derive_seed(seed, 0x5407, epoch));
  std::shuffle(recs.begin(), recs.end(), rng);
  return recs;
}

}  // namespace detail

/// EF predictions without graph recording, in input order.
inline std::vector<double> predict(const ModelBundle& bundle, const std::vector<MModeStack>& stacks,
                                   std::size_t batch_size = 32) {
  nn::NoGradGuard guard;
  std::vector<double> out;
  out.reserve(stacks.size());
  for (std::size_t b = 0; b < stacks.size(); b += batch_size) {
    std::vector<const MModeStack*> batch;
    for (std::size_t i = b; i < std::min(stacks.size(), b + batch_size); ++i)
      batch.push_back(&stacks[i]);
    const auto y = forward_supervised(batch, bundle);
    for (float v : y.data()) out.push_back(v);
  }
  return out;
}

inline EvalResult evaluate_stacks(const ModelBundle& bundle, const std::vector<MModeStack>& stacks,
                                  const std::vector<PatientRecord>& records,
                                  const std::string& split_name) {
  if (records.empty()) throw DataError("evaluation split '" + split_name + "' is empty");
  const auto pred = predict(bundle, stacks);
  std::vector<double> truth;
  EvalResult res;
  for (std::size_t i = 0; i < records.size(); ++i) {
    truth.push_back(records[i].ef);
    res.predictions.push_back({records[i].patient_id, records[i].ef, pred[i]});
  }
  const auto reg = metrics::regression(pred, truth);
  const auto cls = metrics::cardiomyopathy(pred, truth);
  auto& r = res.report;
  r.mae = reg.mae;
  r.rmse = reg.rmse;
  r.r2 = reg.r2;
  r.auroc = metrics::auroc(cls.scores, cls.labels);
  r.auprc = metrics::auprc(cls.scores, cls.labels);
  r.n = records.size();
  r.split = split_name;
  return res;
}

/// Predicts EF for every patient of a split and scores it. Positive class is
/// cardiomyopathy (true EF < 0.5) ranked by -predicted EF.
inline EvalResult evaluate(const ModelBundle& bundle, const Manifest& manifest, Split split,
                           ClipPolicy policy = ClipPolicy::Full112) {
  const auto records = manifest.split(split);
  if (records.empty()) throw DataError("split '" + std::string(to_string(split)) + "' is empty");
  const StackLoader loader(manifest, bundle.config().modes, policy, 0);
  std::vector<MModeStack> stacks;
  stacks.reserve(records.size());
  for (const auto& r : records) stacks.push_back(loader.eval_stack(r));
  return evaluate_stacks(bundle, stacks, records, std::string(to_string(split)));
}

/// Supervised regression of EF with Adam on the MSE loss. Short clips are
/// re-drawn every epoch. The parameters with the best validation MAE are
/// restored at the end (the last epoch's if there is no validation split).
inline TrainResult train_supervised_bundle(const Manifest& manifest, const TrainConfig& cfg,
                                           ModelBundle bundle, const std::string& kind) {
  cfg.validate();
  const Manifest labeled = subsample_train(manifest, cfg.fraction, cfg.seed);
  const auto train = labeled.split(Split::Train);
  if (train.empty()) throw DataError("train split is empty");
  for (const auto& r : train)
    if (std::isnan(r.ef)) throw DataError("patient '" + r.patient_id + "' has no EF label");
  const auto val = labeled.split(Split::Val);

  TrainResult res{bundle, {}};
  res.history.kind = kind;
  res.history.config = to_json(cfg);
  res.history.config["freeze_encoder"] = bundle.freeze_encoder();
  res.history.labeled_patients = train.size();

  const StackLoader loader(labeled, cfg.model.modes, cfg.clip, cfg.seed);
  std::vector<MModeStack> val_stacks;
  for (const auto& r : val) val_stacks.push_back(loader.eval_stack(r));

  auto params = bundle.supervised_params();
  nn::Adam<float> opt(params, {cfg.lr_sup});
  std::vector<std::vector<float>> best;
  double best_mae = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < cfg.epochs_sup; ++epoch) {
    const double factor = nn::warmup_factor(epoch, cfg.warmup_sup);
    const auto order = detail::shuffled(train, cfg.seed, epoch);
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.bsz_sup) {
      std::vector<MModeStack> stacks;
      std::vector<float> target;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.bsz_sup); ++i) {
        auto st = loader.train_stack(order[i], epoch);
        if (cfg.augment_sup) {
          Rng rng(patient_seed(cfg.seed, order[i].patient_id, epoch, kAugmentStream));
          st = augment(st, cfg.augment, rng);
        }
        stacks.push_back(std::move(st));
        target.push_back(static_cast<float>(order[i].ef));
      }
      opt.zero_grad();
      auto loss = regression_loss<float>(forward_supervised(detail::pointers(stacks), bundle),
                                         target);
      loss.backward();
      opt.step(factor);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(target.size());
    }
    EpochLog log{epoch, loss_sum / static_cast<double>(order.size()), cfg.lr_sup * factor, {}};
    if (!val_stacks.empty()) {
      const auto mae = evaluate_stacks(bundle, val_stacks, val, "val").report.mae;
      log.val_mae = mae;
      if (mae < best_mae) {
        best_mae = mae;
        best = nn::snapshot(params);
        res.history.best_epoch = epoch;
        res.history.best_val_mae = mae;
      }
    }
    detail::log_line(cfg, kind + " epoch " + std::to_string(epoch) + " loss " +
                              std::to_string(log.train_loss) +
                              (log.val_mae ? " val_mae " + std::to_string(*log.val_mae) : ""));
    res.history.epochs.push_back(log);
  }
  if (!best.empty()) nn::restore(params, best);
  return res;
}

/// End-to-end supervised training of a freshly initialized model.
inline TrainResult train_supervised(const Manifest& manifest, const TrainConfig& cfg) {
  return train_supervised_bundle(manifest, cfg, ModelBundle(cfg.model, cfg.seed), "supervised");
}

/// Supervised training on top of a pre-trained encoder. With `freeze` the
/// encoder weights stay bit-identical and only the head (and fusion LSTM) learn.
inline TrainResult finetune(const Manifest& manifest, const std::filesystem::path& encoder_ckpt,
                            const TrainConfig& cfg, bool freeze) {
  if (cfg.model.fusion == FusionKind::EarlyChannels)
    throw CheckpointError("pre-trained per-mode encoders need a late-fusion model");
  ModelBundle bundle(cfg.model, cfg.seed);
  bundle.load_encoder_from(encoder_ckpt);
  bundle.set_freeze_encoder(freeze);
  return train_supervised_bundle(manifest, cfg, std::move(bundle),
                                 freeze ? "finetune-frozen" : "finetune");
}

/// Contrastive pre-training of encoder and projection head on the train split.
/// EF labels are never read. Batches with fewer than two patients are skipped.
inline TrainResult pretrain_contrastive(const Manifest& manifest, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.model.fusion == FusionKind::EarlyChannels)
    throw ArgumentError("contrastive pre-training needs a late-fusion model");
  const auto train = manifest.split(Split::Train);
  if (train.size() < 2) throw DataError("contrastive pre-training needs at least 2 patients");

  TrainResult res{ModelBundle(cfg.model, cfg.seed), {}};
  res.history.kind = "pretrain";
  res.history.config = to_json(cfg);
  res.history.labeled_patients = 0;
  auto& bundle = res.bundle;
  const StackLoader loader(manifest, cfg.model.modes, cfg.clip, cfg.seed);
  nn::Adam<float> opt(bundle.contrastive_params(), {cfg.lr_cl});

  for (std::size_t epoch = 0; epoch < cfg.epochs_cl; ++epoch) {
    const double factor = nn::warmup_factor(epoch, cfg.warmup_epochs);
    const auto order = detail::shuffled(train, cfg.seed, epoch);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.bsz_cl) {
      const std::size_t end = std::min(order.size(), b + cfg.bsz_cl);
      if (end - b < 2) {
        std::clog << "[mmode] warning: skipping contrastive batch with " << (end - b)
                  << " patient(s)\n";
        continue;
      }
      std::vector<MModeStack> stacks;
      for (std::size_t i = b; i < end; ++i) stacks.push_back(loader.train_stack(order[i], epoch));
      Rng aug_rng(derive_seed(cfg.seed, kAugmentStream, epoch, b));
      opt.zero_grad();
      auto p = forward_contrastive(detail::pointers(stacks), bundle, cfg.augment, aug_rng);
      auto loss = combined_cl_loss(p, cfg.loss, Reduction::Mean);
      loss.backward();
      opt.step(factor);
      loss_sum += loss.item();
      ++batches;
    }
    EpochLog log{epoch, batches ? loss_sum / static_cast<double>(batches) : std::nan(""),
                 cfg.lr_cl * factor, {}};
    detail::log_line(cfg, "pretrain epoch " + std::to_string(epoch) + " loss " +
                              std::to_string(log.train_loss));
    res.history.epochs.push_back(log);
  }
  return res;
}

// ---------------------------------------------------------------- learning curve

enum class Method { E2E, E2EPlus, CL, CLPlus, CLFreeze, CLPlusFreeze };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::E2E: return "E2E";
    case Method::E2EPlus: return "E2E+";
    case Method::CL: return "CL";
    case Method::CLPlus: return "CL+";
    case Method::CLFreeze: return "CL-freeze";
    case Method::CLPlusFreeze: return "CL+-freeze";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::E2E, Method::E2EPlus, Method::CL, Method::CLPlus, Method::CLFreeze,
                   Method::CLPlusFreeze})
    if (to_string(m) == s) return m;
  throw ArgumentError("unknown method '" + std::string(s) + "'");
}

inline bool is_contrastive(Method m) { return m != Method::E2E && m != Method::E2EPlus; }
inline bool is_frozen(Method m) { return m == Method::CLFreeze || m == Method::CLPlusFreeze; }
inline ClipPolicy clip_of(Method m) {
  return (m == Method::E2EPlus || m == Method::CLPlus || m == Method::CLPlusFreeze)
             ? ClipPolicy::Short32Period2
             : ClipPolicy::Full112;
}

struct CurveCell {
  Method method;
  double fraction;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalReport> reports;

  json to_json() const {
    auto collect = [&](auto get) {
      std::vector<double> v;
      for (const auto& r : reports) v.push_back(get(r));
      const auto ms = metrics::mean_std(v);
      return json{{"mean", ms.mean}, {"std", ms.std}, {"n", ms.n}};
    };
    auto opt = [](const std::optional<double>& o) { return o ? *o : std::nan(""); };
    return {{"method", std::string(mmode::to_string(method))},
            {"fraction", fraction},
            {"seeds", seeds},
            {"auroc", collect([&](const EvalReport& r) { return opt(r.auroc); })},
            {"auprc", collect([&](const EvalReport& r) { return opt(r.auprc); })},
            {"mae", collect([](const EvalReport& r) { return r.mae; })},
            {"rmse", collect([](const EvalReport& r) { return r.rmse; })},
            {"r2", collect([](const EvalReport& r) { return r.r2; })}};
  }
};

/// Trains and evaluates every (method, fraction, seed) combination on the test
/// split. Pre-trained encoders are shared across fractions and across the
/// frozen / unfrozen variants of one clip policy and seed, and are kept in
/// `work_dir`.
inline std::vector<CurveCell> learning_curve(const Manifest& manifest,
                                             const std::vector<double>& fractions,
                                             const std::vector<Method>& methods,
                                             const std::vector<std::uint64_t>& seeds,
                                             const TrainConfig& base,
                                             const std::filesystem::path& work_dir) {
  for (double p : fractions)
    if (!(p > 0.0 && p <= 1.0)) throw ArgumentError("fractions must lie in (0, 1]");
  std::filesystem::create_directories(work_dir);
  std::map<std::pair<int, std::uint64_t>, std::filesystem::path> pretrained;
  auto encoder_for = [&](ClipPolicy clip, std::uint64_t seed) {
    const auto key = std::make_pair(static_cast<int>(clip), seed);
    if (auto it = pretrained.find(key); it != pretrained.end()) return it->second;
    TrainConfig c = base;
    c.clip = clip;
    c.seed = seed;
    const auto path = work_dir / ("pretrain_" + std::string(to_string(clip)) + "_seed" +
                                  std::to_string(seed) + ".mmck");
    pretrain_contrastive(manifest, c).bundle.save(path);
    pretrained[key] = path;
    return path;
  };

  std::vector<CurveCell> cells;
  for (Method method : methods)
    for (double p : fractions) {
      CurveCell cell{method, p, seeds, {}};
      for (std::uint64_t seed : seeds) {
        TrainConfig c = base;
        c.clip = clip_of(method);
        c.fraction = p;
        c.seed = seed;
        const auto result = is_contrastive(method)
                                ? finetune(manifest, encoder_for(c.clip, seed), c, is_frozen(method))
                                : train_supervised(manifest, c);
        cell.reports.push_back(evaluate(result.bundle, manifest, Split::Test, c.clip).report);
      }
      cells.push_back(std::move(cell));
    }
  return cells;
}

// ---------------------------------------------------------------- cost report

struct BenchReport {
  double params_mio = 0;
  std::size_t batch_size = 0;
  std::vector<double> train_sec, infer_sec;  // per measured repeat
  double train_sec_per_batch = 0, infer_sec_per_batch = 0;
  double train_msec_per_sample = 0, infer_msec_per_sample = 0;
  std::size_t peak_bytes = 0;

  json to_json() const {
    return {{"params_mio", params_mio},
            {"batch_size", batch_size},
            {"train_sec_per_batch", train_sec_per_batch},
            {"infer_sec_per_batch", infer_sec_per_batch},
            {"train_msec_per_sample", train_msec_per_sample},
            {"infer_msec_per_sample", infer_msec_per_sample},
            {"train_sec_repeats", train_sec},
            {"infer_sec_repeats", infer_sec},
            {"peak_working_set_bytes", peak_bytes}};
  }
};

/// Value and gradient bytes of every node reachable from `root`.
template <class T>
std::size_t graph_bytes(const nn::Tensor<T>& root) {
  std::unordered_set<const nn::Node<T>*> seen;
  std::vector<const nn::Node<T>*> stack{root.node()};
  std::size_t bytes = 0;
  while (!stack.empty()) {
    const auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    bytes += n->value.size() * sizeof(T) * (n->requires_grad ? 2 : 1);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return bytes;
}

/// Times one training step and one inference pass per batch over `repeats`
/// measured repeats; the first (warm-up) repeat is discarded.
inline BenchReport bench(const ModelBundle& bundle, const Manifest& manifest,
                         std::size_t batch_size, std::size_t repeats = 3,
                         ClipPolicy clip = ClipPolicy::Full112) {
  if (batch_size == 0 || repeats == 0) throw ArgumentError("bench: batch size and repeats must be positive");
  auto records = manifest.split(Split::Train);
  if (records.empty()) records = manifest.records;
  if (records.empty()) throw DataError("bench: manifest is empty");
  const StackLoader loader(manifest, bundle.config().modes, clip, 0);
  std::vector<MModeStack> stacks;
  std::vector<float> target;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto& r = records[i % records.size()];
    stacks.push_back(loader.eval_stack(r));
    target.push_back(std::isnan(r.ef) ? 0.5f : static_cast<float>(r.ef));
  }
  const auto ptrs = detail::pointers(stacks);

  BenchReport rep;
  rep.params_mio = static_cast<double>(bundle.param_count()) / 1e6;
  rep.batch_size = batch_size;
  // Scratch copy so timing never touches the caller's weights.
  ModelBundle scratch(bundle.config(), 0);
  auto scratch_params = scratch.all_params();
  nn::restore(scratch_params, nn::snapshot(bundle.all_params()));
  nn::Adam<float> opt(scratch.supervised_params(), {1e-3});
  using clock = std::chrono::steady_clock;
  for (std::size_t rep_i = 0; rep_i <= repeats; ++rep_i) {
    auto t0 = clock::now();
    opt.zero_grad();
    auto loss = regression_loss<float>(forward_supervised(ptrs, scratch), target);
    if (rep_i == 0) rep.peak_bytes = graph_bytes(loss);
    loss.backward();
    opt.step();
    auto t1 = clock::now();
    {
      nn::NoGradGuard guard;
      (void)forward_supervised(ptrs, scratch);
    }
    auto t2 = clock::now();
    if (rep_i == 0) continue;
    rep.train_sec.push_back(std::chrono::duration<double>(t1 - t0).count());
    rep.infer_sec.push_back(std::chrono::duration<double>(t2 - t1).count());
  }
  rep.train_sec_per_batch = metrics::mean_std(rep.train_sec).mean;
  rep.infer_sec_per_batch = metrics::mean_std(rep.infer_sec).mean;
  rep.train_msec_per_sample = 1000.0 * rep.train_sec_per_batch / static_cast<double>(batch_size);
  rep.infer_msec_per_sample = 1000.0 * rep.infer_sec_per_batch / static_cast<double>(batch_size);
  return rep;
}

// ---------------------------------------------------------------- reports

inline void write_predictions_csv(const std::filesystem::path& path,
                                  const std::vector<Prediction>& preds) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "patient_id,true_ef,pred_ef,cardiomyopathy,predicted_cardiomyopathy\n";
  os << std::setprecision(9);
  for (const auto& p : preds)
    os << p.patient_id << ',' << p.true_ef << ',' << p.pred_ef << ','
       << (p.true_ef < metrics::kCardiomyopathyThreshold ? 1 : 0) << ','
       << (p.pred_ef < metrics::kCardiomyopathyThreshold ? 1 : 0) << '\n';
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

}  // namespace mmode
