#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "mmode/checkpoint.hpp"
#include "mmode/config.hpp"
#include "mmode/losses.hpp"
#include "mmode/metrics.hpp"
#include "mmode/model.hpp"
#include "mmode/optim.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mmode;

namespace {

ModelConfig tiny(FusionKind fusion, std::size_t modes) {
  ModelConfig c;
  c.fusion = fusion;
  c.modes = modes;
  c.encoder.stem_width = 4;
  c.encoder.stem_kernel = 4;
  c.encoder.stem_stride = 4;
  c.encoder.stage_widths = {8};
  c.encoder.blocks_per_stage = {1};
  c.encoder.out_dim = 8;
  c.lstm_dim = 6;
  c.head_hidden = 8;
  c.proj_hidden = 16;
  c.proj_out = 8;
  return c;
}

std::vector<MModeStack> random_stacks(std::size_t n, std::size_t modes, std::uint64_t seed,
                                      std::uint32_t s = 32, std::uint32_t t = 32) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<MModeStack> out(n);
  for (auto& st : out) {
    st.angles = angle_set(static_cast<int>(modes));
    for (std::size_t m = 0; m < modes; ++m) {
      MModeImage img;
      img.depth = s;
      img.time = t;
      img.pixels.resize(s * t);
      for (auto& p : img.pixels) p = u(rng);
      st.images.push_back(img);
    }
  }
  return out;
}

std::vector<const MModeStack*> ptrs(const std::vector<MModeStack>& v) {
  std::vector<const MModeStack*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// ---------------------------------------------------------------- model

TEST(Model, EarlyFusionUsesOneChannelPerMode) {
  ModelConfig c;
  c.fusion = FusionKind::EarlyChannels;
  EXPECT_EQ(c.resolved_encoder().in_channels, 10u);
  c.fusion = FusionKind::LateMean;
  EXPECT_EQ(c.resolved_encoder().in_channels, 1u);
}

TEST(Model, HeadInputMatchesFusion) {
  ModelConfig c;  // K = 512, M = 10
  ModelBundle concat(c, 0);
  EXPECT_EQ(concat.head().fc1.in_dim(), 5120u);
  c.fusion = FusionKind::LateLSTM;
  ModelBundle lstm(c, 0);
  EXPECT_EQ(lstm.head().fc1.in_dim(), 256u);
  ASSERT_NE(lstm.lstm(), nullptr);
  EXPECT_EQ(concat.lstm(), nullptr);
  EXPECT_LE(concat.param_count(), 12'000'000u);
}

TEST(Model, ForwardShapesForEveryFusion) {
  for (auto kind : {FusionKind::EarlyChannels, FusionKind::LateConcat, FusionKind::LateMean,
                    FusionKind::LateLSTM}) {
    ModelBundle b(tiny(kind, 3), 1);
    const auto stacks = random_stacks(5, 3, 2);
    const auto y = forward_supervised(ptrs(stacks), b);
    EXPECT_EQ(y.shape(), (nn::Shape{5, 1})) << to_string(kind);
  }
}

TEST(Model, SupervisedShapeErrors) {
  ModelBundle b(tiny(FusionKind::LateConcat, 3), 1);
  EXPECT_THROW(forward_supervised(ptrs(random_stacks(2, 2, 1)), b), ShapeError);
  auto mixed = random_stacks(2, 3, 1);
  mixed[1] = random_stacks(1, 3, 2, 32, 16)[0];
  EXPECT_THROW(forward_supervised(ptrs(mixed), b), ShapeError);
}

TEST(Model, PredictionsDoNotDependOnBatchMates) {
  ModelBundle b(tiny(FusionKind::LateLSTM, 2), 3);
  const auto stacks = random_stacks(4, 2, 3);
  nn::NoGradGuard g;
  const auto all = values(forward_supervised(ptrs(stacks), b));
  for (std::size_t i = 0; i < 4; ++i) {
    const auto one = values(forward_supervised({&stacks[i]}, b));
    EXPECT_NEAR(one[0], all[i], 1e-5f);
  }
}

TEST(Model, SameSeedSameWeights) {
  ModelBundle a(tiny(FusionKind::LateConcat, 2), 9), b(tiny(FusionKind::LateConcat, 2), 9),
      c(tiny(FusionKind::LateConcat, 2), 10);
  EXPECT_EQ(nn::snapshot(a.all_params()), nn::snapshot(b.all_params()));
  EXPECT_NE(nn::snapshot(a.all_params()), nn::snapshot(c.all_params()));
}

TEST(Contrastive, ProjectionBatchLayout) {
  ModelBundle b(tiny(FusionKind::LateConcat, 3), 4);
  const auto stacks = random_stacks(4, 3, 5);
  Rng rng(1);
  const auto p = forward_contrastive(ptrs(stacks), b, AugmentConfig{}, rng);
  ASSERT_EQ(p.shape(), (nn::Shape{4, 6, 8}));
  for (std::size_t r = 0; r < 24; ++r) {
    double sq = 0;
    for (std::size_t d = 0; d < 8; ++d) sq += std::pow(p.data()[r * 8 + d], 2);
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-5);
  }
}

TEST(Contrastive, IdentityAugmentationDuplicatesOriginals) {
  ModelBundle b(tiny(FusionKind::LateMean, 2), 4);
  const auto stacks = random_stacks(3, 2, 6);
  Rng rng(1);
  const auto p = forward_contrastive(ptrs(stacks), b, AugmentConfig::identity(), rng);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t d = 0; d < 8; ++d)
        EXPECT_NEAR(p.data()[(i * 4 + m) * 8 + d], p.data()[(i * 4 + m + 2) * 8 + d], 1e-6f);
}

TEST(Contrastive, Errors) {
  Rng rng(1);
  ModelBundle late(tiny(FusionKind::LateConcat, 2), 4);
  EXPECT_THROW(forward_contrastive(ptrs(random_stacks(1, 2, 1)), late, {}, rng), ArgumentError);
  ModelBundle early(tiny(FusionKind::EarlyChannels, 2), 4);
  EXPECT_THROW(forward_contrastive(ptrs(random_stacks(2, 2, 1)), early, {}, rng), ShapeError);
}

TEST(Contrastive, LossGradientReachesEncoderAndProjection) {
  ModelBundle b(tiny(FusionKind::LateConcat, 2), 4);
  const auto stacks = random_stacks(3, 2, 7);
  Rng rng(2);
  auto loss = combined_cl_loss(forward_contrastive(ptrs(stacks), b, {}, rng), ContrastiveConfig{},
                               Reduction::Mean);
  loss.backward();
  for (const auto& p : b.contrastive_params()) {
    double g = 0;
    for (float v : p.tensor.grad()) g += std::abs(v);
    EXPECT_GT(g, 0.0) << p.name;
  }
  for (const auto& p : b.head_params())
    for (float v : p.tensor.grad()) EXPECT_EQ(v, 0.0f) << p.name;
}

TEST(Freeze, EncoderStaysBitwiseUnchanged) {
  ModelBundle b(tiny(FusionKind::LateConcat, 2), 5);
  b.set_freeze_encoder(true);
  const auto enc_before = nn::snapshot(b.encoder_params());
  const auto head_before = nn::snapshot(b.head_params());
  const auto params = b.supervised_params();
  EXPECT_EQ(params.size(), b.head_params().size());
  nn::Adam<float> opt(params, {1e-2});
  const auto stacks = random_stacks(4, 2, 8);
  const std::vector<float> target{0.2f, 0.4f, 0.6f, 0.8f};
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    auto loss = regression_loss<float>(forward_supervised(ptrs(stacks), b), target);
    loss.backward();
    opt.step();
  }
  EXPECT_EQ(nn::snapshot(b.encoder_params()), enc_before);
  EXPECT_NE(nn::snapshot(b.head_params()), head_before);
  b.set_freeze_encoder(false);
  EXPECT_EQ(b.supervised_params().size(), b.encoder_params().size() + b.head_params().size());
}

// ---------------------------------------------------------------- checkpoint

TEST(Checkpoint, GitBlobHash) {
  EXPECT_EQ(ckpt::content_hash({}), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  const std::string hello = "hello\n";
  EXPECT_EQ(ckpt::content_hash({hello.begin(), hello.end()}),
            "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(Checkpoint, RoundTripIsBitwise) {
  testutil::TempDir dir("ckpt");
  for (auto kind : {FusionKind::EarlyChannels, FusionKind::LateLSTM}) {
    ModelBundle b(tiny(kind, 3), 11);
    const auto hash = b.save(dir / "a.mmck");
    EXPECT_EQ(hash, ckpt::content_hash(ckpt::read_bytes(dir / "a.mmck")));
    EXPECT_EQ(b.save(dir / "b.mmck"), hash);
    const auto loaded = ModelBundle::load(dir / "a.mmck");
    EXPECT_TRUE(loaded.config() == b.config());
    EXPECT_EQ(nn::snapshot(loaded.all_params()), nn::snapshot(b.all_params()));
    const auto stacks = random_stacks(3, 3, 12);
    nn::NoGradGuard g;
    EXPECT_EQ(values(forward_supervised(ptrs(stacks), loaded)),
              values(forward_supervised(ptrs(stacks), b)));
    EXPECT_EQ(loaded.save(dir / "c.mmck"), hash);
  }
}

TEST(Checkpoint, FreezeFlagPersists) {
  testutil::TempDir dir("ckpt");
  ModelBundle b(tiny(FusionKind::LateMean, 2), 1);
  b.set_freeze_encoder(true);
  b.save(dir / "f.mmck");
  EXPECT_TRUE(ModelBundle::load(dir / "f.mmck").freeze_encoder());
}

TEST(Checkpoint, EncoderTransfer) {
  testutil::TempDir dir("ckpt");
  ModelBundle src(tiny(FusionKind::LateMean, 2), 1);
  src.save(dir / "src.mmck");
  ModelBundle dst(tiny(FusionKind::LateLSTM, 4), 2);
  const auto head_before = nn::snapshot(dst.head_params());
  dst.load_encoder_from(dir / "src.mmck");
  EXPECT_EQ(nn::snapshot(dst.encoder_params()), nn::snapshot(src.encoder_params()));
  EXPECT_EQ(nn::snapshot(dst.head_params()), head_before);

  auto other = tiny(FusionKind::LateMean, 2);
  other.encoder.out_dim = 16;
  ModelBundle wide(other, 3);
  EXPECT_THROW(wide.load_encoder_from(dir / "src.mmck"), CheckpointError);
  ModelBundle early(tiny(FusionKind::EarlyChannels, 2), 3);
  EXPECT_THROW(early.load_encoder_from(dir / "src.mmck"), CheckpointError);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  testutil::TempDir dir("ckpt");
  ModelBundle b(tiny(FusionKind::LateMean, 2), 1);
  b.save(dir / "ok.mmck");
  auto bytes = ckpt::read_bytes(dir / "ok.mmck");
  auto write = [&](const std::string& name, const std::vector<std::uint8_t>& data) {
    std::ofstream os(dir / name, std::ios::binary);
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    return dir / name;
  };
  EXPECT_THROW(ModelBundle::load(write("trunc.mmck", {bytes.begin(), bytes.end() - 3})),
               CheckpointError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(ModelBundle::load(write("magic.mmck", bad_magic)), CheckpointError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(ModelBundle::load(write("trail.mmck", trailing)), CheckpointError);
  EXPECT_THROW(ModelBundle::load(dir / "missing.mmck"), CheckpointError);
}

TEST(Checkpoint, ParameterShapeMismatch) {
  testutil::TempDir dir("ckpt");
  ModelBundle b(tiny(FusionKind::LateMean, 2), 1);
  auto blocks = b.to_blocks();
  // Drop one parameter block.
  blocks.pop_back();
  ckpt::write_file(dir / "short.mmck", blocks);
  EXPECT_THROW(ModelBundle::load(dir / "short.mmck"), CheckpointError);
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, AurocExample) {
  const std::vector<double> s{0.5, 0.5, 0.8};
  const std::vector<int> l{0, 1, 1};
  EXPECT_DOUBLE_EQ(*metrics::auroc(s, l), 0.75);
}

TEST(Metrics, AurocMatchesPairCounting) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 49;
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 7) / 7.0;  // many ties
      l[i] = static_cast<int>(rng() % 2);
    }
    const auto got = metrics::auroc(s, l);
    const bool both = std::count(l.begin(), l.end(), 1) > 0 && std::count(l.begin(), l.end(), 0) > 0;
    ASSERT_EQ(got.has_value(), both);
    if (both) EXPECT_EQ(*got, oracle::auroc_pairs(s, l));
  }
}

TEST(Metrics, AurocSingleClassIsUndefined) {
  const std::vector<double> s{0.1, 0.2};
  EXPECT_FALSE(metrics::auroc(s, std::vector<int>{1, 1}).has_value());
  EXPECT_FALSE(metrics::auprc(s, std::vector<int>{0, 0}).has_value());
}

TEST(Metrics, Auprc) {
  const std::vector<double> perfect{0.9, 0.8, 0.2, 0.1};
  EXPECT_DOUBLE_EQ(*metrics::auprc(perfect, std::vector<int>{1, 1, 0, 0}), 1.0);
  // Ranking pos, neg, pos: AP = 1/2 * 1 + 1/2 * 2/3.
  const std::vector<double> s{0.9, 0.5, 0.1};
  EXPECT_DOUBLE_EQ(*metrics::auprc(s, std::vector<int>{1, 0, 1}), 0.5 + 1.0 / 3.0);
  // All tied: one threshold, precision = prevalence.
  const std::vector<double> tied{0.3, 0.3, 0.3, 0.3};
  EXPECT_DOUBLE_EQ(*metrics::auprc(tied, std::vector<int>{1, 0, 0, 0}), 0.25);
}

TEST(Metrics, RegressionIdentities) {
  const std::vector<double> truth{0.3, 0.45, 0.6, 0.7};
  const auto perfect = metrics::regression(truth, truth);
  EXPECT_EQ(perfect.mae, 0.0);
  EXPECT_EQ(perfect.rmse, 0.0);
  EXPECT_EQ(perfect.r2, 1.0);
  const std::vector<double> mean(4, (0.3 + 0.45 + 0.6 + 0.7) / 4);
  EXPECT_NEAR(metrics::regression(mean, truth).r2, 0.0, 1e-12);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> p(10), t(10);
    for (auto& x : p) x = u(rng);
    for (auto& x : t) x = u(rng);
    const auto r = metrics::regression(p, t);
    EXPECT_GE(r.rmse, r.mae - 1e-15);
  }
  const std::vector<double> flat{0.5, 0.5};
  EXPECT_TRUE(std::isnan(metrics::regression(std::vector<double>{0.4, 0.6}, flat).r2));
  EXPECT_THROW(metrics::regression(std::vector<double>{0.1}, flat), ShapeError);
}

TEST(Metrics, CardiomyopathyLabels) {
  const std::vector<double> pred{0.3, 0.6}, truth{0.49, 0.5};
  const auto c = metrics::cardiomyopathy(pred, truth);
  EXPECT_EQ(c.labels, (std::vector<int>{1, 0}));
  EXPECT_EQ(c.scores, (std::vector<double>{-0.3, -0.6}));
}

TEST(Metrics, MeanStd) {
  const std::vector<double> v{1, 2, 3, std::nan("")};
  const auto r = metrics::mean_std(v);
  EXPECT_EQ(r.n, 3u);
  EXPECT_DOUBLE_EQ(r.mean, 2.0);
  EXPECT_DOUBLE_EQ(r.std, 1.0);
}

// ---------------------------------------------------------------- config

TEST(Config, ParsesKeyValueFile) {
  std::istringstream is(
      "# desk preset\nfusion = lstm\nmodes = 4  # fewer\ntau=0.1\nalpha = 0.5\n"
      "enc_stage_widths = 8, 16\nenc_blocks = 1,1\nclip = short\naugment_sup = false\n");
  const auto c = parse_config(is);
  EXPECT_EQ(c.model.fusion, FusionKind::LateLSTM);
  EXPECT_EQ(c.model.modes, 4u);
  EXPECT_EQ(c.loss.tau, 0.1);
  EXPECT_EQ(c.loss.alpha, 0.5);
  EXPECT_EQ(c.model.encoder.stage_widths, (std::vector<std::size_t>{8, 16}));
  EXPECT_EQ(c.clip, ClipPolicy::Short32Period2);
  EXPECT_FALSE(c.augment_sup);
}

TEST(Config, RejectsBadInput) {
  TrainConfig c;
  EXPECT_THROW(apply_override(c, "colour=blue"), ArgumentError);
  EXPECT_THROW(apply_override(c, "tau"), ArgumentError);
  EXPECT_THROW(apply_override(c, "modes=many"), ArgumentError);
  EXPECT_THROW(apply_override(c, "fusion=attention"), ArgumentError);
  std::istringstream bad_tau("tau = 0\n");
  EXPECT_THROW(parse_config(bad_tau), ArgumentError);
  std::istringstream bad_alpha("alpha = 1.5\n");
  EXPECT_THROW(parse_config(bad_alpha), ArgumentError);
  std::istringstream bad_flip("flip_prob = 2\n");
  EXPECT_THROW(parse_config(bad_flip), ArgumentError);
  std::istringstream no_eq("fusion concat\n");
  EXPECT_THROW(parse_config(no_eq), ArgumentError);
}

TEST(Config, TextRoundTripAndEcho) {
  TrainConfig c;
  apply_override(c, "fusion=mean");
  apply_override(c, "noise_sigma=0.07");
  apply_override(c, "seed=42");
  apply_override(c, "enc_stem_stride=4");
  std::istringstream is(to_config_text(c));
  const auto back = parse_config(is);
  EXPECT_EQ(to_json(back), to_json(c));
  const auto j = to_json(c);
  EXPECT_EQ(j.at("model").at("fusion"), "mean");
  EXPECT_EQ(j.at("noise_sigma"), 0.07);
  EXPECT_EQ(j.at("seed"), 42);
  EXPECT_EQ(j.at("tau"), 0.01);
  EXPECT_EQ(j.at("alpha"), 0.8);
}

TEST(Config, Defaults) {
  const TrainConfig c;
  EXPECT_EQ(c.model.fusion, FusionKind::LateConcat);
  EXPECT_EQ(c.model.modes, 10u);
  EXPECT_EQ(c.bsz_sup, 64u);
  EXPECT_EQ(c.bsz_cl, 256u);
  EXPECT_EQ(c.epochs_sup, 100u);
  EXPECT_EQ(c.epochs_cl, 300u);
  EXPECT_EQ(c.warmup_epochs, 30u);
  EXPECT_EQ(c.lr_sup, 1e-3);
  EXPECT_EQ(c.augment.flip_prob, 0.5);
}

}  // namespace
