#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "mmode/losses.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mmode;
using nn::Tensor;

namespace {

using testutil::unit_batch;
using oracle::to_batch;

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

TEST(Losses, PatientAwareHandChosenBatch) {
  // N=2, M=2, D=2, tau=1.
  const double s = std::sqrt(0.5);
  auto p = Tensor<double>::from({2, 4, 2}, {1, 0, 0, 1, s, s, -s, s,  //
                                            -1, 0, s, -s, 0, -1, 1, 0});
  const double expected = oracle::patient_aware(to_batch(p), 1.0);
  EXPECT_LE(rel(patient_aware_loss(p, 1.0).item(), expected), 1e-10);
  // Hand evaluation of the first anchor term (patient 0, view 0, positive view 1):
  // candidates are (0,1), (1,0), (1,1) with dot products 0, -1, s.
  const double first = -std::log(std::exp(0.0) / (std::exp(0.0) + std::exp(-1.0) + std::exp(s)));
  EXPECT_GT(expected, first);
}

TEST(Losses, PatientAwareSymmetricClosedForm) {
  for (std::size_t n : {2u, 3u}) {
    for (std::size_t m : {2u, 4u}) {
      std::vector<double> v(n * 2 * m * 3, 0.0);
      for (std::size_t r = 0; r < n * 2 * m; ++r) v[r * 3] = 1.0;
      auto p = Tensor<double>::from({n, 2 * m, 3}, v);
      const double nm = static_cast<double>(n * m);
      const double closed = nm * std::log(nm - 1.0);
      EXPECT_LE(rel(patient_aware_loss(p, 0.5).item(), closed), 1e-12);
      EXPECT_LE(rel(oracle::patient_aware(to_batch(p), 0.5), closed), 1e-12);
    }
  }
}

TEST(Losses, StructureAwareSinglePairIsZero) {
  std::mt19937_64 rng(3);
  auto p = unit_batch(1, 1, 4, rng);
  EXPECT_NEAR(structure_aware_loss(p, 0.01).item(), 0.0, 1e-15);
}

TEST(Losses, MatchOraclesOnRandomBatches) {
  std::mt19937_64 rng(11);
  for (double tau : {0.01, 0.1, 1.0})
    for (int trial = 0; trial < 5; ++trial) {
      auto p = unit_batch(2 + trial % 3, 2 + trial % 2, 5, rng);
      const auto b = to_batch(p);
      EXPECT_LE(rel(patient_aware_loss(p, tau).item(), oracle::patient_aware(b, tau)), 1e-10);
      EXPECT_LE(rel(structure_aware_loss(p, tau).item(), oracle::structure_aware(b, tau)), 1e-10);
      ContrastiveConfig cfg{tau, 0.8};
      EXPECT_LE(rel(combined_cl_loss(p, cfg).item(), oracle::combined(b, tau, 0.8)), 1e-10);
    }
}

TEST(Losses, CombinationEndpointsAndDefault) {
  std::mt19937_64 rng(12);
  auto p = unit_batch(3, 3, 4, rng);
  const double pa = patient_aware_loss(p, 0.1).item(), sa = structure_aware_loss(p, 0.1).item();
  EXPECT_EQ(combined_cl_loss(p, {0.1, 1.0}).item(), pa);
  EXPECT_EQ(combined_cl_loss(p, {0.1, 0.0}).item(), sa);
  EXPECT_NEAR(combined_cl_loss(p, {0.1, 0.8}).item(), 0.8 * pa + 0.2 * sa,
              1e-14 * std::abs(pa + sa));
  const ContrastiveConfig defaults;
  EXPECT_EQ(defaults.tau, 0.01);
  EXPECT_EQ(defaults.alpha, 0.8);
}

TEST(Losses, MeanReductionDividesByAnchorCount) {
  std::mt19937_64 rng(13);
  auto p = unit_batch(3, 2, 4, rng);
  EXPECT_NEAR(patient_aware_loss(p, 0.1, Reduction::Mean).item(),
              patient_aware_loss(p, 0.1).item() / 6.0, 1e-12);
  EXPECT_NEAR(structure_aware_loss(p, 0.1, Reduction::Mean).item(),
              structure_aware_loss(p, 0.1).item() / 12.0, 1e-12);
}

TEST(Losses, ArgumentErrors) {
  std::mt19937_64 rng(14);
  auto p1 = unit_batch(2, 1, 3, rng);
  EXPECT_THROW(patient_aware_loss(p1, 0.1), ArgumentError);
  EXPECT_NO_THROW(structure_aware_loss(p1, 0.1));
  EXPECT_NO_THROW(combined_cl_loss(p1, {0.1, 0.0}));
  auto p2 = unit_batch(2, 2, 3, rng);
  EXPECT_THROW(patient_aware_loss(p2, 0.0), ArgumentError);
  EXPECT_THROW(structure_aware_loss(p2, -1.0), ArgumentError);
  EXPECT_THROW(combined_cl_loss(p2, {0.1, 1.5}), ArgumentError);
  EXPECT_THROW(combined_cl_loss(p2, {0.1, -0.1}), ArgumentError);
  EXPECT_THROW(patient_aware_loss(Tensor<double>::zeros({2, 3, 4}), 0.1), ShapeError);
}

TEST(Losses, GradientsMatchFiniteDifferencesDouble) {
  std::mt19937_64 rng(15);
  for (double tau : {0.01, 0.1, 1.0}) {
    auto p = unit_batch(3, 2, 4, rng);
    const double h = tau < 0.05 ? 1e-7 : 1e-6;
    using F = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;
    F pa = [tau](const auto& in) { return patient_aware_loss(in[0], tau); };
    F sa = [tau](const auto& in) { return structure_aware_loss(in[0], tau); };
    F cl = [tau](const auto& in) { return combined_cl_loss(in[0], {tau, 0.8}, Reduction::Mean); };
    EXPECT_LT(testutil::grad_check<double>({p}, pa, h), 1e-6) << "tau " << tau;
    EXPECT_LT(testutil::grad_check<double>({p}, sa, h), 1e-6) << "tau " << tau;
    EXPECT_LT(testutil::grad_check<double>({p}, cl, h), 1e-6) << "tau " << tau;
  }
}

TEST(Losses, GradientsMatchFiniteDifferencesFloat) {
  std::mt19937_64 rng(16);
  auto p = unit_batch<float>(3, 2, 4, rng);
  using F = std::function<Tensor<float>(const std::vector<Tensor<float>>&)>;
  F pa = [](const auto& in) { return patient_aware_loss(in[0], 1.0); };
  F sa = [](const auto& in) { return structure_aware_loss(in[0], 1.0); };
  EXPECT_LT(testutil::grad_check<float>({p}, pa, 1e-2), 1e-3);
  EXPECT_LT(testutil::grad_check<float>({p}, sa, 1e-2), 1e-3);
}

TEST(Losses, InvariantUnderCommonRotation) {
  std::mt19937_64 rng(17);
  const std::size_t d = 4;
  auto p = unit_batch(3, 2, d, rng);
  // Random orthogonal matrix by Gram-Schmidt.
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> q(d, std::vector<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (auto& x : q[i]) x = g(rng);
    for (std::size_t j = 0; j < i; ++j) {
      const double c = oracle::dot(q[i], q[j]);
      for (std::size_t k = 0; k < d; ++k) q[i][k] -= c * q[j][k];
    }
    const double nrm = std::sqrt(oracle::dot(q[i], q[i]));
    for (auto& x : q[i]) x /= nrm;
  }
  std::vector<double> rotated(p.numel());
  for (std::size_t r = 0; r < p.numel() / d; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += q[i][k] * p.data()[r * d + k];
      rotated[r * d + i] = s;
    }
  auto pr = Tensor<double>::from(p.shape(), rotated);
  for (double tau : {0.01, 1.0}) {
    EXPECT_LE(rel(patient_aware_loss(pr, tau).item(), patient_aware_loss(p, tau).item()), 1e-6);
    EXPECT_LE(rel(structure_aware_loss(pr, tau).item(), structure_aware_loss(p, tau).item()), 1e-6);
  }
}

TEST(Losses, InvariantUnderPatientPermutation) {
  std::mt19937_64 rng(18);
  auto p = unit_batch(4, 2, 3, rng);
  const std::size_t row = p.numel() / 4;
  std::vector<double> perm;
  for (std::size_t i : {2u, 0u, 3u, 1u})
    perm.insert(perm.end(), p.data().begin() + i * row, p.data().begin() + (i + 1) * row);
  auto pp = Tensor<double>::from(p.shape(), perm);
  EXPECT_LE(rel(patient_aware_loss(pp, 0.1).item(), patient_aware_loss(p, 0.1).item()), 1e-12);
  EXPECT_LE(rel(structure_aware_loss(pp, 0.1).item(), structure_aware_loss(p, 0.1).item()), 1e-12);
}

TEST(Losses, PatientAwareDecreasesWhenPositivesMoveCloser) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = unit_batch(3, 2, 4, rng);
    const std::size_t d = 4;
    // Move view 1 of patient 0 a small step toward its positive, view 0.
    const auto before = patient_aware_loss(p, 0.1).item();
    std::vector<double> v(p.data().begin(), p.data().end());
    double nrm = 0;
    for (std::size_t k = 0; k < d; ++k) {
      v[d + k] += 1e-4 * (v[k] - v[d + k]);
      nrm += v[d + k] * v[d + k];
    }
    for (std::size_t k = 0; k < d; ++k) v[d + k] /= std::sqrt(nrm);
    EXPECT_LT(patient_aware_loss(Tensor<double>::from(p.shape(), v), 0.1).item(), before);
  }
}

TEST(Losses, StableAtLowTemperature) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = unit_batch<float>(4, 3, 8, rng);
    auto l = combined_cl_loss(p, {0.01, 0.8});
    EXPECT_TRUE(std::isfinite(l.item()));
    l.backward();
    for (float g : p.grad()) ASSERT_TRUE(std::isfinite(g));
  }
  // Identical vectors everywhere: every logit is 100.
  std::vector<float> same(2 * 4 * 3, 0.0f);
  for (std::size_t r = 0; r < 8; ++r) same[r * 3] = 1.0f;
  auto p = Tensor<float>::from({2, 4, 3}, same);
  EXPECT_NEAR(patient_aware_loss(p, 0.01).item(), 4.0 * std::log(3.0), 1e-4);
}

TEST(Losses, RegressionLoss) {
  auto pred = Tensor<double>::from({1, 1}, {0.5}, true);
  std::vector<double> t{0.3};
  auto l = regression_loss<double>(pred, t);
  EXPECT_NEAR(l.item(), 0.04, 1e-15);
  l.backward();
  EXPECT_NEAR(pred.grad()[0], 2 * (0.5 - 0.3), 1e-15);
  auto same = Tensor<double>::from({2, 1}, {0.3, 0.7});
  std::vector<double> t2{0.3, 0.7};
  EXPECT_EQ(regression_loss<double>(same, t2).item(), 0.0);
  std::vector<double> t3{0.3, 0.7, 0.1};
  EXPECT_THROW(regression_loss<double>(same, t3), ShapeError);
}

}  // namespace
