#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "oracles.hpp"
#include "reid/losses.hpp"
#include "reid/schedule.hpp"

using namespace reid;
using testing_util::random_tensor;

namespace {

PairMask mask_of(std::vector<std::pair<std::size_t, std::size_t>> pairs, std::size_t batch) {
  PairMask m;
  m.pairs = std::move(pairs);
  m.batch_size = batch;
  return m;
}

double loss_of(const Tensor& f, const PairMask& m, const CovLossConfig& cfg) {
  return covariance_loss({&f}, m, cfg).value;
}

}  // namespace

// ---------------------------------------------------------------- embed

TEST(Embed, ConstantMapGivesConstant) {
  Tensor f({2, 3, 4, 5}, 3.0);
  const Tensor e = embed(f);
  EXPECT_EQ(e.shape(), (Shape{2, 3, 1}));
  for (double v : e.values()) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(Embed, HandMeanPerChannel) {
  Tensor f({2, 2, 1, 2}, std::vector<double>{1, 3, 5, 7, 0, 0, 0, 0});
  const Tensor e = embed(f);
  EXPECT_DOUBLE_EQ(e[0], 2.0);
  EXPECT_DOUBLE_EQ(e[1], 6.0);
}

TEST(Embed, ZerosGiveZeros) {
  const Tensor e = embed(Tensor({3, 4, 2, 2}));
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(Embed, RejectsNonFinite) {
  Tensor f({1, 1, 1, 2});
  f[1] = std::nan("");
  try {
    embed(f);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::non_finite_input);
  }
}

// ---------------------------------------------------------------- cov_scalar

TEST(CovScalar, MatchesOuterProductSum) {
  const std::vector<double> e{1.0, 2.0};
  EXPECT_DOUBLE_EQ(oracle::outer_sum(e), 9.0);
  EXPECT_DOUBLE_EQ(cov_scalar(e), 9.0);
}

TEST(CovScalar, ZeroAndCancellation) {
  EXPECT_EQ(cov_scalar(std::vector<double>{0.0, 0.0, 0.0}), 0.0);
  EXPECT_EQ(cov_scalar(std::vector<double>{-1.0, 1.0}), 0.0);
}

TEST(CovScalar, RandomVectorsAgreeWithOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(-2, 2);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> e(1 + static_cast<std::size_t>(t % 16));
    for (double& v : e) v = d(rng);
    const double want = oracle::outer_sum(e);
    EXPECT_NEAR(cov_scalar(e), want, 1e-9 * std::max(1.0, std::fabs(want)));
  }
}

// ---------------------------------------------------------------- covariance_loss

// Samples with channel sums 3, 1, 2, 0 give P = (9, 1) and N = (4, 0).
TEST(CovarianceLoss, HandExample) {
  Tensor f({4, 2, 1, 1}, std::vector<double>{1, 2, 0.5, 0.5, 2, 0, 0, 0});
  const PairMask m = mask_of({{0, 2}, {1, 3}}, 4);
  CovLossConfig cfg{1.0, 0.5, 0.0, CovTap::block2_active_head};
  EXPECT_DOUBLE_EQ(oracle::covariance_loss(f, m.pairs, 1.0, 0.5, 0.0), -2.0);
  EXPECT_DOUBLE_EQ(loss_of(f, m, cfg), -2.0);
}

TEST(CovarianceLoss, IdenticalPositivesAndNegativesGiveZero) {
  std::mt19937_64 rng(3);
  Tensor f = random_tensor({6, 4, 2, 2}, rng);
  for (std::size_t n = 1; n < 3; ++n)
    std::copy(f.sample(0).begin(), f.sample(0).end(), f.sample(n).begin());
  for (std::size_t n = 4; n < 6; ++n)
    std::copy(f.sample(3).begin(), f.sample(3).end(), f.sample(n).begin());
  const PairMask m = mask_of({{0, 3}, {1, 4}, {2, 5}}, 6);
  EXPECT_EQ(loss_of(f, m, {1.0, 1.0, 0.0}), 0.0);
}

TEST(CovarianceLoss, DefaultsScaleSByOneBillionth) {
  Tensor f({4, 2, 1, 1}, std::vector<double>{1, 2, 0.5, 0.5, 2, 0, 0, 0});
  const PairMask m = mask_of({{0, 2}, {1, 3}}, 4);
  const CovLossConfig defaults;
  EXPECT_EQ(defaults.lambda, 1.0);
  EXPECT_EQ(defaults.alpha, 1e-9);
  EXPECT_EQ(defaults.beta, 0.0);
  EXPECT_NEAR(loss_of(f, m, defaults), 1e-9 * -4.0, 1e-24);
}

TEST(CovarianceLoss, SumsOverTaps) {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor({4, 3, 2, 2}, rng), b = random_tensor({4, 5, 1, 3}, rng);
  const PairMask m = mask_of({{0, 2}, {1, 3}, {2, 0}}, 4);
  const CovLossConfig cfg{0.7, 0.3, 0.1};
  const LossValue both = covariance_loss({&a, &b}, m, cfg);
  EXPECT_NEAR(both.value, loss_of(a, m, cfg) + loss_of(b, m, cfg), 1e-12);
  ASSERT_EQ(both.grads.size(), 2u);
  EXPECT_EQ(both.grads[1].shape(), b.shape());
}

TEST(CovarianceLoss, Errors) {
  Tensor f({4, 2, 1, 1}, 1.0);
  const CovLossConfig cfg;
  auto kind_of = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::io_error;
  };
  EXPECT_EQ(kind_of([&] { loss_of(f, mask_of({{0, 1}}, 4), cfg); }), ErrorKind::mask_too_small);
  EXPECT_EQ(kind_of([&] { covariance_loss({}, mask_of({{0, 1}, {2, 3}}, 4), cfg); }), ErrorKind::tap_unavailable);
  EXPECT_EQ(kind_of([&] { covariance_loss({nullptr}, mask_of({{0, 1}, {2, 3}}, 4), cfg); }),
            ErrorKind::tap_unavailable);
  EXPECT_EQ(kind_of([&] { loss_of(f, mask_of({{0, 1}, {2, 3}}, 8), cfg); }), ErrorKind::dim_mismatch);
  EXPECT_EQ(kind_of([&] { loss_of(f, mask_of({{0, 1}, {2, 9}}, 4), cfg); }), ErrorKind::dim_mismatch);
}

TEST(CovarianceLoss, AgreesWithOracleOnRandomInstances) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 40; ++t) {
    const std::size_t b = 2 + rng() % 7, c = 1 + rng() % 16, h = 1 + rng() % 4, w = 1 + rng() % 4;
    const Tensor f = random_tensor({b, c, h, w}, rng);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < 2 + rng() % 6; ++i) pairs.emplace_back(rng() % b, rng() % b);
    const CovLossConfig cfg{0.5 + (rng() % 100) / 50.0, 0.01 + (rng() % 100) / 100.0, (rng() % 10) / 10.0};
    const double want = oracle::covariance_loss(f, pairs, cfg.lambda, cfg.alpha, cfg.beta);
    EXPECT_NEAR(loss_of(f, mask_of(pairs, b), cfg), want, 1e-9 * std::max(1.0, std::fabs(want)));
  }
}

TEST(CovarianceLoss, AntisymmetricUnderSwappingPositivesAndNegatives) {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 20; ++t) {
    const Tensor f = random_tensor({6, 4, 2, 2}, rng);
    std::vector<std::pair<std::size_t, std::size_t>> pairs, swapped;
    for (int i = 0; i < 4; ++i) {
      pairs.emplace_back(rng() % 6, rng() % 6);
      swapped.emplace_back(pairs.back().second, pairs.back().first);
    }
    const CovLossConfig cfg{1.0, 0.2, 0.0};
    EXPECT_NEAR(loss_of(f, mask_of(swapped, 6), cfg), -loss_of(f, mask_of(pairs, 6), cfg), 1e-12);
  }
}

TEST(CovarianceLoss, HomogeneousInLambda) {
  std::mt19937_64 rng(29);
  const Tensor f = random_tensor({4, 3, 2, 2}, rng);
  const PairMask m = mask_of({{0, 2}, {1, 3}, {3, 0}}, 4);
  const double base = loss_of(f, m, {1.0, 0.3, 0.2});
  for (double c : {0.0, 0.5, 2.0, 8.0}) EXPECT_EQ(loss_of(f, m, {c, 0.3, 0.2}), c * base);
}

TEST(CovarianceLoss, IgnoresSamplesOutsideTheMask) {
  std::mt19937_64 rng(31);
  Tensor f = random_tensor({6, 3, 2, 2}, rng);
  const PairMask m = mask_of({{0, 2}, {1, 3}}, 6);
  const CovLossConfig cfg{1.0, 0.5, 0.0};
  const double before = loss_of(f, m, cfg);
  std::vector<double> s4(f.sample(4).begin(), f.sample(4).end());
  std::copy(f.sample(5).begin(), f.sample(5).end(), f.sample(4).begin());
  std::copy(s4.begin(), s4.end(), f.sample(5).begin());
  EXPECT_EQ(loss_of(f, m, cfg), before);
  const LossValue v = covariance_loss({&f}, m, cfg);
  for (double g : v.grads[0].sample(4)) EXPECT_EQ(g, 0.0);
}

TEST(CovarianceLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(37);
  for (int t = 0; t < 10; ++t) {
    const std::size_t b = 2 + rng() % 6, c = 1 + rng() % 8;
    const Tensor f = random_tensor({b, c, 1 + rng() % 3, 1 + rng() % 3}, rng);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (int i = 0; i < 4; ++i) pairs.emplace_back(rng() % b, rng() % b);
    const PairMask m = mask_of(pairs, b);
    const CovLossConfig cfg{1.0, 0.5, 0.1};
    const Tensor numeric = oracle::numeric_gradient([&](const Tensor& x) { return loss_of(x, m, cfg); }, f);
    EXPECT_LT(oracle::gradient_error(covariance_loss({&f}, m, cfg).grads[0], numeric), 1e-4);
  }
}

// ---------------------------------------------------------------- cross_entropy

TEST(CrossEntropy, UniformLogits) {
  const std::vector<int> labels{2, 0};
  EXPECT_NEAR(cross_entropy(Tensor({2, 4}, 0.7), labels).value, std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectTendsToZero) {
  const std::vector<int> labels{1};
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 10.0, 20.0}) {
    const double v = cross_entropy(Tensor({1, 3}, std::vector<double>{0.0, margin, 0.0}), labels).value;
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_LT(prev, 1e-8);
  EXPECT_EQ(cross_entropy(Tensor({1, 3}, std::vector<double>{0.0, 1000.0, 0.0}), labels).value, 0.0);
}

TEST(CrossEntropy, HandExample) {
  const Tensor logits({1, 3}, std::vector<double>{1, 2, 3});
  const std::vector<int> labels{2};
  EXPECT_NEAR(oracle::cross_entropy(logits, labels), 0.40761, 5e-6);
  EXPECT_NEAR(cross_entropy(logits, labels).value, oracle::cross_entropy(logits, labels), 1e-12);
}

TEST(CrossEntropy, StableForHugeLogits) {
  const std::vector<int> labels{0};
  const double v = cross_entropy(Tensor({1, 2}, std::vector<double>{1000.0, 999.0}), labels).value;
  EXPECT_NEAR(v, std::log1p(std::exp(-1.0)), 1e-12);
}

TEST(CrossEntropy, LabelOutOfRange) {
  for (int bad : {-1, 3}) {
    const std::vector<int> labels{bad};
    try {
      cross_entropy(Tensor({1, 3}), labels);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::label_out_of_range);
    }
  }
}

TEST(CrossEntropy, RandomAgreesWithOracleAndIsNonNegative) {
  std::mt19937_64 rng(41);
  for (int t = 0; t < 30; ++t) {
    const std::size_t b = 1 + rng() % 8, k = 2 + rng() % 9;
    const Tensor logits = random_tensor({b, k}, rng, -5, 5);
    std::vector<int> labels(b);
    for (int& l : labels) l = static_cast<int>(rng() % k);
    const double v = cross_entropy(logits, labels).value;
    EXPECT_GE(v, 0.0);
    EXPECT_NEAR(v, oracle::cross_entropy(logits, labels), 1e-12);
  }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(43);
  for (int t = 0; t < 10; ++t) {
    const std::size_t b = 1 + rng() % 6, k = 2 + rng() % 6;
    const Tensor logits = random_tensor({b, k}, rng, -3, 3);
    std::vector<int> labels(b);
    for (int& l : labels) l = static_cast<int>(rng() % k);
    const Tensor numeric =
        oracle::numeric_gradient([&](const Tensor& x) { return cross_entropy(x, labels).value; }, logits);
    EXPECT_LT(oracle::relative_error(cross_entropy(logits, labels).grads[0], numeric), 1e-4);
  }
}

// ---------------------------------------------------------------- total_loss

TEST(TotalLoss, Examples) {
  EXPECT_EQ(total_loss(1.0, 0.0), 1.0);
  EXPECT_NEAR(total_loss(1.3863, -2.0), -0.6137, 1e-12);
  EXPECT_THROW(total_loss(std::nan(""), 0.0), Error);
  EXPECT_THROW(total_loss(1.0, INFINITY), Error);
}

// ---------------------------------------------------------------- clr

TEST(Clr, Examples) {
  const ClrConfig cfg{0.001, 0.006, 4};
  EXPECT_EQ(clr_lr(0, cfg), 0.001);
  EXPECT_EQ(clr_lr(4, cfg), 0.006);
  EXPECT_NEAR(oracle::clr(2, 0.001, 0.006, 4), 0.0035, 1e-15);
  EXPECT_NEAR(clr_lr(2, cfg), 0.0035, 1e-15);
}

TEST(Clr, MatchesTextbookFormula) {
  std::mt19937_64 rng(47);
  for (int t = 0; t < 20; ++t) {
    const ClrConfig cfg{1e-4 * (1 + rng() % 50), 0.01 + 1e-3 * (rng() % 50), 1 + rng() % 40};
    for (std::uint64_t it = 0; it < 8 * cfg.step_size; ++it)
      EXPECT_NEAR(clr_lr(it, cfg), oracle::clr(static_cast<double>(it), cfg.base_lr, cfg.max_lr,
                                                static_cast<double>(cfg.step_size)),
                  1e-15);
  }
}

TEST(Clr, PeriodicBoundedSymmetric) {
  std::mt19937_64 rng(53);
  for (int t = 0; t < 10; ++t) {
    const ClrConfig cfg{1e-3 * (1 + rng() % 9), 0.02 + 1e-3 * (rng() % 30), 1 + rng() % 25};
    const std::uint64_t s = cfg.step_size;
    for (std::uint64_t it = 0; it < 8 * s; ++it) {
      EXPECT_EQ(clr_lr(it + 2 * s, cfg), clr_lr(it, cfg));
      EXPECT_GE(clr_lr(it, cfg), cfg.base_lr);
      EXPECT_LE(clr_lr(it, cfg), cfg.max_lr);
    }
    for (std::uint64_t k = 0; k <= s; ++k) EXPECT_EQ(clr_lr(s - k, cfg), clr_lr(s + k, cfg));
  }
}

TEST(Clr, ConfigValidation) {
  EXPECT_THROW((ClrConfig{0.0, 1.0, 1}.validate()), Error);
  EXPECT_THROW((ClrConfig{0.1, 0.1, 1}.validate()), Error);
  EXPECT_THROW((ClrConfig{0.1, 0.2, 0}.validate()), Error);
  EXPECT_NO_THROW((ClrConfig{0.1, 0.2, 1}.validate()));
}

// ---------------------------------------------------------------- optimizers

namespace {

struct OneParam {
  Tensor w{{3}, std::vector<double>{1.0, -2.0, 0.5}};
  Tensor g{{3}, std::vector<double>{0.5, 0.25, -1.0}};
  std::vector<ParamRef> refs() { return {{"w", &w, &g, 1.0}}; }
};

}  // namespace

TEST(Optimizer, SgdClrTraceIsSymmetricTriangle) {
  OneParam p;
  OptimizerConfig cfg;
  cfg.clr = {0.001, 0.006, 5};
  auto opt = make_optimizer(p.refs(), cfg);
  std::vector<double> trace;
  for (int i = 0; i <= 10; ++i) trace.push_back(opt->step());
  EXPECT_EQ(trace.front(), 0.001);
  EXPECT_EQ(trace[5], 0.006);
  EXPECT_EQ(trace.back(), 0.001);
  for (std::size_t k = 0; k <= 5; ++k) EXPECT_EQ(trace[5 - k], trace[5 + k]);
}

TEST(Optimizer, SgdMomentumUpdate) {
  OneParam p;
  OptimizerConfig cfg;
  cfg.clr = {0.1, 0.2, 1};
  cfg.momentum = 0.9;
  auto opt = make_optimizer(p.refs(), cfg);
  opt->step();  // lr 0.1, v = g
  EXPECT_DOUBLE_EQ(p.w[0], 1.0 - 0.1 * 0.5);
  opt->step();  // lr 0.2, v = 0.9 g + g
  EXPECT_DOUBLE_EQ(p.w[0], 1.0 - 0.1 * 0.5 - 0.2 * 1.9 * 0.5);
}

TEST(Optimizer, AdamHasConstantLrAndBiasCorrectedStep) {
  OneParam p;
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::adam;
  cfg.adam_weight_decay = 0.0;
  auto opt = make_optimizer(p.refs(), cfg);
  EXPECT_EQ(opt->step(), 3e-4);
  // First bias-corrected step is lr * g / (|g| + eps).
  EXPECT_NEAR(p.w[0], 1.0 - 3e-4, 1e-10);
  EXPECT_NEAR(p.w[2], 0.5 + 3e-4, 1e-10);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(opt->step(), 3e-4);
}

TEST(Optimizer, RespectsLrScale) {
  OneParam p;
  OptimizerConfig cfg;
  cfg.clr = {0.1, 0.2, 1};
  auto refs = p.refs();
  refs[0].lr_scale = 0.0;
  auto opt = make_optimizer(refs, cfg);
  opt->step();
  EXPECT_EQ(p.w[0], 1.0);
}

TEST(Optimizer, Errors) {
  EXPECT_THROW(make_optimizer({}, OptimizerConfig{}), Error);
  try {
    parse_optimizer_kind("rmsprop");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unknown_kind);
  }
  EXPECT_EQ(parse_optimizer_kind("adam"), OptimizerKind::adam);
}
