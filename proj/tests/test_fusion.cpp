#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "fusekd/fusion.hpp"

using namespace fkd;

namespace {

using LD = long double;

Matrix<double> mat(std::size_t r, std::size_t c, std::vector<double> v) { return Matrix<double>(r, c, std::move(v)); }

Matrix<double> random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix<double> m(r, c);
  for (auto& v : m.flat()) v = g(rng);
  return m;
}

PromptLogitTensor random_prompts(std::mt19937_64& rng, std::size_t m, std::size_t n, std::size_t k) {
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  PromptLogitTensor p{m, n, k, std::vector<double>(m * n * k)};
  for (auto& v : p.values) v = u(rng);
  return p;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

std::size_t argmax(std::span<const double> r) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < r.size(); ++k)
    if (r[k] > r[best]) best = k;
  return best;
}

}  // namespace

TEST(PromptAverage, SinglePromptIsIdentity) {
  std::mt19937_64 rng(1);
  const auto p = random_prompts(rng, 1, 5, 4);
  EXPECT_EQ(average_prompt_logits(p), p.slice(0));
}

TEST(PromptAverage, TwoPromptExample) {
  PromptLogitTensor p{2, 1, 2, {1, 3, 3, 1}};
  EXPECT_EQ(average_prompt_logits(p), mat(1, 2, {2, 2}));
}

TEST(PromptAverage, MatchesLongDoubleMean) {
  std::mt19937_64 rng(2);
  const auto p = random_prompts(rng, 7, 40, 9);
  const auto avg = average_prompt_logits(p);
  for (std::size_t n = 0; n < 40; ++n)
    for (std::size_t k = 0; k < 9; ++k) {
      LD s = 0;
      for (std::size_t m = 0; m < 7; ++m) s += p(m, n, k);
      EXPECT_LE(rel(avg(n, k), static_cast<double>(s / 7)), 1e-6);
    }
}

TEST(PromptAverage, RejectsEmptyAndInconsistent) {
  EXPECT_THROW(average_prompt_logits(PromptLogitTensor{0, 1, 1, {}}), Error);
  EXPECT_THROW(average_prompt_logits(PromptLogitTensor{2, 1, 2, {1, 2, 3}}), Error);
}

TEST(PromptTensor, CacheRoundTripAndSlices) {
  PromptLogitTensor p{2, 2, 3, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
  const auto t = p.to_cache();
  EXPECT_EQ(t.role, Role::clip_prompt_logits);
  EXPECT_EQ(t.shape, (std::vector<std::uint64_t>{2, 2, 3}));
  const auto back = PromptLogitTensor::from_cache(t);
  EXPECT_EQ(back.values, p.values);
  EXPECT_EQ(p.slice(1), mat(2, 3, {6, 7, 8, 9, 10, 11}));
  EXPECT_THROW(PromptLogitTensor::from_cache(CacheTensor::f32(Role::clip_prompt_logits, {2, 2}, {1, 2, 3, 4})),
               Error);
}

TEST(FuseLogits, BoundaryAlphas) {
  std::mt19937_64 rng(3);
  const auto zt = random_matrix(rng, 6, 5), zc = random_matrix(rng, 6, 5);
  EXPECT_EQ(fuse_logits(zt, zc, 1.0), zt);
  EXPECT_EQ(fuse_logits(zt, zc, 0.0), zc);
}

TEST(FuseLogits, HandExample) {
  const auto f = fuse_logits(mat(1, 3, {2, 0, 0}), mat(1, 3, {0, 2, 0}), 0.7);
  EXPECT_NEAR(f(0, 0), 1.4, 1e-15);
  EXPECT_NEAR(f(0, 1), 0.6, 1e-15);
  EXPECT_EQ(f(0, 2), 0.0);
}

TEST(FuseLogits, Errors) {
  EXPECT_THROW(fuse_logits(Matrix<double>(2, 3), Matrix<double>(2, 4), 0.5), Error);
  try {
    fuse_logits(Matrix<double>(2, 3), Matrix<double>(3, 3), 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  EXPECT_THROW(fuse_logits(Matrix<double>(1, 1), Matrix<double>(1, 1), 1.5), Error);
}

TEST(FuseLogits, StandardizedRowsAreZeroMeanUnitStd) {
  std::mt19937_64 rng(4);
  const auto z = random_matrix(rng, 20, 7, 30.0);
  const auto s = standardize_rows(z);
  for (std::size_t i = 0; i < 20; ++i) {
    LD mean = 0, sq = 0;
    for (double v : s.row(i)) mean += v;
    mean /= 7;
    for (double v : s.row(i)) sq += (v - mean) * (v - mean);
    EXPECT_NEAR(static_cast<double>(mean), 0.0, 1e-12);
    EXPECT_NEAR(static_cast<double>(std::sqrt(sq / 7)), 1.0, 1e-12);
  }
}

TEST(FuseLogits, ZeroVarianceRowOnlyMeanShifted) {
  const auto s = standardize_rows(mat(1, 3, {4, 4, 4}));
  EXPECT_EQ(s, mat(1, 3, {0, 0, 0}));
}

TEST(FuseLogits, StandardizeModeFusesNormalizedInputs) {
  std::mt19937_64 rng(5);
  const auto zt = random_matrix(rng, 4, 6, 3.0), zc = random_matrix(rng, 4, 6, 50.0);
  const auto f = fuse_logits(zt, zc, 0.3, LogitNorm::per_sample_standardize);
  const auto st = standardize_rows(zt), sc = standardize_rows(zc);
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_NEAR(f.flat()[i], 0.3 * st.flat()[i] + 0.7 * sc.flat()[i], 1e-12);
  }
}

TEST(Perturbation, Examples) {
  std::mt19937_64 rng(6);
  const auto zt = random_matrix(rng, 3, 4), zc = random_matrix(rng, 3, 4);
  const auto at_one = perturbation(zt, zc, 1.0);
  for (double v : at_one.flat()) EXPECT_EQ(v, 0.0);
  const auto same = perturbation(zt, zt, 0.4);
  for (double v : same.flat()) EXPECT_EQ(v, 0.0);
  const auto e = perturbation(mat(1, 2, {2, 0}), mat(1, 2, {0, 2}), 0.7);
  EXPECT_NEAR(e(0, 0), -0.6, 1e-15);
  EXPECT_NEAR(e(0, 1), 0.6, 1e-15);
  EXPECT_THROW(perturbation(Matrix<double>(1, 2), Matrix<double>(2, 1), 0.5), Error);
}

TEST(FusionProperties, DecompositionExact) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> a(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto zt = random_matrix(rng, 1, 10, 5.0), zc = random_matrix(rng, 1, 10, 50.0);
    const double alpha = a(rng);
    const auto f = fuse_logits(zt, zc, alpha);
    const auto e = perturbation(zt, zc, alpha);
    for (std::size_t k = 0; k < 10; ++k) ASSERT_NEAR(f(0, k) - zt(0, k) - e(0, k), 0.0, 1e-6);
  }
}

TEST(FusionProperties, ArgmaxPreservedUnderAgreement) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> a(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cls(0, 9);
  int trials = 0;
  while (trials < 10000) {
    auto zt = random_matrix(rng, 1, 10, 3.0), zc = random_matrix(rng, 1, 10, 30.0);
    // Force agreement on a random class.
    const std::size_t c = cls(rng);
    std::swap(zt(0, c), zt(0, argmax(zt.row(0))));
    std::swap(zc(0, c), zc(0, argmax(zc.row(0))));
    if (argmax(zt.row(0)) != c || argmax(zc.row(0)) != c) continue;
    for (double alpha : {0.0, 1.0, a(rng)}) {
      ASSERT_EQ(argmax(fuse_logits(zt, zc, alpha).row(0)), c);
    }
    ++trials;
  }
}

TEST(FusionProperties, FusionCommutesWithPromptAveraging) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> a(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto p = random_prompts(rng, 5, 1, 6);
    const auto zt = random_matrix(rng, 1, 6, 5.0);
    const double alpha = a(rng);
    const auto lhs = fuse_logits(zt, average_prompt_logits(p), alpha);
    Matrix<double> rhs(1, 6, 0.0);
    for (std::size_t m = 0; m < 5; ++m) {
      const auto f = fuse_logits(zt, p.slice(m), alpha);
      for (std::size_t k = 0; k < 6; ++k) rhs(0, k) += f(0, k) / 5.0;
    }
    for (std::size_t k = 0; k < 6; ++k) ASSERT_NEAR(lhs(0, k), rhs(0, k), 1e-6);
  }
}

TEST(FusionProperties, AffineInAlpha) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const auto zt = random_matrix(rng, 2, 5, 4.0), zc = random_matrix(rng, 2, 5, 40.0);
    std::vector<Matrix<double>> grid;
    for (int i = 0; i <= 10; ++i) grid.push_back(fuse_logits(zt, zc, i / 10.0));
    for (std::size_t e = 0; e < zt.size(); ++e) {
      const double d0 = grid[1].flat()[e] - grid[0].flat()[e];
      for (int i = 1; i < 10; ++i) ASSERT_NEAR(grid[i + 1].flat()[e] - grid[i].flat()[e], d0, 1e-6);
    }
  }
}

TEST(Projection, IdentityLeavesFeaturesUnchanged) {
  std::mt19937_64 rng(11);
  const auto f = random_matrix(rng, 5, 4);
  EXPECT_EQ(project_features(f, LinearProjection<double>::identity(4)), f);
}

TEST(Projection, HandExample) {
  LinearProjection<double> p{mat(2, 2, {1, 0, 0, 0}), {0, 0}};
  EXPECT_EQ(project_features(mat(1, 2, {3, 5}), p), mat(1, 2, {3, 0}));
}

TEST(Projection, MatchesLongDoubleProduct) {
  std::mt19937_64 rng(12);
  auto p = LinearProjection<double>::init(17, 9, 3);
  for (auto& b : p.bias) b = std::normal_distribution<double>()(rng);
  const auto f = random_matrix(rng, 30, 17);
  const auto out = project_features(f, p);
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t o = 0; o < 9; ++o) {
      LD s = p.bias[o];
      for (std::size_t d = 0; d < 17; ++d) s += static_cast<LD>(f(i, d)) * p.weight(d, o);
      EXPECT_LE(rel(out(i, o), static_cast<double>(s)), 1e-5);
    }
}

TEST(Projection, FloatAgreesWithDouble) {
  std::mt19937_64 rng(13);
  const auto pd = LinearProjection<double>::init(8, 3, 5);
  const auto pf = LinearProjection<float>::init(8, 3, 5);
  const auto f = random_matrix(rng, 4, 8);
  const auto a = project_features(f, pd);
  const auto b = project_features(f.cast<float>(), pf);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.flat()[i], b.flat()[i], 1e-5);
}

TEST(Projection, InitBoundsAndDeterminism) {
  const auto p = LinearProjection<double>::init(16, 8, 42);
  const double bound = std::sqrt(1.0 / 16.0);
  for (double w : p.weight.flat()) EXPECT_LE(std::abs(w), bound);
  for (double b : p.bias) EXPECT_EQ(b, 0.0);
  EXPECT_EQ(p.weight, LinearProjection<double>::init(16, 8, 42).weight);
  EXPECT_NE(p.weight, LinearProjection<double>::init(16, 8, 43).weight);
}

TEST(Projection, ShapeMismatch) {
  EXPECT_THROW(project_features(Matrix<double>(2, 3), LinearProjection<double>::identity(4)), Error);
}

TEST(FuseFeatures, Examples) {
  std::mt19937_64 rng(14);
  const auto ft = random_matrix(rng, 3, 4), fc = random_matrix(rng, 3, 4);
  EXPECT_EQ(fuse_features(ft, fc, 1.0), ft);
  EXPECT_EQ(fuse_features(ft, fc, 0.0), fc);
  EXPECT_EQ(fuse_features(mat(1, 2, {2, 2}), mat(1, 2, {0, 4}), 0.5), mat(1, 2, {1, 3}));
  EXPECT_THROW(fuse_features(Matrix<double>(1, 2), Matrix<double>(1, 3), 0.5), Error);
  EXPECT_THROW(fuse_features(ft, fc, -0.1), Error);
}

TEST(FusionConfig, DefaultsAndValidation) {
  FusionConfig c;
  EXPECT_DOUBLE_EQ(c.alpha, 0.7);
  EXPECT_DOUBLE_EQ(c.lambda, 0.7);
  EXPECT_DOUBLE_EQ(c.beta, 3.0);
  EXPECT_DOUBLE_EQ(c.gamma, 0.8);
  EXPECT_DOUBLE_EQ(c.t_temp, 3.0);
  EXPECT_DOUBLE_EQ(c.certainty_threshold, 0.5);
  EXPECT_EQ(c.logit_norm, LogitNorm::raw);
  EXPECT_NO_THROW(c.validate());
  using Mutator = void (*)(FusionConfig&);
  for (Mutator bad : {+[](FusionConfig& f) { f.alpha = 1.1; }, +[](FusionConfig& f) { f.lambda = -0.1; },
                   +[](FusionConfig& f) { f.beta = -1; }, +[](FusionConfig& f) { f.gamma = -1; },
                   +[](FusionConfig& f) { f.t_temp = 0; }, +[](FusionConfig& f) { f.certainty_threshold = 0; },
                   +[](FusionConfig& f) { f.certainty_threshold = 1.5; }}) {
    FusionConfig f;
    bad(f);
    EXPECT_THROW(f.validate(), Error);
  }
  FusionConfig edge;
  edge.certainty_threshold = 1.0;
  EXPECT_NO_THROW(edge.validate());
}

TEST(FusionConfig, NormNames) {
  EXPECT_EQ(logit_norm_from_string("raw"), LogitNorm::raw);
  EXPECT_EQ(logit_norm_from_string("per_sample_standardize"), LogitNorm::per_sample_standardize);
  EXPECT_EQ(to_string(LogitNorm::per_sample_standardize), "per_sample_standardize");
  EXPECT_THROW(logit_norm_from_string("zscore"), Error);
}
