#include <gtest/gtest.h>

#include <omp.h>

#include <cmath>
#include <random>

#include "fusekd/kernels.hpp"

using namespace fkd;
namespace k = fkd::kernels;

namespace {

template <typename T>
Matrix<T> random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix<T> m(r, c);
  for (auto& v : m.flat()) v = static_cast<T>(u(rng));
  return m;
}

using LD = long double;

}  // namespace

template <typename T>
class KernelTest : public ::testing::Test {};
using Types = ::testing::Types<float, double>;
TYPED_TEST_SUITE(KernelTest, Types);

TYPED_TEST(KernelTest, GemmMatchesReference) {
  using T = TypeParam;
  std::mt19937_64 rng(1);
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-12;
  for (auto [n, d, m] : {std::tuple{1, 1, 1}, std::tuple{7, 13, 5}, std::tuple{33, 64, 17}}) {
    const auto a = random_matrix<T>(rng, n, d), b = random_matrix<T>(rng, d, m);
    const auto bias = random_matrix<T>(rng, 1, m);
    Matrix<T> out;
    k::gemm_nn(a, b, bias.row(0), out);
    ASSERT_EQ(out.rows(), static_cast<std::size_t>(n));
    ASSERT_EQ(out.cols(), static_cast<std::size_t>(m));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        LD s = bias(0, j);
        for (int p = 0; p < d; ++p) s += static_cast<LD>(a(i, p)) * b(p, j);
        EXPECT_NEAR(out(i, j), static_cast<double>(s), tol * d);
      }
    const auto c = random_matrix<T>(rng, n, m);
    k::gemm_tn(a, c, out);
    for (int p = 0; p < d; ++p)
      for (int j = 0; j < m; ++j) {
        LD s = 0;
        for (int i = 0; i < n; ++i) s += static_cast<LD>(a(i, p)) * c(i, j);
        EXPECT_NEAR(out(p, j), static_cast<double>(s), tol * n);
      }
    k::gemm_nt(c, b, out);
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < d; ++p) {
        LD s = 0;
        for (int j = 0; j < m; ++j) s += static_cast<LD>(c(i, j)) * b(p, j);
        EXPECT_NEAR(out(i, p), static_cast<double>(s), tol * m);
      }
    std::vector<T> sums(m);
    k::column_sums(c, std::span<T>(sums));
    for (int j = 0; j < m; ++j) {
      LD s = 0;
      for (int i = 0; i < n; ++i) s += c(i, j);
      EXPECT_NEAR(sums[j], static_cast<double>(s), tol * n);
    }
  }
}

TYPED_TEST(KernelTest, ParallelBitIdenticalToSerial) {
  using T = TypeParam;
  std::mt19937_64 rng(2);
  const auto a = random_matrix<T>(rng, 97, 41), b = random_matrix<T>(rng, 41, 23), c = random_matrix<T>(rng, 97, 23);
  const auto bias = random_matrix<T>(rng, 1, 23);
  for (int threads : {1, 2, 3, 8}) {
    omp_set_num_threads(threads);
    Matrix<T> s, p;
    k::serial::gemm_nn(a, b, bias.row(0), s);
    k::parallel::gemm_nn(a, b, bias.row(0), p);
    EXPECT_EQ(s, p);
    k::serial::gemm_tn(a, c, s);
    k::parallel::gemm_tn(a, c, p);
    EXPECT_EQ(s, p);
    k::serial::gemm_nt(c, b, s);
    k::parallel::gemm_nt(c, b, p);
    EXPECT_EQ(s, p);
    std::vector<T> cs(23), cp(23);
    k::serial::column_sums(c, std::span<T>(cs));
    k::parallel::column_sums(c, std::span<T>(cp));
    EXPECT_EQ(cs, cp);
  }
  const auto x = random_matrix<double>(rng, 300, 12);
  for (int threads : {1, 4}) {
    omp_set_num_threads(threads);
    EXPECT_EQ(k::serial::column_correlation(x), k::parallel::column_correlation(x));
  }
}

TEST(Kernels, EmptyBiasMeansNoBias) {
  Matrix<double> a(1, 2, std::vector<double>{1.0, 2.0}), b(2, 1, std::vector<double>{3.0, 4.0}), out;
  k::gemm_nn(a, b, std::span<const double>{}, out);
  EXPECT_EQ(out(0, 0), 11.0);
}

TEST(Kernels, ShapeMismatchThrows) {
  Matrix<double> a(2, 3), b(4, 2), out;
  try {
    k::gemm_nn(a, b, std::span<const double>{}, out);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
  EXPECT_THROW(k::gemm_tn(a, b, out), Error);
  EXPECT_THROW(k::gemm_nt(a, b, out), Error);
}

TEST(Kernels, CorrelationMatchesReference) {
  std::mt19937_64 rng(4);
  const auto x = random_matrix<double>(rng, 500, 10);
  const auto r = k::column_correlation(x);
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = 0; b < 10; ++b) {
      LD ma = 0, mb = 0;
      for (std::size_t i = 0; i < 500; ++i) {
        ma += x(i, a);
        mb += x(i, b);
      }
      ma /= 500;
      mb /= 500;
      LD sab = 0, saa = 0, sbb = 0;
      for (std::size_t i = 0; i < 500; ++i) {
        sab += (x(i, a) - ma) * (x(i, b) - mb);
        saa += (x(i, a) - ma) * (x(i, a) - ma);
        sbb += (x(i, b) - mb) * (x(i, b) - mb);
      }
      EXPECT_NEAR(r(a, b), static_cast<double>(sab / std::sqrt(saa * sbb)), 1e-6);
    }
}

TEST(Kernels, CorrelationZeroVarianceColumn) {
  Matrix<double> x(4, 2, std::vector<double>{1, 5, 2, 5, 3, 5, 4, 5});
  const auto r = k::column_correlation(x);
  EXPECT_EQ(r(0, 1), 0.0);
  EXPECT_EQ(r(1, 0), 0.0);
  EXPECT_EQ(r(1, 1), 1.0);
  EXPECT_EQ(r(0, 0), 1.0);
}
