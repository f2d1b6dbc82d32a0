#include "fusekd/kernels.hpp"

#include <cmath>

namespace fkd::kernels {

namespace {

template <typename T>
void check_nn(const Matrix<T>& a, const Matrix<T>& b, std::span<const T> bias, Matrix<T>& out) {
  if (a.cols() != b.rows()) require_same_shape(a.cols(), 0, b.rows(), 0, "gemm_nn inner dimension");
  if (!bias.empty() && bias.size() != b.cols())
    require_same_shape(bias.size(), 1, b.cols(), 1, "gemm_nn bias");
  if (out.rows() != a.rows() || out.cols() != b.cols()) out = Matrix<T>(a.rows(), b.cols());
}

template <typename T>
void check_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.rows() != b.rows()) require_same_shape(a.rows(), 0, b.rows(), 0, "gemm_tn shared rows");
  if (out.rows() != a.cols() || out.cols() != b.cols()) out = Matrix<T>(a.cols(), b.cols());
}

template <typename T>
void check_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.cols() != b.cols()) require_same_shape(a.cols(), 0, b.cols(), 0, "gemm_nt shared cols");
  if (out.rows() != a.rows() || out.cols() != b.rows()) out = Matrix<T>(a.rows(), b.rows());
}

// Row i of a*b (+bias). Accumulation order over the inner index is ascending.
template <typename T>
inline void nn_row(const Matrix<T>& a, const Matrix<T>& b, std::span<const T> bias, Matrix<T>& out,
                   std::size_t i) {
  T* c = out.row(i).data();
  const std::size_t n = b.cols();
  for (std::size_t j = 0; j < n; ++j) c[j] = bias.empty() ? T{0} : bias[j];
  const T* ar = a.row(i).data();
  for (std::size_t p = 0; p < a.cols(); ++p) {
    const T av = ar[p];
    const T* br = b.row(p).data();
    for (std::size_t j = 0; j < n; ++j) c[j] += av * br[j];
  }
}

template <typename T>
inline void tn_row(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, std::size_t p) {
  T* c = out.row(p).data();
  const std::size_t n = b.cols();
  for (std::size_t j = 0; j < n; ++j) c[j] = T{0};
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T av = a(i, p);
    const T* br = b.row(i).data();
    for (std::size_t j = 0; j < n; ++j) c[j] += av * br[j];
  }
}

template <typename T>
inline void nt_row(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, std::size_t i) {
  const T* ar = a.row(i).data();
  for (std::size_t p = 0; p < b.rows(); ++p) {
    const T* br = b.row(p).data();
    T acc{0};
    for (std::size_t j = 0; j < a.cols(); ++j) acc += ar[j] * br[j];
    out(i, p) = acc;
  }
}

struct ColumnMoments {
  std::vector<double> mean;
  std::vector<double> norm;  // sqrt of centered sum of squares
};

ColumnMoments column_moments(const Matrix<double>& x) {
  const std::size_t n = x.rows(), k = x.cols();
  ColumnMoments m{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) m.mean[c] += x(i, c);
  for (auto& v : m.mean) v /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      const double d = x(i, c) - m.mean[c];
      m.norm[c] += d * d;
    }
  for (auto& v : m.norm) v = std::sqrt(v);
  return m;
}

inline double pair_correlation(const Matrix<double>& x, const ColumnMoments& m, std::size_t a,
                               std::size_t b) {
  if (a == b) return 1.0;
  if (m.norm[a] == 0.0 || m.norm[b] == 0.0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) s += (x(i, a) - m.mean[a]) * (x(i, b) - m.mean[b]);
  const double r = s / (m.norm[a] * m.norm[b]);
  return r > 1.0 ? 1.0 : (r < -1.0 ? -1.0 : r);
}

}  // namespace

namespace serial {

template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, std::span<const T> bias, Matrix<T>& out) {
  check_nn(a, b, bias, out);
  for (std::size_t i = 0; i < a.rows(); ++i) nn_row(a, b, bias, out, i);
}

template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  check_tn(a, b, out);
  for (std::size_t p = 0; p < a.cols(); ++p) tn_row(a, b, out, p);
}

template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  check_nt(a, b, out);
  for (std::size_t i = 0; i < a.rows(); ++i) nt_row(a, b, out, i);
}

template <typename T>
void column_sums(const Matrix<T>& a, std::span<T> out) {
  require_same_shape(out.size(), 1, a.cols(), 1, "column_sums output");
  for (std::size_t j = 0; j < a.cols(); ++j) {
    T acc{0};
    for (std::size_t i = 0; i < a.rows(); ++i) acc += a(i, j);
    out[j] = acc;
  }
}

Matrix<double> column_correlation(const Matrix<double>& x) {
  const auto m = column_moments(x);
  Matrix<double> r(x.cols(), x.cols());
  for (std::size_t a = 0; a < x.cols(); ++a)
    for (std::size_t b = a; b < x.cols(); ++b) r(a, b) = r(b, a) = pair_correlation(x, m, a, b);
  return r;
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, std::span<const T> bias, Matrix<T>& out) {
  check_nn(a, b, bias, out);
  const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) nn_row(a, b, bias, out, static_cast<std::size_t>(i));
}

template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  check_tn(a, b, out);
  const auto rows = static_cast<std::ptrdiff_t>(a.cols());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t p = 0; p < rows; ++p) tn_row(a, b, out, static_cast<std::size_t>(p));
}

template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  check_nt(a, b, out);
  const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) nt_row(a, b, out, static_cast<std::size_t>(i));
}

template <typename T>
void column_sums(const Matrix<T>& a, std::span<T> out) {
  require_same_shape(out.size(), 1, a.cols(), 1, "column_sums output");
  const auto cols = static_cast<std::ptrdiff_t>(a.cols());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < cols; ++j) {
    T acc{0};
    for (std::size_t i = 0; i < a.rows(); ++i) acc += a(i, static_cast<std::size_t>(j));
    out[static_cast<std::size_t>(j)] = acc;
  }
}

Matrix<double> column_correlation(const Matrix<double>& x) {
  const auto m = column_moments(x);
  const std::size_t k = x.cols();
  Matrix<double> r(k, k);
  const auto pairs = static_cast<std::ptrdiff_t>(k * k);
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t t = 0; t < pairs; ++t) {
    const std::size_t a = static_cast<std::size_t>(t) / k, b = static_cast<std::size_t>(t) % k;
    if (b < a) continue;
    const double v = pair_correlation(x, m, a, b);
    r(a, b) = v;
    r(b, a) = v;
  }
  return r;
}

}  // namespace parallel

#define FKD_INSTANTIATE(T)                                                                      \
  template void serial::gemm_nn<T>(const Matrix<T>&, const Matrix<T>&, std::span<const T>,      \
                                   Matrix<T>&);                                                 \
  template void serial::gemm_tn<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);             \
  template void serial::gemm_nt<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);             \
  template void serial::column_sums<T>(const Matrix<T>&, std::span<T>);                         \
  template void parallel::gemm_nn<T>(const Matrix<T>&, const Matrix<T>&, std::span<const T>,    \
                                     Matrix<T>&);                                               \
  template void parallel::gemm_tn<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);           \
  template void parallel::gemm_nt<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);           \
  template void parallel::column_sums<T>(const Matrix<T>&, std::span<T>);

FKD_INSTANTIATE(float)
FKD_INSTANTIATE(double)
#undef FKD_INSTANTIATE

}  // namespace fkd::kernels
