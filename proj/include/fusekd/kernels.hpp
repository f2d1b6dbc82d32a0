#pragma once

#include <span>

#include "fusekd/matrix.hpp"

// Dense kernels used by the student network and the diagnostics.
//
// Every kernel exists twice: a plain serial loop nest (`serial::`) and an
// OpenMP version (`parallel::`). Both accumulate each output element in the
// same order, so their results are bit-identical for any thread count. The
// unqualified names forward to the parallel versions.
namespace fkd::kernels {

namespace serial {

// out = a * b (+ bias broadcast over rows when bias is non-empty)
template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, std::span<const T> bias, Matrix<T>& out);
// out = a^T * b, summed over the shared row dimension
template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out);
// out = a * b^T
template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out);
template <typename T>
void column_sums(const Matrix<T>& a, std::span<T> out);
// Pearson correlation between columns; zero-variance columns correlate 0 with others.
Matrix<double> column_correlation(const Matrix<double>& x);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, std::span<const T> bias, Matrix<T>& out);
template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out);
template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out);
template <typename T>
void column_sums(const Matrix<T>& a, std::span<T> out);
Matrix<double> column_correlation(const Matrix<double>& x);

}  // namespace parallel

using parallel::column_correlation;
using parallel::column_sums;
using parallel::gemm_nn;
using parallel::gemm_nt;
using parallel::gemm_tn;

}  // namespace fkd::kernels
