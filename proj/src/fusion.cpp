#include "fusekd/fusion.hpp"

#include <cmath>
#include <random>

#include "fusekd/kernels.hpp"

namespace fkd {

Matrix<double> PromptLogitTensor::slice(std::size_t m) const {
  Matrix<double> out(samples, classes);
  std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(m * samples * classes), samples * classes,
              out.data());
  return out;
}

PromptLogitTensor PromptLogitTensor::from_cache(const CacheTensor& t) {
  if (t.rank() != 3) throw Error(ErrorCode::ShapeMismatch, "prompt logits must be M×N×K");
  PromptLogitTensor p{t.shape[0], t.shape[1], t.shape[2], {}};
  const auto& v = t.floats();
  p.values.assign(v.begin(), v.end());
  return p;
}

CacheTensor PromptLogitTensor::to_cache() const {
  std::vector<float> v(values.begin(), values.end());
  return CacheTensor::f32(Role::clip_prompt_logits, {prompts, samples, classes}, std::move(v));
}

std::string_view to_string(LogitNorm norm) {
  return norm == LogitNorm::raw ? "raw" : "per_sample_standardize";
}

LogitNorm logit_norm_from_string(const std::string& s) {
  if (s == "raw") return LogitNorm::raw;
  if (s == "per_sample_standardize") return LogitNorm::per_sample_standardize;
  throw Error(ErrorCode::ParseError, "logit_norm must be raw or per_sample_standardize, got '" + s + "'");
}

void FusionConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvariantViolation, what); };
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must lie in [0,1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0,1]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) fail("beta must be >= 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail("gamma must be >= 0");
  if (!(t_temp > 0.0) || !std::isfinite(t_temp)) fail("t_temp must be > 0");
  if (!(certainty_threshold > 0.0 && certainty_threshold <= 1.0)) {
    fail("certainty_threshold must lie in (0,1]");
  }
}

Matrix<double> average_prompt_logits(const PromptLogitTensor& p) {
  if (p.prompts == 0) throw Error(ErrorCode::InvariantViolation, "prompt tensor has M = 0");
  if (p.values.size() != p.prompts * p.samples * p.classes) {
    throw Error(ErrorCode::ShapeMismatch, "prompt tensor payload does not match M×N×K");
  }
  Matrix<double> out(p.samples, p.classes);
  const double inv = 1.0 / static_cast<double>(p.prompts);
  const auto n = static_cast<std::ptrdiff_t>(p.samples);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto row = static_cast<std::size_t>(i);
    for (std::size_t k = 0; k < p.classes; ++k) {
      double s = 0.0;
      for (std::size_t m = 0; m < p.prompts; ++m) s += p(m, row, k);
      out(row, k) = s * inv;
    }
  }
  return out;
}

Matrix<double> standardize_rows(const Matrix<double>& z) {
  Matrix<double> out(z.rows(), z.cols());
  const auto n = static_cast<std::ptrdiff_t>(z.rows());
  const double k = static_cast<double>(z.cols());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    auto src = z.row(static_cast<std::size_t>(i));
    auto dst = out.row(static_cast<std::size_t>(i));
    double mean = 0.0;
    for (double v : src) mean += v;
    mean /= k;
    double ss = 0.0;
    for (double v : src) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / k);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] = sd > 0.0 ? (src[c] - mean) / sd : src[c] - mean;
  }
  return out;
}

Matrix<double> fuse_logits(const Matrix<double>& z_t, const Matrix<double>& z_c, double alpha,
                           LogitNorm norm) {
  require_same_shape(z_t, z_c, "fuse_logits");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvariantViolation, "alpha outside [0,1]");
  if (norm == LogitNorm::per_sample_standardize) {
    return fuse_logits(standardize_rows(z_t), standardize_rows(z_c), alpha, LogitNorm::raw);
  }
  Matrix<double> out(z_t.rows(), z_t.cols());
  const auto a = z_t.flat(), c = z_c.flat();
  auto o = out.flat();
  const auto len = static_cast<std::ptrdiff_t>(o.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < len; ++i) o[i] = alpha * a[i] + (1.0 - alpha) * c[i];
  return out;
}

Matrix<double> perturbation(const Matrix<double>& z_t, const Matrix<double>& z_c, double alpha) {
  require_same_shape(z_t, z_c, "perturbation");
  Matrix<double> out(z_t.rows(), z_t.cols());
  const auto a = z_t.flat(), c = z_c.flat();
  auto o = out.flat();
  const auto len = static_cast<std::ptrdiff_t>(o.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < len; ++i) o[i] = (1.0 - alpha) * (c[i] - a[i]);
  return out;
}

template <typename T>
LinearProjection<T> LinearProjection<T>::init(std::size_t in_dim, std::size_t out_dim,
                                              std::uint64_t seed) {
  if (in_dim == 0 || out_dim == 0) throw Error(ErrorCode::InvalidArchitecture, "empty projection");
  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(1.0 / static_cast<double>(in_dim));
  std::uniform_real_distribution<double> u(-bound, bound);
  LinearProjection p{Matrix<T>(in_dim, out_dim), std::vector<T>(out_dim, T{0})};
  for (auto& w : p.weight.flat()) w = static_cast<T>(u(rng));
  return p;
}

template <typename T>
LinearProjection<T> LinearProjection<T>::identity(std::size_t dim) {
  LinearProjection p{Matrix<T>(dim, dim), std::vector<T>(dim, T{0})};
  for (std::size_t i = 0; i < dim; ++i) p.weight(i, i) = T{1};
  return p;
}

template <typename T>
Matrix<T> project_features(const Matrix<T>& f, const LinearProjection<T>& proj) {
  if (f.cols() != proj.in_dim()) {
    require_same_shape(f.cols(), 1, proj.in_dim(), 1, "project_features input dimension");
  }
  if (proj.bias.size() != proj.out_dim()) {
    require_same_shape(proj.bias.size(), 1, proj.out_dim(), 1, "project_features bias");
  }
  Matrix<T> out;
  kernels::gemm_nn(f, proj.weight, std::span<const T>(proj.bias), out);
  return out;
}

template <typename T>
Matrix<T> fuse_features(const Matrix<T>& f_t, const Matrix<T>& f_c_proj, double lambda) {
  require_same_shape(f_t, f_c_proj, "fuse_features");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error(ErrorCode::InvariantViolation, "lambda outside [0,1]");
  Matrix<T> out(f_t.rows(), f_t.cols());
  const T l = static_cast<T>(lambda), r = static_cast<T>(1.0 - lambda);
  const auto a = f_t.flat(), c = f_c_proj.flat();
  auto o = out.flat();
  const auto len = static_cast<std::ptrdiff_t>(o.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < len; ++i) o[i] = l * a[i] + r * c[i];
  return out;
}

template struct LinearProjection<float>;
template struct LinearProjection<double>;
template Matrix<float> project_features(const Matrix<float>&, const LinearProjection<float>&);
template Matrix<double> project_features(const Matrix<double>&, const LinearProjection<double>&);
template Matrix<float> fuse_features(const Matrix<float>&, const Matrix<float>&, double);
template Matrix<double> fuse_features(const Matrix<double>&, const Matrix<double>&, double);

}  // namespace fkd
