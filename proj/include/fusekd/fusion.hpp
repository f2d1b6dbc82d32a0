#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fusekd/cache_io.hpp"
#include "fusekd/matrix.hpp"

namespace fkd {

// Per-prompt zero-shot logits, laid out prompt-major: values[(m*N + n)*K + k].
struct PromptLogitTensor {
  std::size_t prompts = 0;
  std::size_t samples = 0;
  std::size_t classes = 0;
  std::vector<double> values;

  double operator()(std::size_t m, std::size_t n, std::size_t k) const {
    return values[(m * samples + n) * classes + k];
  }
  double& operator()(std::size_t m, std::size_t n, std::size_t k) {
    return values[(m * samples + n) * classes + k];
  }
  Matrix<double> slice(std::size_t m) const;

  static PromptLogitTensor from_cache(const CacheTensor& t);
  CacheTensor to_cache() const;
};

enum class LogitNorm { raw, per_sample_standardize };

std::string_view to_string(LogitNorm norm);
LogitNorm logit_norm_from_string(const std::string& s);

struct FusionConfig {
  double alpha = 0.7;   // weight of the task teacher's logits
  double lambda = 0.7;  // weight of the task teacher's features
  double beta = 3.0;    // logit distillation weight
  double gamma = 0.8;   // feature distillation weight
  double t_temp = 3.0;  // softening temperature
  double certainty_threshold = 0.5;
  LogitNorm logit_norm = LogitNorm::raw;

  // Throws InvariantViolation naming the first out-of-range knob.
  void validate() const;
};

Matrix<double> average_prompt_logits(const PromptLogitTensor& p);

// Each row shifted to zero mean and scaled to unit (population) standard
// deviation. Zero-variance rows are only mean-shifted.
Matrix<double> standardize_rows(const Matrix<double>& z);

// alpha * z_t + (1 - alpha) * z_c, after optional per-row standardization.
Matrix<double> fuse_logits(const Matrix<double>& z_t, const Matrix<double>& z_c, double alpha,
                           LogitNorm norm = LogitNorm::raw);

// (1 - alpha) * (z_c - z_t): what the zero-shot branch adds to the teacher.
Matrix<double> perturbation(const Matrix<double>& z_t, const Matrix<double>& z_c, double alpha);

// Row-wise affine map f * W + b with W stored D_in x D_out.
template <typename T>
struct LinearProjection {
  Matrix<T> weight;
  std::vector<T> bias;

  std::size_t in_dim() const noexcept { return weight.rows(); }
  std::size_t out_dim() const noexcept { return weight.cols(); }

  // Uniform in +-sqrt(1/in_dim), zero bias.
  static LinearProjection init(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed);
  static LinearProjection identity(std::size_t dim);
};

template <typename T>
Matrix<T> project_features(const Matrix<T>& f, const LinearProjection<T>& proj);

template <typename T>
Matrix<T> fuse_features(const Matrix<T>& f_t, const Matrix<T>& f_c_proj, double lambda);

}  // namespace fkd
