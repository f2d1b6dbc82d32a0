#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fusekd/fusion.hpp"
#include "fusekd/matrix.hpp"

namespace fkd {

// Probability floor applied inside logarithms.
inline constexpr double kProbFloor = 1e-12;

struct LossBreakdown {
  double ce = 0.0;
  double logit_kl = 0.0;
  double feat = 0.0;
  double total = 0.0;
};

// softmax(z / temp) with max-subtraction.
template <typename T>
std::vector<T> softmax_t(std::span<const T> z, T temp);

// log softmax(z / temp), computed without forming the probabilities.
template <typename T>
std::vector<T> log_softmax_t(std::span<const T> z, T temp);

// KL(p || q) = sum_k p_k ln(p_k / q_k), 0 ln 0 = 0.
double kl_div(std::span<const double> p, std::span<const double> q);

// KL(softmax(z_f / temp) || softmax(z_s / temp)).
template <typename T>
double logit_loss(std::span<const T> z_f, std::span<const T> z_s, T temp);
// d logit_loss / d z_s = (softmax(z_s/temp) - softmax(z_f/temp)) / temp
template <typename T>
void logit_loss_grad(std::span<const T> z_f, std::span<const T> z_s, T temp, std::span<T> grad);

template <typename T>
double cross_entropy(std::span<const T> z_s, std::int64_t label);
template <typename T>
void cross_entropy_grad(std::span<const T> z_s, std::int64_t label, std::span<T> grad);

// Cosine distance 1 - <a,b>/(|a||b|).
template <typename T>
double feature_loss(std::span<const T> f_s, std::span<const T> f_f);
// Gradient of the cosine distance with respect to its first argument. By
// symmetry, swapping the arguments yields the gradient for the second one.
template <typename T>
void feature_loss_grad(std::span<const T> f_s, std::span<const T> f_f, std::span<T> grad);

// Batch objective. Every term is the mean over rows.
template <typename T>
struct LossInputs {
  const Matrix<T>& student_logits;
  const Matrix<T>& fused_logits;
  const Matrix<T>& student_features;
  const Matrix<T>& fused_features;
  std::span<const std::int64_t> labels;
};

template <typename T>
struct LossGradients {
  Matrix<T> d_logits;            // wrt student logits
  Matrix<T> d_student_features;  // wrt student features
  Matrix<T> d_fused_features;    // wrt fused features (feeds the projection)
};

template <typename T>
LossBreakdown total_loss(const LossInputs<T>& in, const FusionConfig& cfg);

// Same value as total_loss plus the gradients. Rows whose student or fused
// feature is exactly zero contribute a feature loss of 1 and no feature
// gradient; cosine distance is undefined there.
template <typename T>
LossBreakdown total_loss_with_grad(const LossInputs<T>& in, const FusionConfig& cfg,
                                   LossGradients<T>& grads);

}  // namespace fkd
