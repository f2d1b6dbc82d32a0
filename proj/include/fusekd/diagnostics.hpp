#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fusekd/cache_io.hpp"
#include "fusekd/matrix.hpp"
#include "fusekd/student.hpp"

namespace fkd {

// ---- confidence quadrants -------------------------------------------------

enum class Quadrant { certain_correct = 0, certain_incorrect, uncertain_correct, uncertain_incorrect };

inline constexpr std::array<Quadrant, 4> kQuadrants{Quadrant::certain_correct, Quadrant::certain_incorrect,
                                                    Quadrant::uncertain_correct,
                                                    Quadrant::uncertain_incorrect};
std::string_view to_string(Quadrant q);

struct QuadrantCounts {
  std::size_t certain_correct = 0;
  std::size_t certain_incorrect = 0;
  std::size_t uncertain_correct = 0;
  std::size_t uncertain_incorrect = 0;

  std::size_t total() const noexcept {
    return certain_correct + certain_incorrect + uncertain_correct + uncertain_incorrect;
  }
  std::size_t operator[](Quadrant q) const noexcept;
  std::size_t& operator[](Quadrant q) noexcept;
  friend bool operator==(const QuadrantCounts&, const QuadrantCounts&) = default;
};

// "Certain" means max softmax probability >= threshold; "correct" means the
// argmax (lowest index on ties) equals the label.
Quadrant classify(std::span<const double> logits, std::int64_t label, double threshold);
std::vector<Quadrant> quadrant_assignment(const Matrix<double>& logits, std::span<const std::int64_t> labels,
                                          double threshold);
QuadrantCounts quadrant_counts(const Matrix<double>& logits, std::span<const std::int64_t> labels,
                               double threshold);

// Signed percentage-point change per quadrant, (after - before) / N * 100.
struct QuadrantDelta {
  std::array<double, 4> pct{};
  double operator[](Quadrant q) const noexcept { return pct[static_cast<std::size_t>(q)]; }
};
QuadrantDelta quadrant_delta(const QuadrantCounts& before, const QuadrantCounts& after);

// ---- correlation ------------------------------------------------------------

// Pearson correlation between class-logit columns (K x K, unit diagonal).
Matrix<double> interclass_correlation(const Matrix<double>& logits);

// ---- bias / variance ------------------------------------------------------

double fused_variance_closed_form(double var_t, double var_c, double cov_tc, double alpha);
double ensemble_error(double bias, double var, double noise);

struct EnsembleStats {
  double alpha = 0.0;
  std::vector<double> bias_t, bias_c, bias_f;
  std::vector<double> var_t, var_c, var_f;
  std::vector<double> cov_tc;
  double error_f = 0.0;
  double residual = 0.0;  // irreducible noise term added to error_f

  // Scalar summaries over classes.
  double bias_f_rms() const;
  double var_f_mean() const;
};

// Ideal logits for the bias/variance view: scale * (onehot(y) - 1/K).
Matrix<double> target_logits(std::span<const std::int64_t> labels, std::size_t classes, double scale);
// Mean centered true-class logit of `z`, rescaled so target_logits reproduces it.
double matched_target_scale(const Matrix<double>& z, std::span<const std::int64_t> labels);

// Per-class moments of the errors (centered z - target) over the samples.
// bias_f and var_f are measured on the fused logits themselves, so the
// linear identities hold up to rounding.
EnsembleStats ensemble_stats(const Matrix<double>& z_t, const Matrix<double>& z_c, const Matrix<double>& target,
                             double alpha, double residual = 0.0);

struct EnsembleRow {
  double alpha = 0.0;
  double bias_f = 0.0;  // rms over classes
  double var_f = 0.0;   // mean over classes
  double error_f = 0.0;
};
std::vector<EnsembleRow> ensemble_sweep(const Matrix<double>& z_t, const Matrix<double>& z_c,
                                        const Matrix<double>& target, std::span<const double> alphas,
                                        double residual = 0.0);

// ---- corruptions ------------------------------------------------------------

enum class CorruptionKind {
  gaussian_noise,
  motion_blur_1d,
  jpeg_like_quantize,
  spatter_like_saltpepper,
  snow_like_brighten_streaks,
};

inline constexpr std::array<CorruptionKind, 5> kCorruptionKinds{
    CorruptionKind::gaussian_noise, CorruptionKind::motion_blur_1d, CorruptionKind::jpeg_like_quantize,
    CorruptionKind::spatter_like_saltpepper, CorruptionKind::snow_like_brighten_streaks};

std::string_view to_string(CorruptionKind kind);
CorruptionKind corruption_from_string(const std::string& name);  // UnknownKind

// Per-severity parameter (severity 1..5):
//   gaussian_noise               noise std           0.04 0.06 0.08 0.10 0.15
//   motion_blur_1d               box length (px)     3    5    7    9    13
//   jpeg_like_quantize           4x4-block residual quantization step
//                                                    0.04 0.08 0.12 0.18 0.25
//   spatter_like_saltpepper      pixel fraction      0.01 0.02 0.04 0.07 0.10
//   snow_like_brighten_streaks   brightening         0.05 0.08 0.11 0.14 0.18
//                                (plus `severity` whitened diagonal streaks)
double corruption_parameter(CorruptionKind kind, int severity);

// Deterministic for a fixed seed, output clipped to [0,1], severity 0 is the identity.
template <typename T>
Matrix<T> corrupt(const Matrix<T>& images, CorruptionKind kind, int severity, std::uint64_t seed,
                  const ImageGeometry& geometry);

// ---- adversarial attacks ----------------------------------------------------

// clip(x + eps * sign(grad_x CE), 0, 1), with |x_adv - x|_inf <= eps exactly.
template <typename T>
Matrix<T> fgsm_attack(const StudentNet<T>& net, const Matrix<T>& x, std::span<const std::int64_t> labels,
                      double eps);

// Iterated sign-gradient steps, each projected back onto the eps-ball around
// x and the pixel range. No random start.
template <typename T>
Matrix<T> pgd_attack(const StudentNet<T>& net, const Matrix<T>& x, std::span<const std::int64_t> labels,
                     double eps, double step, int iters);

struct RobustnessRow {
  std::string kind;
  double param = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
};

}  // namespace fkd
