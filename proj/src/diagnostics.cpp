#include "fusekd/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fusekd/kernels.hpp"
#include "fusekd/losses.hpp"

namespace fkd {

std::string_view to_string(Quadrant q) {
  switch (q) {
    case Quadrant::certain_correct: return "certain_correct";
    case Quadrant::certain_incorrect: return "certain_incorrect";
    case Quadrant::uncertain_correct: return "uncertain_correct";
    case Quadrant::uncertain_incorrect: return "uncertain_incorrect";
  }
  return "?";
}

std::size_t QuadrantCounts::operator[](Quadrant q) const noexcept {
  switch (q) {
    case Quadrant::certain_correct: return certain_correct;
    case Quadrant::certain_incorrect: return certain_incorrect;
    case Quadrant::uncertain_correct: return uncertain_correct;
    case Quadrant::uncertain_incorrect: return uncertain_incorrect;
  }
  return 0;
}

std::size_t& QuadrantCounts::operator[](Quadrant q) noexcept {
  switch (q) {
    case Quadrant::certain_correct: return certain_correct;
    case Quadrant::certain_incorrect: return certain_incorrect;
    case Quadrant::uncertain_correct: return uncertain_correct;
    case Quadrant::uncertain_incorrect: break;
  }
  return uncertain_incorrect;
}

Quadrant classify(std::span<const double> logits, std::int64_t label, double threshold) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(label));
  }
  const auto p = softmax_t(logits, 1.0);
  const auto top = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  const auto argmax = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  const bool certain = p[top] >= threshold;
  const bool correct = argmax == static_cast<std::size_t>(label);
  if (certain) return correct ? Quadrant::certain_correct : Quadrant::certain_incorrect;
  return correct ? Quadrant::uncertain_correct : Quadrant::uncertain_incorrect;
}

std::vector<Quadrant> quadrant_assignment(const Matrix<double>& logits, std::span<const std::int64_t> labels,
                                          double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw Error(ErrorCode::InvariantViolation, "certainty threshold must lie in (0,1]");
  }
  if (labels.size() != logits.rows()) require_same_shape(labels.size(), 1, logits.rows(), 1, "quadrant labels");
  std::vector<Quadrant> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = classify(logits.row(i), labels[i], threshold);
  return out;
}

QuadrantCounts quadrant_counts(const Matrix<double>& logits, std::span<const std::int64_t> labels,
                               double threshold) {
  QuadrantCounts c;
  for (auto q : quadrant_assignment(logits, labels, threshold)) ++c[q];
  return c;
}

QuadrantDelta quadrant_delta(const QuadrantCounts& before, const QuadrantCounts& after) {
  if (before.total() != after.total()) {
    throw Error(ErrorCode::TotalMismatch, std::to_string(before.total()) + " vs " + std::to_string(after.total()));
  }
  QuadrantDelta d;
  if (before.total() == 0) return d;
  const double n = static_cast<double>(before.total());
  for (auto q : kQuadrants) {
    d.pct[static_cast<std::size_t>(q)] =
        (static_cast<double>(after[q]) - static_cast<double>(before[q])) / n * 100.0;
  }
  return d;
}

Matrix<double> interclass_correlation(const Matrix<double>& logits) {
  if (logits.rows() < 2) throw Error(ErrorCode::InsufficientSamples, "need at least 2 samples");
  return kernels::column_correlation(logits);
}

double fused_variance_closed_form(double var_t, double var_c, double cov_tc, double alpha) {
  return alpha * alpha * var_t + (1.0 - alpha) * (1.0 - alpha) * var_c + 2.0 * alpha * (1.0 - alpha) * cov_tc;
}

double ensemble_error(double bias, double var, double noise) { return bias * bias + var + noise; }

double EnsembleStats::bias_f_rms() const {
  double s = 0.0;
  for (double b : bias_f) s += b * b;
  return bias_f.empty() ? 0.0 : std::sqrt(s / static_cast<double>(bias_f.size()));
}

double EnsembleStats::var_f_mean() const {
  double s = 0.0;
  for (double v : var_f) s += v;
  return var_f.empty() ? 0.0 : s / static_cast<double>(var_f.size());
}

Matrix<double> target_logits(std::span<const std::int64_t> labels, std::size_t classes, double scale) {
  Matrix<double> t(labels.size(), classes, -scale / static_cast<double>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(labels[i]));
    }
    t(i, static_cast<std::size_t>(labels[i])) += scale;
  }
  return t;
}

namespace {

Matrix<double> center_rows(const Matrix<double>& z) {
  Matrix<double> out(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double m = 0.0;
    for (double v : z.row(i)) m += v;
    m /= static_cast<double>(z.cols());
    for (std::size_t k = 0; k < z.cols(); ++k) out(i, k) = z(i, k) - m;
  }
  return out;
}

}  // namespace

double matched_target_scale(const Matrix<double>& z, std::span<const std::int64_t> labels) {
  if (z.rows() == 0 || z.cols() < 2) return 1.0;
  const auto c = center_rows(z);
  double s = 0.0;
  for (std::size_t i = 0; i < c.rows(); ++i) s += c(i, static_cast<std::size_t>(labels[i]));
  const double k = static_cast<double>(z.cols());
  return s / static_cast<double>(c.rows()) * k / (k - 1.0);
}

EnsembleStats ensemble_stats(const Matrix<double>& z_t, const Matrix<double>& z_c, const Matrix<double>& target,
                             double alpha, double residual) {
  require_same_shape(z_t, z_c, "ensemble teachers");
  require_same_shape(z_t, target, "ensemble target");
  if (z_t.rows() == 0) throw Error(ErrorCode::InsufficientSamples, "no samples");
  const std::size_t n = z_t.rows(), k = z_t.cols();
  const auto ct = center_rows(z_t), cc = center_rows(z_c);
  const auto cf = center_rows(fuse_logits(z_t, z_c, alpha));
  const auto tg = center_rows(target);

  EnsembleStats s;
  s.alpha = alpha;
  s.residual = residual;
  s.bias_t.assign(k, 0.0);
  s.bias_c.assign(k, 0.0);
  s.bias_f.assign(k, 0.0);
  s.var_t.assign(k, 0.0);
  s.var_c.assign(k, 0.0);
  s.var_f.assign(k, 0.0);
  s.cov_tc.assign(k, 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      s.bias_t[c] += (ct(i, c) - tg(i, c)) * inv;
      s.bias_c[c] += (cc(i, c) - tg(i, c)) * inv;
      s.bias_f[c] += (cf(i, c) - tg(i, c)) * inv;
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      const double et = ct(i, c) - tg(i, c) - s.bias_t[c];
      const double ec = cc(i, c) - tg(i, c) - s.bias_c[c];
      const double ef = cf(i, c) - tg(i, c) - s.bias_f[c];
      s.var_t[c] += et * et * inv;
      s.var_c[c] += ec * ec * inv;
      s.var_f[c] += ef * ef * inv;
      s.cov_tc[c] += et * ec * inv;
    }
  double err = 0.0;
  for (std::size_t c = 0; c < k; ++c) err += ensemble_error(s.bias_f[c], s.var_f[c], 0.0);
  s.error_f = err / static_cast<double>(k) + residual;
  return s;
}

std::vector<EnsembleRow> ensemble_sweep(const Matrix<double>& z_t, const Matrix<double>& z_c,
                                        const Matrix<double>& target, std::span<const double> alphas,
                                        double residual) {
  std::vector<EnsembleRow> rows;
  for (double a : alphas) {
    const auto s = ensemble_stats(z_t, z_c, target, a, residual);
    rows.push_back({a, s.bias_f_rms(), s.var_f_mean(), s.error_f});
  }
  return rows;
}

// ---- corruptions ------------------------------------------------------------

std::string_view to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::motion_blur_1d: return "motion_blur_1d";
    case CorruptionKind::jpeg_like_quantize: return "jpeg_like_quantize";
    case CorruptionKind::spatter_like_saltpepper: return "spatter_like_saltpepper";
    case CorruptionKind::snow_like_brighten_streaks: return "snow_like_brighten_streaks";
  }
  return "?";
}

CorruptionKind corruption_from_string(const std::string& name) {
  for (auto k : kCorruptionKinds)
    if (to_string(k) == name) return k;
  throw Error(ErrorCode::UnknownKind, "unknown corruption '" + name + "'");
}

double corruption_parameter(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 5) throw Error(ErrorCode::InvariantViolation, "severity must be 1..5");
  static constexpr double noise[] = {0.04, 0.06, 0.08, 0.10, 0.15};
  static constexpr double blur[] = {3, 5, 7, 9, 13};
  static constexpr double quant[] = {0.04, 0.08, 0.12, 0.18, 0.25};
  static constexpr double spatter[] = {0.01, 0.02, 0.04, 0.07, 0.10};
  static constexpr double snow[] = {0.05, 0.08, 0.11, 0.14, 0.18};
  const auto i = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case CorruptionKind::gaussian_noise: return noise[i];
    case CorruptionKind::motion_blur_1d: return blur[i];
    case CorruptionKind::jpeg_like_quantize: return quant[i];
    case CorruptionKind::spatter_like_saltpepper: return spatter[i];
    case CorruptionKind::snow_like_brighten_streaks: return snow[i];
  }
  throw Error(ErrorCode::UnknownKind, "corruption kind");
}

namespace {

template <typename T>
T clip01(T v) {
  return v < T{0} ? T{0} : (v > T{1} ? T{1} : v);
}

template <typename T>
void corrupt_row(std::span<T> px, CorruptionKind kind, int severity, std::mt19937_64& rng,
                 const ImageGeometry& g) {
  const double p = corruption_parameter(kind, severity);
  const std::size_t plane = g.height * g.width;
  switch (kind) {
    case CorruptionKind::gaussian_noise: {
      std::normal_distribution<double> nd(0.0, p);
      for (auto& v : px) v = static_cast<T>(static_cast<double>(v) + nd(rng));
      break;
    }
    case CorruptionKind::motion_blur_1d: {
      const auto len = static_cast<std::ptrdiff_t>(p);
      const std::ptrdiff_t half = len / 2;
      std::vector<T> src(px.begin(), px.end());
      const auto w = static_cast<std::ptrdiff_t>(g.width);
      for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t r = 0; r < g.height; ++r) {
          const T* line = src.data() + c * plane + r * g.width;
          T* out = px.data() + c * plane + r * g.width;
          for (std::ptrdiff_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (std::ptrdiff_t d = -half; d <= half; ++d) s += line[std::clamp(x + d, std::ptrdiff_t{0}, w - 1)];
            out[x] = static_cast<T>(s / static_cast<double>(len));
          }
        }
      break;
    }
    case CorruptionKind::jpeg_like_quantize: {
      constexpr std::size_t b = 4;
      for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t by = 0; by < g.height; by += b)
          for (std::size_t bx = 0; bx < g.width; bx += b) {
            const std::size_t ey = std::min(g.height, by + b), ex = std::min(g.width, bx + b);
            double mean = 0.0;
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t x = bx; x < ex; ++x) mean += px[c * plane + y * g.width + x];
            mean /= static_cast<double>((ey - by) * (ex - bx));
            for (std::size_t y = by; y < ey; ++y)
              for (std::size_t x = bx; x < ex; ++x) {
                auto& v = px[c * plane + y * g.width + x];
                v = static_cast<T>(mean + std::round((static_cast<double>(v) - mean) / p) * p);
              }
          }
      break;
    }
    case CorruptionKind::spatter_like_saltpepper: {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& v : px) {
        const double r = u(rng);
        if (r < p / 2) v = T{0};
        else if (r < p) v = T{1};
      }
      break;
    }
    case CorruptionKind::snow_like_brighten_streaks: {
      for (auto& v : px) v = static_cast<T>(static_cast<double>(v) + p);
      std::uniform_int_distribution<std::size_t> row(0, g.height - 1), col(0, g.width - 1);
      const std::size_t len = std::max<std::size_t>(2, g.width / 2);
      for (int s = 0; s < severity; ++s) {
        const std::size_t y0 = row(rng), x0 = col(rng);
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t y = (y0 + t) % g.height, x = (x0 + t) % g.width;
          for (std::size_t c = 0; c < g.channels; ++c) {
            auto& v = px[c * plane + y * g.width + x];
            v = static_cast<T>(1.0 - (1.0 - std::min(1.0, static_cast<double>(v))) * 0.2);
          }
        }
      }
      break;
    }
  }
  for (auto& v : px) v = clip01(v);
}

}  // namespace

template <typename T>
Matrix<T> corrupt(const Matrix<T>& images, CorruptionKind kind, int severity, std::uint64_t seed,
                  const ImageGeometry& geometry) {
  if (severity < 0 || severity > 5) throw Error(ErrorCode::InvariantViolation, "severity must be 0..5");
  if (geometry.size() != images.cols()) {
    require_same_shape(images.rows(), images.cols(), images.rows(), geometry.size(), "image geometry");
  }
  for (T v : images.flat())
    if (!(v >= T{0} && v <= T{1})) throw Error(ErrorCode::InvariantViolation, "pixel outside [0,1]");
  Matrix<T> out = images;
  if (severity == 0) return out;
  const auto n = static_cast<std::ptrdiff_t>(images.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    std::seed_seq seq{seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(kind),
                      static_cast<std::uint64_t>(severity)};
    std::mt19937_64 rng(seq);
    corrupt_row(out.row(static_cast<std::size_t>(i)), kind, severity, rng, geometry);
  }
  return out;
}

// ---- attacks ------------------------------------------------------------------

namespace {

template <typename T>
T sign(T v) {
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

// One signed step from `cur`, projected onto the eps-ball around `orig` and
// onto [0,1]. The ball bound is enforced in the working precision.
template <typename T>
void attack_step(Matrix<T>& cur, const Matrix<T>& orig, const Matrix<T>& grad, T step, T eps) {
  auto c = cur.flat();
  const auto o = orig.flat();
  const auto g = grad.flat();
  for (std::size_t i = 0; i < c.size(); ++i) {
    T v = c[i] + step * sign(g[i]);
    v = std::min(std::max(v, o[i] - eps), o[i] + eps);
    while (v - o[i] > eps) v = std::nextafter(v, o[i]);
    while (o[i] - v > eps) v = std::nextafter(v, o[i]);
    c[i] = clip01(v);
  }
}

}  // namespace

template <typename T>
Matrix<T> fgsm_attack(const StudentNet<T>& net, const Matrix<T>& x, std::span<const std::int64_t> labels,
                      double eps) {
  if (!(eps >= 0.0)) throw Error(ErrorCode::InvariantViolation, "eps must be >= 0");
  Matrix<T> adv = x;
  if (eps == 0.0) return adv;
  const auto g = input_gradient(net, x, labels);
  attack_step(adv, x, g, static_cast<T>(eps), static_cast<T>(eps));
  return adv;
}

template <typename T>
Matrix<T> pgd_attack(const StudentNet<T>& net, const Matrix<T>& x, std::span<const std::int64_t> labels,
                     double eps, double step, int iters) {
  if (!(eps >= 0.0)) throw Error(ErrorCode::InvariantViolation, "eps must be >= 0");
  if (!(step > 0.0) || iters < 1) throw Error(ErrorCode::InvariantViolation, "pgd needs step > 0, iters >= 1");
  Matrix<T> adv = x;
  if (eps == 0.0) return adv;
  for (int it = 0; it < iters; ++it) {
    const auto g = input_gradient(net, adv, labels);
    attack_step(adv, x, g, static_cast<T>(step), static_cast<T>(eps));
  }
  return adv;
}

#define FKD_INSTANTIATE(T)                                                                             \
  template Matrix<T> corrupt<T>(const Matrix<T>&, CorruptionKind, int, std::uint64_t, const ImageGeometry&); \
  template Matrix<T> fgsm_attack<T>(const StudentNet<T>&, const Matrix<T>&, std::span<const std::int64_t>, \
                                    double);                                                           \
  template Matrix<T> pgd_attack<T>(const StudentNet<T>&, const Matrix<T>&, std::span<const std::int64_t>,  \
                                   double, double, int);

FKD_INSTANTIATE(float)
FKD_INSTANTIATE(double)
#undef FKD_INSTANTIATE

}  // namespace fkd
