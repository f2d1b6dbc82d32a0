#include "fusekd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fusekd/error.hpp"

namespace fkd {

template <typename T>
std::vector<T> softmax_t(std::span<const T> z, T temp) {
  std::vector<T> p(z.size());
  if (z.empty()) return p;
  const T mx = *std::max_element(z.begin(), z.end());
  T sum{0};
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = std::exp((z[k] - mx) / temp);
    sum += p[k];
  }
  for (auto& v : p) v /= sum;
  return p;
}

template <typename T>
std::vector<T> log_softmax_t(std::span<const T> z, T temp) {
  std::vector<T> out(z.size());
  if (z.empty()) return out;
  const T mx = *std::max_element(z.begin(), z.end());
  T sum{0};
  for (std::size_t k = 0; k < z.size(); ++k) {
    out[k] = (z[k] - mx) / temp;
    sum += std::exp(out[k]);
  }
  const T lse = std::log(sum);
  for (auto& v : out) v -= lse;
  return out;
}

double kl_div(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) require_same_shape(p.size(), 1, q.size(), 1, "kl_div");
  double sp = 0.0, sq = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] < 0.0 || q[k] < 0.0) throw Error(ErrorCode::DomainError, "negative probability");
    sp += p[k];
    sq += q[k];
  }
  if (std::abs(sp - 1.0) > 1e-5 || std::abs(sq - 1.0) > 1e-5) {
    throw Error(ErrorCode::DomainError, "inputs must sum to 1");
  }
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] == 0.0) continue;
    if (q[k] == 0.0) {
      throw Error(ErrorCode::DomainError, "q is zero where p is positive (class " + std::to_string(k) + ")");
    }
    kl += p[k] * (std::log(std::max(p[k], kProbFloor)) - std::log(std::max(q[k], kProbFloor)));
  }
  return std::max(kl, 0.0);
}

template <typename T>
double logit_loss(std::span<const T> z_f, std::span<const T> z_s, T temp) {
  if (z_f.size() != z_s.size()) require_same_shape(z_f.size(), 1, z_s.size(), 1, "logit_loss");
  const auto lf = log_softmax_t(z_f, temp);
  const auto ls = log_softmax_t(z_s, temp);
  double kl = 0.0;
  for (std::size_t k = 0; k < lf.size(); ++k) {
    const double lfk = static_cast<double>(lf[k]);
    kl += std::exp(lfk) * (lfk - static_cast<double>(ls[k]));
  }
  return std::max(kl, 0.0);
}

template <typename T>
void logit_loss_grad(std::span<const T> z_f, std::span<const T> z_s, T temp, std::span<T> grad) {
  if (z_f.size() != z_s.size() || grad.size() != z_s.size()) {
    require_same_shape(z_f.size(), grad.size(), z_s.size(), z_s.size(), "logit_loss_grad");
  }
  const auto pf = softmax_t(z_f, temp);
  const auto ps = softmax_t(z_s, temp);
  for (std::size_t k = 0; k < grad.size(); ++k) grad[k] = (ps[k] - pf[k]) / temp;
}

namespace {

void check_label(std::int64_t label, std::size_t classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw Error(ErrorCode::LabelOutOfRange,
                "label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
  }
}

template <typename T>
struct CosineParts {
  double dot = 0.0, na = 0.0, nb = 0.0;
};

template <typename T>
CosineParts<T> cosine_parts(std::span<const T> a, std::span<const T> b) {
  CosineParts<T> c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    c.dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    c.na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    c.nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  c.na = std::sqrt(c.na);
  c.nb = std::sqrt(c.nb);
  return c;
}

}  // namespace

template <typename T>
double cross_entropy(std::span<const T> z_s, std::int64_t label) {
  check_label(label, z_s.size());
  const auto ls = log_softmax_t(z_s, T{1});
  return -static_cast<double>(ls[static_cast<std::size_t>(label)]);
}

template <typename T>
void cross_entropy_grad(std::span<const T> z_s, std::int64_t label, std::span<T> grad) {
  check_label(label, z_s.size());
  const auto p = softmax_t(z_s, T{1});
  for (std::size_t k = 0; k < grad.size(); ++k) grad[k] = p[k];
  grad[static_cast<std::size_t>(label)] -= T{1};
}

template <typename T>
double feature_loss(std::span<const T> f_s, std::span<const T> f_f) {
  if (f_s.size() != f_f.size()) require_same_shape(f_s.size(), 1, f_f.size(), 1, "feature_loss");
  const auto c = cosine_parts(f_s, f_f);
  if (c.na == 0.0 || c.nb == 0.0) throw Error(ErrorCode::ZeroNormFeature, "cosine distance of a zero vector");
  const double cos = std::clamp(c.dot / (c.na * c.nb), -1.0, 1.0);
  return 1.0 - cos;
}

template <typename T>
void feature_loss_grad(std::span<const T> f_s, std::span<const T> f_f, std::span<T> grad) {
  if (f_s.size() != f_f.size() || grad.size() != f_s.size()) {
    require_same_shape(f_s.size(), grad.size(), f_f.size(), f_f.size(), "feature_loss_grad");
  }
  const auto c = cosine_parts(f_s, f_f);
  if (c.na == 0.0 || c.nb == 0.0) throw Error(ErrorCode::ZeroNormFeature, "cosine distance of a zero vector");
  const double inv = 1.0 / (c.na * c.nb);
  const double coef = c.dot / (c.na * c.na * c.na * c.nb);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    grad[i] = static_cast<T>(-(static_cast<double>(f_f[i]) * inv - static_cast<double>(f_s[i]) * coef));
  }
}

namespace {

template <typename T>
void check_batch(const LossInputs<T>& in) {
  require_same_shape(in.student_logits, in.fused_logits, "student vs fused logits");
  require_same_shape(in.student_features, in.fused_features, "student vs fused features");
  if (in.student_logits.rows() != in.student_features.rows() ||
      in.labels.size() != in.student_logits.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "batch row counts disagree");
  }
  if (in.student_logits.rows() == 0) throw Error(ErrorCode::ShapeMismatch, "empty batch");
}

template <typename T>
LossBreakdown batch_loss(const LossInputs<T>& in, const FusionConfig& cfg, LossGradients<T>* grads) {
  check_batch(in);
  const std::size_t n = in.student_logits.rows();
  const std::size_t k = in.student_logits.cols();
  const std::size_t d = in.student_features.cols();
  const T temp = static_cast<T>(cfg.t_temp);
  const T inv_n = T{1} / static_cast<T>(n);
  const T beta = static_cast<T>(cfg.beta), gamma = static_cast<T>(cfg.gamma);

  if (grads) {
    grads->d_logits = Matrix<T>(n, k);
    grads->d_student_features = Matrix<T>(n, d);
    grads->d_fused_features = Matrix<T>(n, d);
  }
  std::vector<double> ce(n), kl(n), feat(n);

#pragma omp parallel
  {
    std::vector<T> g_ce(k), g_kl(k), g_fs(d), g_ff(d);
#pragma omp for schedule(static)
    for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(n); ++si) {
      const auto i = static_cast<std::size_t>(si);
      const auto zs = in.student_logits.row(i), zf = in.fused_logits.row(i);
      const auto fs = in.student_features.row(i), ff = in.fused_features.row(i);
      ce[i] = cross_entropy(zs, in.labels[i]);
      kl[i] = logit_loss(zf, zs, temp);
      const auto c = cosine_parts(fs, ff);
      const bool degenerate = c.na == 0.0 || c.nb == 0.0;
      feat[i] = degenerate ? 1.0 : feature_loss(fs, ff);
      if (!grads) continue;
      cross_entropy_grad(zs, in.labels[i], std::span<T>(g_ce));
      logit_loss_grad(zf, zs, temp, std::span<T>(g_kl));
      auto dz = grads->d_logits.row(i);
      for (std::size_t j = 0; j < k; ++j) dz[j] = (g_ce[j] + beta * g_kl[j]) * inv_n;
      auto dfs = grads->d_student_features.row(i);
      auto dff = grads->d_fused_features.row(i);
      if (degenerate) {
        std::fill(dfs.begin(), dfs.end(), T{0});
        std::fill(dff.begin(), dff.end(), T{0});
        continue;
      }
      feature_loss_grad(fs, ff, std::span<T>(g_fs));
      feature_loss_grad(ff, fs, std::span<T>(g_ff));
      for (std::size_t j = 0; j < d; ++j) {
        dfs[j] = gamma * g_fs[j] * inv_n;
        dff[j] = gamma * g_ff[j] * inv_n;
      }
    }
  }

  // Fixed-order reduction keeps results independent of the thread count.
  LossBreakdown out;
  for (std::size_t i = 0; i < n; ++i) {
    out.ce += ce[i];
    out.logit_kl += kl[i];
    out.feat += feat[i];
  }
  out.ce /= static_cast<double>(n);
  out.logit_kl /= static_cast<double>(n);
  out.feat /= static_cast<double>(n);
  out.total = out.ce + cfg.beta * out.logit_kl + cfg.gamma * out.feat;
  return out;
}

}  // namespace

template <typename T>
LossBreakdown total_loss(const LossInputs<T>& in, const FusionConfig& cfg) {
  return batch_loss<T>(in, cfg, nullptr);
}

template <typename T>
LossBreakdown total_loss_with_grad(const LossInputs<T>& in, const FusionConfig& cfg,
                                   LossGradients<T>& grads) {
  return batch_loss<T>(in, cfg, &grads);
}

#define FKD_INSTANTIATE(T)                                                                         \
  template std::vector<T> softmax_t<T>(std::span<const T>, T);                                     \
  template std::vector<T> log_softmax_t<T>(std::span<const T>, T);                                 \
  template double logit_loss<T>(std::span<const T>, std::span<const T>, T);                        \
  template void logit_loss_grad<T>(std::span<const T>, std::span<const T>, T, std::span<T>);       \
  template double cross_entropy<T>(std::span<const T>, std::int64_t);                              \
  template void cross_entropy_grad<T>(std::span<const T>, std::int64_t, std::span<T>);             \
  template double feature_loss<T>(std::span<const T>, std::span<const T>);                         \
  template void feature_loss_grad<T>(std::span<const T>, std::span<const T>, std::span<T>);        \
  template LossBreakdown total_loss<T>(const LossInputs<T>&, const FusionConfig&);                 \
  template LossBreakdown total_loss_with_grad<T>(const LossInputs<T>&, const FusionConfig&,        \
                                                 LossGradients<T>&);

FKD_INSTANTIATE(float)
FKD_INSTANTIATE(double)
#undef FKD_INSTANTIATE

}  // namespace fkd
