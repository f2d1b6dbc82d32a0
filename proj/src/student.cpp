#include "fusekd/student.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "fusekd/cache_io.hpp"
#include "fusekd/kernels.hpp"
#include "fusekd/kv.hpp"

namespace fkd {

template <typename T>
std::size_t StudentNet<T>::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

template <typename T>
std::vector<T> StudentNet<T>::flatten() const {
  std::vector<T> out;
  out.reserve(parameter_count());
  for (const auto& l : layers) {
    out.insert(out.end(), l.weight.flat().begin(), l.weight.flat().end());
    out.insert(out.end(), l.bias.begin(), l.bias.end());
  }
  return out;
}

template <typename T>
void StudentNet<T>::unflatten(std::span<const T> params) {
  if (params.size() != parameter_count()) {
    require_same_shape(params.size(), 1, parameter_count(), 1, "unflatten");
  }
  std::size_t off = 0;
  for (auto& l : layers) {
    std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(off), l.weight.size(), l.weight.data());
    off += l.weight.size();
    std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(off), l.bias.size(), l.bias.begin());
    off += l.bias.size();
  }
}

template <typename T>
StudentNet<T> init_student(const std::vector<std::size_t>& sizes, std::uint64_t seed) {
  if (sizes.size() < 3) {
    throw Error(ErrorCode::InvalidArchitecture, "need input, at least one hidden layer, and output");
  }
  for (auto s : sizes)
    if (s == 0) throw Error(ErrorCode::InvalidArchitecture, "zero-width layer");
  StudentNet<T> net;
  net.sizes = sizes;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const double bound = std::sqrt(1.0 / static_cast<double>(sizes[l]));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer<T> layer{Matrix<T>(sizes[l], sizes[l + 1]), std::vector<T>(sizes[l + 1])};
    for (auto& w : layer.weight.flat()) w = static_cast<T>(u(rng));
    for (auto& b : layer.bias) b = static_cast<T>(u(rng));
    net.layers.push_back(std::move(layer));
  }
  return net;
}

template <typename T>
ForwardPass<T> forward_batch(const StudentNet<T>& net, const Matrix<T>& x) {
  if (x.cols() != net.input_dim()) {
    require_same_shape(x.rows(), x.cols(), x.rows(), net.input_dim(), "student input");
  }
  ForwardPass<T> fp;
  fp.act.push_back(x);
  const std::size_t hidden = net.layers.size() - 1;
  for (std::size_t l = 0; l < hidden; ++l) {
    Matrix<T> pre;
    kernels::gemm_nn(fp.act.back(), net.layers[l].weight, std::span<const T>(net.layers[l].bias), pre);
    Matrix<T> a(pre.rows(), pre.cols());
    auto src = pre.flat();
    auto dst = a.flat();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
    fp.pre.push_back(std::move(pre));
    fp.act.push_back(std::move(a));
  }
  kernels::gemm_nn(fp.act.back(), net.layers.back().weight, std::span<const T>(net.layers.back().bias),
                   fp.logits);
  return fp;
}

template <typename T>
std::pair<std::vector<T>, std::vector<T>> forward(const StudentNet<T>& net, std::span<const T> x) {
  Matrix<T> in(1, x.size(), std::vector<T>(x.begin(), x.end()));
  auto fp = forward_batch(net, in);
  auto f = fp.features().row(0);
  auto z = fp.logits.row(0);
  return {std::vector<T>(f.begin(), f.end()), std::vector<T>(z.begin(), z.end())};
}

namespace {

template <typename T>
Matrix<T> fused_features_for(const DistillBatch<T>& batch, const LinearProjection<T>* projection,
                             double lambda, Matrix<T>* projected_out = nullptr) {
  if (projection) {
    Matrix<T> projected = project_features(batch.clip_features, *projection);
    auto fused = fuse_features(batch.teacher_features, projected, lambda);
    if (projected_out) *projected_out = std::move(projected);
    return fused;
  }
  return fuse_features(batch.teacher_features, batch.clip_features, lambda);
}

// Backpropagates d_logits and the extra feature-tap gradient through the
// network; returns d(loss)/d(input) when `want_input` is set.
template <typename T>
Matrix<T> backprop(const StudentNet<T>& net, const ForwardPass<T>& fp, const Matrix<T>& d_logits,
                   const Matrix<T>* d_features, std::vector<DenseLayer<T>>* grads, bool want_input) {
  const std::size_t nl = net.layers.size();
  if (grads) {
    grads->resize(nl);
    auto& g = (*grads)[nl - 1];
    kernels::gemm_tn(fp.act.back(), d_logits, g.weight);
    g.bias.assign(d_logits.cols(), T{0});
    kernels::column_sums(d_logits, std::span<T>(g.bias));
  }
  Matrix<T> d_act;
  kernels::gemm_nt(d_logits, net.layers[nl - 1].weight, d_act);
  if (d_features) {
    auto a = d_act.flat();
    auto b = d_features->flat();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  }
  for (std::size_t l = nl - 1; l-- > 0;) {
    // through ReLU
    auto da = d_act.flat();
    auto pre = fp.pre[l].flat();
    for (std::size_t i = 0; i < da.size(); ++i)
      if (!(pre[i] > T{0})) da[i] = T{0};
    if (grads) {
      auto& g = (*grads)[l];
      kernels::gemm_tn(fp.act[l], d_act, g.weight);
      g.bias.assign(d_act.cols(), T{0});
      kernels::column_sums(d_act, std::span<T>(g.bias));
    }
    if (l == 0 && !want_input) break;
    Matrix<T> next;
    kernels::gemm_nt(d_act, net.layers[l].weight, next);
    d_act = std::move(next);
  }
  return want_input ? d_act : Matrix<T>{};
}

}  // namespace

template <typename T>
BackwardResult<T> backward(const StudentNet<T>& net, const DistillBatch<T>& batch,
                           const LinearProjection<T>* projection, const FusionConfig& cfg) {
  const auto fp = forward_batch(net, batch.inputs);
  const Matrix<T> fused = fused_features_for(batch, projection, cfg.lambda);
  LossGradients<T> lg;
  BackwardResult<T> out;
  out.loss = total_loss_with_grad<T>(
      LossInputs<T>{fp.logits, batch.fused_logits, fp.features(), fused, batch.labels}, cfg, lg);
  backprop(net, fp, lg.d_logits, &lg.d_student_features, &out.grads.layers, false);
  if (projection) {
    // fused = lambda * f_t + (1 - lambda) * (f_c W + b)
    const T scale = static_cast<T>(1.0 - cfg.lambda);
    LinearProjection<T> g;
    kernels::gemm_tn(batch.clip_features, lg.d_fused_features, g.weight);
    for (auto& w : g.weight.flat()) w *= scale;
    g.bias.assign(lg.d_fused_features.cols(), T{0});
    kernels::column_sums(lg.d_fused_features, std::span<T>(g.bias));
    for (auto& b : g.bias) b *= scale;
    out.grads.projection = std::move(g);
  }
  return out;
}

template <typename T>
LossBreakdown distill_loss(const StudentNet<T>& net, const DistillBatch<T>& batch,
                           const LinearProjection<T>* projection, const FusionConfig& cfg) {
  const auto fp = forward_batch(net, batch.inputs);
  const Matrix<T> fused = fused_features_for(batch, projection, cfg.lambda);
  return total_loss<T>(LossInputs<T>{fp.logits, batch.fused_logits, fp.features(), fused, batch.labels},
                       cfg);
}

template <typename T>
Matrix<T> input_gradient(const StudentNet<T>& net, const Matrix<T>& x,
                         std::span<const std::int64_t> labels) {
  if (labels.size() != x.rows()) require_same_shape(labels.size(), 1, x.rows(), 1, "input_gradient labels");
  const auto fp = forward_batch(net, x);
  Matrix<T> dz(fp.logits.rows(), fp.logits.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) cross_entropy_grad(fp.logits.row(i), labels[i], dz.row(i));
  return backprop<T>(net, fp, dz, nullptr, nullptr, true);
}

template <typename T>
TopK topk_accuracy(const Matrix<T>& logits, std::span<const std::int64_t> labels) {
  if (labels.size() != logits.rows()) require_same_shape(labels.size(), 1, logits.rows(), 1, "labels");
  if (labels.empty()) return {};
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(y));
    }
    const auto row = logits.row(i);
    const T zy = row[static_cast<std::size_t>(y)];
    std::size_t rank = 0;  // classes ranked above the label
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (row[k] > zy || (row[k] == zy && k < static_cast<std::size_t>(y))) ++rank;
    }
    hit1 += rank < 1;
    hit5 += rank < 5;
  }
  const double n = static_cast<double>(labels.size());
  return {100.0 * static_cast<double>(hit1) / n, 100.0 * static_cast<double>(hit5) / n};
}

template <typename T>
TopK evaluate(const StudentNet<T>& net, const Matrix<T>& inputs, std::span<const std::int64_t> labels) {
  return topk_accuracy(forward_batch(net, inputs).logits, labels);
}

std::vector<std::size_t> TrainConfig::decay_epochs() const {
  if (!lr_decay_epochs.empty()) return lr_decay_epochs;
  return {epochs / 2, (3 * epochs) / 4};
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw Error(ErrorCode::InvariantViolation, "learning_rate must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::InvariantViolation, "batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorCode::InvariantViolation, "momentum in [0,1)");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::InvariantViolation, "weight_decay must be >= 0");
  fusion.validate();
}

namespace {

template <typename T>
void sgd_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, T lr, T momentum,
              T decay) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

bool finite(const LossBreakdown& l) {
  return std::isfinite(l.ce) && std::isfinite(l.logit_kl) && std::isfinite(l.feat) && std::isfinite(l.total);
}

}  // namespace

template <typename T>
TrainResult<T> train(const TrainSet<T>& data, const EvalSet<T>& val, const TrainConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n = data.inputs.rows();
  if (n == 0 || data.labels.size() != n || data.fused_logits.rows() != n ||
      data.teacher_features.rows() != n || data.clip_features.rows() != n) {
    throw Error(ErrorCode::ShapeMismatch, "training tensors disagree on sample count");
  }

  std::vector<std::size_t> sizes{data.inputs.cols()};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(data.teacher_features.cols());
  sizes.push_back(data.fused_logits.cols());

  // One engine drives initialization and every shuffle.
  std::mt19937_64 rng(cfg.seed);
  TrainResult<T> result;
  result.net = init_student<T>(sizes, rng());
  if (data.clip_features.cols() != data.teacher_features.cols()) {
    result.projection = LinearProjection<T>::init(data.clip_features.cols(), data.teacher_features.cols(), rng());
  }

  std::vector<T> params = result.net.flatten();
  std::vector<T> velocity(params.size(), T{0});
  std::vector<T> proj_velocity_w, proj_velocity_b;
  if (result.projection) {
    proj_velocity_w.assign(result.projection->weight.size(), T{0});
    proj_velocity_b.assign(result.projection->bias.size(), T{0});
  }
  // Weight decay applies to weight matrices only.
  std::vector<T> decay_mask;
  for (const auto& l : result.net.layers) {
    decay_mask.insert(decay_mask.end(), l.weight.size(), T{1});
    decay_mask.insert(decay_mask.end(), l.bias.size(), T{0});
  }

  const auto decays = cfg.decay_epochs();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  double lr = cfg.learning_rate;
  const T mom = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto d : decays)
      if (d == epoch && epoch > 0) lr *= cfg.lr_decay_factor;
    std::shuffle(order.begin(), order.end(), rng);

    LossBreakdown sum;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t e = std::min(n, b + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + b, e - b);
      const Matrix<T> x = data.inputs.gather_rows(idx);
      const Matrix<T> zf = data.fused_logits.gather_rows(idx);
      const Matrix<T> ft = data.teacher_features.gather_rows(idx);
      const Matrix<T> fc = data.clip_features.gather_rows(idx);
      std::vector<std::int64_t> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = data.labels[idx[i]];

      auto br = backward<T>(result.net, DistillBatch<T>{x, y, zf, ft, fc},
                            result.projection ? &*result.projection : nullptr, cfg.fusion);
      if (!finite(br.loss)) {
        throw DivergenceError(epoch, "non-finite loss in epoch " + std::to_string(epoch) +
                                         "; last good epoch " + std::to_string(epoch));
      }
      const double w = static_cast<double>(e - b);
      sum.ce += br.loss.ce * w;
      sum.logit_kl += br.loss.logit_kl * w;
      sum.feat += br.loss.feat * w;
      sum.total += br.loss.total * w;

      StudentNet<T> gnet;
      gnet.sizes = result.net.sizes;
      gnet.layers = std::move(br.grads.layers);
      const std::vector<T> grad = gnet.flatten();
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = mom * velocity[i] + grad[i] + wd * decay_mask[i] * params[i];
        params[i] -= static_cast<T>(lr) * velocity[i];
      }
      result.net.unflatten(params);
      if (result.projection) {
        auto& p = *result.projection;
        const auto& g = *br.grads.projection;
        sgd_step(p.weight.flat(), g.weight.flat(), std::span<T>(proj_velocity_w), static_cast<T>(lr), mom, wd);
        sgd_step(std::span<T>(p.bias), std::span<const T>(g.bias), std::span<T>(proj_velocity_b),
                 static_cast<T>(lr), mom, T{0});
      }
    }
    for (T v : params) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw DivergenceError(epoch, "non-finite parameter after epoch " + std::to_string(epoch));
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    const double inv = 1.0 / static_cast<double>(n);
    rec.loss = {sum.ce * inv, sum.logit_kl * inv, sum.feat * inv, sum.total * inv};
    rec.val_top1 = val.inputs.rows() ? evaluate(result.net, val.inputs, val.labels).top1 : 0.0;
    result.report.epochs.push_back(rec);
  }
  if (val.inputs.rows()) result.report.final_val = evaluate(result.net, val.inputs, val.labels);
  result.report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

template <typename T>
void save_student(const StudentNet<T>& net, const LinearProjection<T>* projection,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  KeyValueFile kv;
  std::string sizes;
  for (std::size_t i = 0; i < net.sizes.size(); ++i) sizes += (i ? "," : "") + std::to_string(net.sizes[i]);
  kv.set("sizes", sizes);
  kv.set("activation", "relu");
  kv.set("feature_tap", std::to_string(net.sizes.size() - 2));
  kv.set("precision", sizeof(T) == 8 ? "64" : "32");
  kv.set("projection", projection ? "true" : "false");
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    const std::string stem = "layer" + std::to_string(l);
    write_tensor(CacheTensor::from_matrix(Role::other, layer.weight), dir / (stem + "_weight.rkdc"));
    Matrix<T> b(1, layer.bias.size(), layer.bias);
    auto bt = CacheTensor::from_matrix(Role::other, b);
    bt.shape = {layer.bias.size()};
    write_tensor(bt, dir / (stem + "_bias.rkdc"));
  }
  if (projection) {
    write_tensor(CacheTensor::from_matrix(Role::other, projection->weight), dir / "projection_weight.rkdc");
    Matrix<T> b(1, projection->bias.size(), projection->bias);
    auto bt = CacheTensor::from_matrix(Role::other, b);
    bt.shape = {projection->bias.size()};
    write_tensor(bt, dir / "projection_bias.rkdc");
  }
  kv.save(dir / "student.txt");
}

template <typename T>
std::pair<StudentNet<T>, std::optional<LinearProjection<T>>> load_student(const std::filesystem::path& dir) {
  const auto kv = KeyValueFile::load(dir / "student.txt");
  std::vector<std::size_t> sizes;
  for (const auto& s : kv.get_list("sizes")) sizes.push_back(std::stoul(s));
  StudentNet<T> net = init_student<T>(sizes, 0);
  auto load_vec = [&](const std::string& file, std::size_t want) {
    const auto m = read_tensor(dir / file).to_matrix();
    if (m.size() != want) throw Error(ErrorCode::ShapeMismatch, file);
    std::vector<T> v(want);
    for (std::size_t i = 0; i < want; ++i) v[i] = static_cast<T>(m.flat()[i]);
    return v;
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    auto& layer = net.layers[l];
    const std::string stem = "layer" + std::to_string(l);
    auto w = load_vec(stem + "_weight.rkdc", layer.weight.size());
    std::copy(w.begin(), w.end(), layer.weight.data());
    layer.bias = load_vec(stem + "_bias.rkdc", layer.bias.size());
  }
  std::optional<LinearProjection<T>> proj;
  if (kv.get_bool("projection", false)) {
    const auto wm = read_tensor(dir / "projection_weight.rkdc");
    LinearProjection<T> p{wm.to_matrix().template cast<T>(), {}};
    p.bias = load_vec("projection_bias.rkdc", p.weight.cols());
    proj = std::move(p);
  }
  return {std::move(net), std::move(proj)};
}

#define FKD_INSTANTIATE(T)                                                                           \
  template struct StudentNet<T>;                                                                     \
  template StudentNet<T> init_student<T>(const std::vector<std::size_t>&, std::uint64_t);            \
  template ForwardPass<T> forward_batch<T>(const StudentNet<T>&, const Matrix<T>&);                  \
  template std::pair<std::vector<T>, std::vector<T>> forward<T>(const StudentNet<T>&,                \
                                                                std::span<const T>);                 \
  template BackwardResult<T> backward<T>(const StudentNet<T>&, const DistillBatch<T>&,               \
                                         const LinearProjection<T>*, const FusionConfig&);           \
  template LossBreakdown distill_loss<T>(const StudentNet<T>&, const DistillBatch<T>&,               \
                                         const LinearProjection<T>*, const FusionConfig&);           \
  template Matrix<T> input_gradient<T>(const StudentNet<T>&, const Matrix<T>&,                       \
                                       std::span<const std::int64_t>);                               \
  template TopK topk_accuracy<T>(const Matrix<T>&, std::span<const std::int64_t>);                   \
  template TopK evaluate<T>(const StudentNet<T>&, const Matrix<T>&, std::span<const std::int64_t>);  \
  template TrainResult<T> train<T>(const TrainSet<T>&, const EvalSet<T>&, const TrainConfig&);       \
  template void save_student<T>(const StudentNet<T>&, const LinearProjection<T>*,                    \
                                const std::filesystem::path&);                                       \
  template std::pair<StudentNet<T>, std::optional<LinearProjection<T>>> load_student<T>(             \
      const std::filesystem::path&);

FKD_INSTANTIATE(float)
FKD_INSTANTIATE(double)
#undef FKD_INSTANTIATE

}  // namespace fkd
