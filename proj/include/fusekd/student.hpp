#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fusekd/fusion.hpp"
#include "fusekd/losses.hpp"
#include "fusekd/matrix.hpp"

namespace fkd {

template <typename T>
struct DenseLayer {
  Matrix<T> weight;  // fan_in x fan_out
  std::vector<T> bias;
};

// Feed-forward classifier: ReLU hidden layers, identity output. The
// post-activation of the last hidden layer is the feature tap.
template <typename T>
struct StudentNet {
  std::vector<std::size_t> sizes;  // [D_in, H_1, ..., H_L, K]
  std::vector<DenseLayer<T>> layers;

  std::size_t input_dim() const noexcept { return sizes.front(); }
  std::size_t class_count() const noexcept { return sizes.back(); }
  std::size_t feature_dim() const noexcept { return sizes[sizes.size() - 2]; }
  std::size_t parameter_count() const noexcept;

  // Every weight then bias, layer by layer.
  std::vector<T> flatten() const;
  void unflatten(std::span<const T> params);
};

// Uniform +-sqrt(1/fan_in) weights and biases; at least one hidden layer.
template <typename T>
StudentNet<T> init_student(const std::vector<std::size_t>& sizes, std::uint64_t seed);

template <typename T>
struct ForwardPass {
  std::vector<Matrix<T>> pre;   // pre-activations per hidden layer
  std::vector<Matrix<T>> act;   // act[0] = input, act[l] = ReLU(pre[l-1])
  Matrix<T> logits;

  const Matrix<T>& features() const { return act.back(); }
};

template <typename T>
ForwardPass<T> forward_batch(const StudentNet<T>& net, const Matrix<T>& x);

// Single-sample forward: (features, logits).
template <typename T>
std::pair<std::vector<T>, std::vector<T>> forward(const StudentNet<T>& net, std::span<const T> x);

template <typename T>
struct StudentGradients {
  std::vector<DenseLayer<T>> layers;
  std::optional<LinearProjection<T>> projection;
};

// Frozen supervision for a batch. When `projection` is set, clip features are
// projected before fusion; otherwise they must already match the tap width.
template <typename T>
struct DistillBatch {
  const Matrix<T>& inputs;
  std::span<const std::int64_t> labels;
  const Matrix<T>& fused_logits;
  const Matrix<T>& teacher_features;
  const Matrix<T>& clip_features;
};

template <typename T>
struct BackwardResult {
  LossBreakdown loss;
  StudentGradients<T> grads;
};

// Exact gradients of the mean-reduced objective with respect to every
// network parameter and, when present, the feature projection.
template <typename T>
BackwardResult<T> backward(const StudentNet<T>& net, const DistillBatch<T>& batch,
                           const LinearProjection<T>* projection, const FusionConfig& cfg);

// Loss only; same arithmetic as backward.
template <typename T>
LossBreakdown distill_loss(const StudentNet<T>& net, const DistillBatch<T>& batch,
                           const LinearProjection<T>* projection, const FusionConfig& cfg);

// Per-sample gradient of cross-entropy with respect to the input pixels.
template <typename T>
Matrix<T> input_gradient(const StudentNet<T>& net, const Matrix<T>& x,
                         std::span<const std::int64_t> labels);

struct TopK {
  double top1 = 0.0;  // percent
  double top5 = 0.0;  // percent
};

// A sample counts for top-k when fewer than k classes outrank its label; ties
// go to the lower class index.
template <typename T>
TopK topk_accuracy(const Matrix<T>& logits, std::span<const std::int64_t> labels);

template <typename T>
TopK evaluate(const StudentNet<T>& net, const Matrix<T>& inputs, std::span<const std::int64_t> labels);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Epochs (0-based) at whose start the rate is multiplied by lr_decay_factor.
  // Empty means 50% and 75% of the run.
  std::vector<std::size_t> lr_decay_epochs;
  double lr_decay_factor = 0.1;
  std::uint64_t seed = 1;
  // Hidden widths before the tap layer; the tap itself is sized to D_T.
  std::vector<std::size_t> hidden = {128};
  FusionConfig fusion;

  std::vector<std::size_t> decay_epochs() const;
  void validate() const;
};

template <typename T>
struct TrainSet {
  Matrix<T> inputs;
  std::vector<std::int64_t> labels;
  Matrix<T> fused_logits;
  Matrix<T> teacher_features;
  Matrix<T> clip_features;
};

template <typename T>
struct EvalSet {
  Matrix<T> inputs;
  std::vector<std::int64_t> labels;
};

struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown loss;  // mean over the epoch's batches
  double val_top1 = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  TopK final_val;
  double seconds = 0.0;
};

template <typename T>
struct TrainResult {
  StudentNet<T> net;
  std::optional<LinearProjection<T>> projection;
  TrainReport report;
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t last_good_epoch, const std::string& what)
      : Error(ErrorCode::DivergenceDetected, what), last_good_epoch_(last_good_epoch) {}
  // Number of epochs completed before the non-finite loss.
  std::size_t last_good_epoch() const noexcept { return last_good_epoch_; }

 private:
  std::size_t last_good_epoch_;
};

// Mini-batch SGD with momentum and step decay. Deterministic for a fixed seed.
template <typename T>
TrainResult<T> train(const TrainSet<T>& data, const EvalSet<T>& val, const TrainConfig& cfg);

// Architecture manifest (`student.txt`) plus one tensor file per parameter block.
template <typename T>
void save_student(const StudentNet<T>& net, const LinearProjection<T>* projection,
                  const std::filesystem::path& dir);
template <typename T>
std::pair<StudentNet<T>, std::optional<LinearProjection<T>>> load_student(
    const std::filesystem::path& dir);

}  // namespace fkd
