#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fusekd/cache_io.hpp"
#include "fusekd/diagnostics.hpp"
#include "fusekd/error.hpp"
#include "fusekd/fusion.hpp"
#include "fusekd/kv.hpp"
#include "fusekd/student.hpp"
#include "fusekd/synth.hpp"

namespace fkd {

enum class Stage { gen_synth, fuse, train, diagnose, attack, corrupt_eval, report };

inline constexpr Stage kAllStages[] = {Stage::gen_synth, Stage::fuse,         Stage::train, Stage::diagnose,
                                       Stage::attack,    Stage::corrupt_eval, Stage::report};

std::string_view to_string(Stage s);
// Accepts the stage names plus "all" (every stage except gen-synth).
std::vector<Stage> stages_from_string(const std::string& name);

// Config file keys (all optional except `bundle`):
//
//   bundle, out, seed, precision (32|64), stages (comma list)
//   alpha, lambda, beta, gamma, t_temp, certainty_threshold, logit_norm (raw|per_sample_standardize)
//   epochs, batch_size, learning_rate, momentum, weight_decay, lr_decay_epochs, lr_decay_factor,
//   hidden (comma list), val_fraction
//   diagnose.quadrants, diagnose.correlation, diagnose.ensemble, diagnose.features (bool)
//   ensemble.alphas (comma list), ensemble.target_scale, ensemble.residual
//   attack.eps (comma list), attack.pgd_iters, attack.pgd_step_fraction
//   corrupt.kinds (comma list), corrupt.severities (comma list)
//   report.csv, report.json (bool)
//   synth.* (see SynthSpec::from_kv), used by gen-synth
//
// Unknown keys are rejected.
struct RunConfig {
  std::filesystem::path bundle;
  std::filesystem::path out = "out";
  std::uint64_t seed = 1;
  int precision = 32;
  std::vector<Stage> stages;
  TrainConfig train;
  double val_fraction = 0.2;

  bool quadrants = true;
  bool correlation = true;
  bool ensemble = true;
  bool features = true;
  std::vector<double> ensemble_alphas = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::optional<double> target_scale;
  double residual = 0.0;

  std::vector<double> attack_eps = {0.001, 0.005, 0.01};
  int pgd_iters = 10;
  double pgd_step_fraction = 0.25;
  std::vector<CorruptionKind> corruption_kinds{kCorruptionKinds.begin(), kCorruptionKinds.end()};
  std::vector<int> severities = {1, 2, 3, 4, 5};

  bool report_csv = true;
  bool report_json = true;

  SynthSpec synth;

  const FusionConfig& fusion() const { return train.fusion; }
  FusionConfig& fusion() { return train.fusion; }

  // Throws ParseError or InvariantViolation naming the offending key.
  void validate() const;
  static RunConfig from_kv(const KeyValueFile& kv);
  static RunConfig load(const std::filesystem::path& path);
};

class StageError : public Error {
 public:
  StageError(Stage stage, ErrorCode cause, const std::string& what)
      : Error(ErrorCode::StageFailure, "stage '" + std::string(to_string(stage)) + "' failed: " + what),
        stage_(stage),
        cause_(cause) {}
  Stage stage() const noexcept { return stage_; }
  ErrorCode cause() const noexcept { return cause_; }

 private:
  Stage stage_;
  ErrorCode cause_;
};

// Everything a bundle holds, in working precision.
template <typename T>
struct LoadedBundle {
  BundleManifest manifest;
  std::vector<std::int64_t> labels;
  Matrix<double> teacher_logits;
  PromptLogitTensor prompt_logits;
  Matrix<double> clip_logits;  // prompt average
  Matrix<T> teacher_features;
  Matrix<T> clip_features;
  std::optional<Matrix<T>> images;
};

template <typename T>
LoadedBundle<T> load_bundle(const std::filesystem::path& dir);

// The first (1 - val_fraction) of samples train, the rest are held out.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
Split holdout_split(std::size_t samples, double val_fraction);

template <typename T>
struct StudentData {
  TrainSet<T> train;
  EvalSet<T> val;
};

// Fuses the bundle's logits under `fusion` and splits into train / held-out sets.
template <typename T>
StudentData<T> student_data(const LoadedBundle<T>& bundle, const FusionConfig& fusion, double val_fraction);

// Runs the configured stages in order. Throws StageError on the first failure.
void run_pipeline(const RunConfig& cfg);

// Output file names under RunConfig::out.
namespace outputs {
inline constexpr const char* kFusedLogits = "fused_logits.rkdc";
inline constexpr const char* kFusedFeatures = "fused_features.rkdc";
inline constexpr const char* kStudentDir = "student";
inline constexpr const char* kTrainCsv = "train.csv";
inline constexpr const char* kQuadrantsCsv = "quadrants.csv";
inline constexpr const char* kCorrelationCsv = "correlation.csv";
inline constexpr const char* kEnsembleCsv = "ensemble.csv";
inline constexpr const char* kFeaturesCsv = "features.csv";
inline constexpr const char* kAttackCsv = "robustness_attack.csv";
inline constexpr const char* kCorruptCsv = "robustness_corrupt.csv";
inline constexpr const char* kRobustnessCsv = "robustness.csv";
inline constexpr const char* kSummaryJson = "summary.json";
}  // namespace outputs

// Fixed CSV headers per report type.
namespace headers {
inline constexpr const char* kTrain = "epoch,ce,kl,feat,total,val_top1";
inline constexpr const char* kQuadrants = "quadrant,count,pct";
inline constexpr const char* kEnsemble = "alpha,bias_F,var_F,error_F";
inline constexpr const char* kRobustness = "kind,param,top1,top5";
}  // namespace headers

// Shortest round-tripping decimal for a double.
std::string format_number(double v);

}  // namespace fkd
