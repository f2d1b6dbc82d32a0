#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fusekd/cache_io.hpp"
#include "fusekd/diagnostics.hpp"
#include "fusekd/kv.hpp"

namespace fkd {

// Planned fraction of samples per confidence quadrant; the uncertain-incorrect
// share is whatever remains.
struct QuadrantProfile {
  double certain_correct = 0.7;
  double certain_incorrect = 0.1;
  double uncertain_correct = 0.1;

  double uncertain_incorrect() const { return 1.0 - certain_correct - certain_incorrect - uncertain_correct; }
};

struct SynthSpec {
  std::size_t samples = 2000;
  std::size_t classes = 10;
  std::size_t prompts = 4;
  std::size_t teacher_dim = 32;
  std::size_t clip_dim = 48;
  ImageGeometry image{1, 16, 16};
  QuadrantProfile teacher{0.70, 0.10, 0.10};
  QuadrantProfile clip{0.55, 0.10, 0.20};
  // Fraction of samples on which exactly one of the two teachers is
  // certain and correct.
  double complementarity = 0.3;
  // Fraction of the teacher's certain-incorrect samples on which the
  // zero-shot branch is certain and correct.
  double rescue = 0.5;
  double certainty_threshold = 0.5;
  double clip_temperature = 100.0;
  std::size_t styles = 3;       // sub-populations per class
  double pixel_noise = 0.15;    // per-pixel Gaussian noise std
  double mix_max = 0.35;        // max weight of a confuser class prototype
  double prompt_noise = 1.0;    // per-prompt logit jitter std (mean-free over prompts)
  double feature_noise = 0.1;
  std::uint64_t seed = 1;

  // Throws UnrealizableSpec when no plan satisfies the profiles.
  void validate() const;

  static SynthSpec from_kv(const KeyValueFile& kv, const std::string& prefix = "synth.");
  void to_kv(KeyValueFile& kv, const std::string& prefix = "synth.") const;
};

struct SynthPlan {
  std::vector<Quadrant> teacher;
  std::vector<Quadrant> clip;
  double realized_complementarity = 0.0;
  QuadrantCounts teacher_counts() const;
  QuadrantCounts clip_counts() const;
};

// Writes a complete bundle into `dir`: images, labels, teacher logits and
// features, per-prompt zero-shot logits and features, plus the planned
// quadrants (`plan_teacher.rkdc`, `plan_clip.rkdc`, i64 codes in
// certain_correct, certain_incorrect, uncertain_correct, uncertain_incorrect
// order) and the generating spec (`synth.txt`).
// Teacher features are built from its predicted class probabilities only;
// zero-shot features encode the true class, the blended confuser and the style.
BundleManifest gen_synth(const SynthSpec& spec, const std::filesystem::path& dir);

SynthPlan load_plan(const std::filesystem::path& dir);

}  // namespace fkd
