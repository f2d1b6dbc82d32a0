#include "fusekd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "fusekd/fusion.hpp"

namespace fkd {

namespace {

struct Counts {
  std::size_t cc = 0, ci = 0, uc = 0, ui = 0;
};

Counts plan_counts(const QuadrantProfile& p, std::size_t n, const char* who) {
  auto frac = [&](double f, const char* what) {
    if (!(f >= 0.0 && f <= 1.0)) {
      throw Error(ErrorCode::UnrealizableSpec, std::string(who) + " " + what + " fraction outside [0,1]");
    }
    return static_cast<std::size_t>(std::llround(f * static_cast<double>(n)));
  };
  Counts c;
  c.cc = frac(p.certain_correct, "certain_correct");
  c.ci = frac(p.certain_incorrect, "certain_incorrect");
  c.uc = frac(p.uncertain_correct, "uncertain_correct");
  if (c.cc + c.ci + c.uc > n || p.uncertain_incorrect() < -1e-12) {
    throw Error(ErrorCode::UnrealizableSpec, std::string(who) + " profile fractions sum above 1");
  }
  c.ui = n - c.cc - c.ci - c.uc;
  return c;
}

std::size_t target_overlap(const SynthSpec& s, const Counts& t, const Counts& c) {
  const auto n = static_cast<long long>(s.samples);
  const auto sym = std::llround(s.complementarity * static_cast<double>(s.samples));
  const long long diff = static_cast<long long>(t.cc + c.cc) - sym;
  const long long o = diff / 2;
  if (diff < 0 || o > static_cast<long long>(std::min(t.cc, c.cc)) ||
      static_cast<long long>(c.cc) - o > n - static_cast<long long>(t.cc)) {
    throw Error(ErrorCode::UnrealizableSpec,
                "complementarity " + std::to_string(s.complementarity) + " cannot be met by the profiles");
  }
  return static_cast<std::size_t>(o);
}

std::size_t rescue_count(const SynthSpec& s, const Counts& t, const Counts& c, std::size_t overlap) {
  if (!(s.rescue >= 0.0 && s.rescue <= 1.0)) throw Error(ErrorCode::UnrealizableSpec, "rescue outside [0,1]");
  const auto r = static_cast<std::size_t>(std::llround(s.rescue * static_cast<double>(t.ci)));
  if (r > c.cc - overlap) {
    throw Error(ErrorCode::UnrealizableSpec, "rescue " + std::to_string(s.rescue) +
                                                 " needs more zero-shot certain-correct samples outside the "
                                                 "teacher's than the complementarity leaves");
  }
  return r;
}

struct ConfidenceBands {
  double certain_lo, certain_hi, uncertain_lo, uncertain_hi;
};

ConfidenceBands bands(double thr, std::size_t k, bool peaked) {
  const double floor = 1.0 / static_cast<double>(k);
  ConfidenceBands b{};
  b.certain_lo = thr + (peaked ? 0.70 : 0.25) * (1.0 - thr);
  b.certain_hi = thr + (peaked ? 0.98 : 0.90) * (1.0 - thr);
  b.uncertain_lo = floor + 0.25 * (thr - floor);
  b.uncertain_hi = thr - 0.25 * (thr - floor);
  return b;
}

// Probability vector with `top` at probability p and `second` as runner-up.
// `share`, when given, is the runner-up's fraction of the remaining mass.
std::vector<double> plan_probabilities(std::size_t k, std::size_t top, std::size_t second, double p,
                                       std::optional<double> share_of_rest, std::mt19937_64& rng) {
  std::vector<double> prob(k, 0.0);
  prob[top] = p;
  if (k == 1) return prob;
  const double rest = 1.0 - p;
  if (k == 2) {
    prob[second] = rest;
    return prob;
  }
  std::uniform_real_distribution<double> share(0.4, 0.7);
  std::normal_distribution<double> jitter(0.0, 0.5);
  const double draw = share(rng);
  double s = std::min(rest * share_of_rest.value_or(draw), 0.9 * p);
  std::vector<double> w(k, 0.0);
  double wsum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    if (c == top || c == second) continue;
    w[c] = std::exp(jitter(rng));
    wsum += w[c];
  }
  for (int attempt = 0; attempt < 3; ++attempt) {
    double mx = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (c == top || c == second) continue;
      prob[c] = (rest - s) * (attempt == 2 ? 1.0 / static_cast<double>(k - 2) : w[c] / wsum);
      mx = std::max(mx, prob[c]);
    }
    prob[second] = s;
    if (mx < 0.9 * p) return prob;
    s = 0.9 * p;  // push mass onto the runner-up, then flatten
  }
  throw Error(ErrorCode::UnrealizableSpec, "cannot place confidence " + std::to_string(p));
}

// Smooth zero-mean field with max |value| = 1.
std::vector<double> smooth_field(const ImageGeometry& g, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> freq(0, 3);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi), amp(0.5, 1.0);
  std::vector<double> f(g.size(), 0.0);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (int t = 0; t < 4; ++t) {
      const int fx = freq(rng), fy = freq(rng) + (fx == 0 ? 1 : 0);
      const double ph = phase(rng), a = amp(rng);
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x) {
          f[c * g.height * g.width + y * g.width + x] +=
              a * std::cos(2.0 * std::numbers::pi *
                               (fx * static_cast<double>(x) / static_cast<double>(g.width) +
                                fy * static_cast<double>(y) / static_cast<double>(g.height)) +
                           ph);
        }
    }
  const double mean = std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(f.size());
  double mx = 0.0;
  for (auto& v : f) {
    v -= mean;
    mx = std::max(mx, std::abs(v));
  }
  if (mx > 0.0)
    for (auto& v : f) v /= mx;
  return f;
}

std::int64_t quadrant_code(Quadrant q) { return static_cast<std::int64_t>(q); }

}  // namespace

void SynthSpec::validate() const {
  if (samples == 0 || classes < 2 || prompts == 0 || teacher_dim == 0 || clip_dim == 0 || image.size() == 0 ||
      styles == 0) {
    throw Error(ErrorCode::UnrealizableSpec, "all synthetic dimensions must be positive and K >= 2");
  }
  if (!(certainty_threshold > 1.0 / static_cast<double>(classes) && certainty_threshold < 1.0)) {
    throw Error(ErrorCode::UnrealizableSpec, "certainty threshold must lie in (1/K, 1)");
  }
  if (!(clip_temperature > 0.0)) throw Error(ErrorCode::UnrealizableSpec, "clip_temperature must be > 0");
  if (!(complementarity >= 0.0 && complementarity <= 1.0)) {
    throw Error(ErrorCode::UnrealizableSpec, "complementarity outside [0,1]");
  }
  if (!(pixel_noise >= 0.0 && mix_max >= 0.0 && mix_max <= 1.0 && prompt_noise >= 0.0 && feature_noise >= 0.0)) {
    throw Error(ErrorCode::UnrealizableSpec, "noise levels must be non-negative, mix_max in [0,1]");
  }
  const auto t = plan_counts(teacher, samples, "teacher");
  const auto c = plan_counts(clip, samples, "clip");
  const auto uncertain = t.uc + t.ui + c.uc + c.ui;
  const auto b = bands(certainty_threshold, classes, false);
  if (uncertain > 0 && !(b.uncertain_hi > b.uncertain_lo && b.uncertain_lo > 1.0 / static_cast<double>(classes))) {
    throw Error(ErrorCode::UnrealizableSpec, "no uncertain confidence band between 1/K and the threshold");
  }
  rescue_count(*this, t, c, target_overlap(*this, t, c));
}

SynthSpec SynthSpec::from_kv(const KeyValueFile& kv, const std::string& p) {
  SynthSpec s;
  auto sz = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(p + key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw Error(ErrorCode::ParseError, "key '" + p + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  auto dbl = [&](const char* key, double fallback) { return kv.get_double(p + key, fallback); };
  s.samples = sz("samples", s.samples);
  s.classes = sz("classes", s.classes);
  s.prompts = sz("prompts", s.prompts);
  s.teacher_dim = sz("teacher_dim", s.teacher_dim);
  s.clip_dim = sz("clip_dim", s.clip_dim);
  s.image.channels = sz("image_channels", s.image.channels);
  s.image.height = sz("image_height", s.image.height);
  s.image.width = sz("image_width", s.image.width);
  s.teacher.certain_correct = dbl("teacher_certain_correct", s.teacher.certain_correct);
  s.teacher.certain_incorrect = dbl("teacher_certain_incorrect", s.teacher.certain_incorrect);
  s.teacher.uncertain_correct = dbl("teacher_uncertain_correct", s.teacher.uncertain_correct);
  s.clip.certain_correct = dbl("clip_certain_correct", s.clip.certain_correct);
  s.clip.certain_incorrect = dbl("clip_certain_incorrect", s.clip.certain_incorrect);
  s.clip.uncertain_correct = dbl("clip_uncertain_correct", s.clip.uncertain_correct);
  s.complementarity = dbl("complementarity", s.complementarity);
  s.rescue = dbl("rescue", s.rescue);
  s.certainty_threshold = dbl("certainty_threshold", s.certainty_threshold);
  s.clip_temperature = dbl("clip_temperature", s.clip_temperature);
  s.styles = sz("styles", s.styles);
  s.pixel_noise = dbl("pixel_noise", s.pixel_noise);
  s.mix_max = dbl("mix_max", s.mix_max);
  s.prompt_noise = dbl("prompt_noise", s.prompt_noise);
  s.feature_noise = dbl("feature_noise", s.feature_noise);
  s.seed = kv.get_u64(p + "seed", s.seed);
  return s;
}

void SynthSpec::to_kv(KeyValueFile& kv, const std::string& p) const {
  auto num = [](double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
  };
  kv.set(p + "samples", std::to_string(samples));
  kv.set(p + "classes", std::to_string(classes));
  kv.set(p + "prompts", std::to_string(prompts));
  kv.set(p + "teacher_dim", std::to_string(teacher_dim));
  kv.set(p + "clip_dim", std::to_string(clip_dim));
  kv.set(p + "image_channels", std::to_string(image.channels));
  kv.set(p + "image_height", std::to_string(image.height));
  kv.set(p + "image_width", std::to_string(image.width));
  kv.set(p + "teacher_certain_correct", num(teacher.certain_correct));
  kv.set(p + "teacher_certain_incorrect", num(teacher.certain_incorrect));
  kv.set(p + "teacher_uncertain_correct", num(teacher.uncertain_correct));
  kv.set(p + "clip_certain_correct", num(clip.certain_correct));
  kv.set(p + "clip_certain_incorrect", num(clip.certain_incorrect));
  kv.set(p + "clip_uncertain_correct", num(clip.uncertain_correct));
  kv.set(p + "complementarity", num(complementarity));
  kv.set(p + "rescue", num(rescue));
  kv.set(p + "certainty_threshold", num(certainty_threshold));
  kv.set(p + "clip_temperature", num(clip_temperature));
  kv.set(p + "styles", std::to_string(styles));
  kv.set(p + "pixel_noise", num(pixel_noise));
  kv.set(p + "mix_max", num(mix_max));
  kv.set(p + "prompt_noise", num(prompt_noise));
  kv.set(p + "feature_noise", num(feature_noise));
  kv.set(p + "seed", std::to_string(seed));
}

QuadrantCounts SynthPlan::teacher_counts() const {
  QuadrantCounts c;
  for (auto q : teacher) ++c[q];
  return c;
}

QuadrantCounts SynthPlan::clip_counts() const {
  QuadrantCounts c;
  for (auto q : clip) ++c[q];
  return c;
}

BundleManifest gen_synth(const SynthSpec& spec, const std::filesystem::path& dir) {
  spec.validate();
  const std::size_t n = spec.samples, k = spec.classes, groups = k * spec.styles;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Labels (balanced), styles, and per-sample confuser classes.
  std::vector<std::int64_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::int64_t>(i % k);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<std::size_t> style(n), confuser(n), group(n);
  std::uniform_int_distribution<std::size_t> pick_style(0, spec.styles - 1), pick_other(1, k - 1);
  for (std::size_t i = 0; i < n; ++i) {
    style[i] = pick_style(rng);
    confuser[i] = (static_cast<std::size_t>(labels[i]) + pick_other(rng)) % k;
    group[i] = static_cast<std::size_t>(labels[i]) * spec.styles + style[i];
  }

  // Systematic error structure: per-group difficulty keys and wrong classes.
  std::vector<double> teacher_key(groups), clip_key(groups), jitter_t(n), jitter_c(n);
  // Both teachers confuse a group with the same wrong class.
  std::vector<std::size_t> wrong_class(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t y = g / spec.styles;
    teacher_key[g] = unit(rng);
    clip_key[g] = unit(rng);
    wrong_class[g] = (y + pick_other(rng)) % k;
  }
  for (std::size_t i = 0; i < n; ++i) {
    jitter_t[i] = unit(rng);
    jitter_c[i] = unit(rng);
  }

  // Teacher plan: hardest samples (lowest group key) become errors.
  const auto tc = plan_counts(spec.teacher, n, "teacher");
  const auto cc = plan_counts(spec.clip, n, "clip");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ka = teacher_key[group[a]], kb = teacher_key[group[b]];
    return ka != kb ? ka < kb : jitter_t[a] < jitter_t[b];
  });
  SynthPlan plan;
  plan.teacher.assign(n, Quadrant::certain_correct);
  plan.clip.assign(n, Quadrant::uncertain_correct);
  {
    std::size_t pos = 0;
    for (std::size_t j = 0; j < tc.ci; ++j) plan.teacher[order[pos++]] = Quadrant::certain_incorrect;
    for (std::size_t j = 0; j < tc.ui; ++j) plan.teacher[order[pos++]] = Quadrant::uncertain_incorrect;
    for (std::size_t j = 0; j < tc.uc; ++j) plan.teacher[order[pos++]] = Quadrant::uncertain_correct;
  }

  // Zero-shot plan: certain-correct overlap with the teacher's is fixed by
  // the complementarity; outside it, prefer samples the teacher gets wrong.
  const std::size_t overlap = target_overlap(spec, tc, cc);
  auto clip_rank = [&](std::size_t a, std::size_t b) {
    const double ka = clip_key[group[a]], kb = clip_key[group[b]];
    return ka != kb ? ka > kb : jitter_c[a] > jitter_c[b];  // easiest first
  };
  std::vector<std::size_t> inside, outside;
  for (std::size_t i = 0; i < n; ++i) (plan.teacher[i] == Quadrant::certain_correct ? inside : outside).push_back(i);
  std::sort(inside.begin(), inside.end(), clip_rank);
  // Outside the overlap: the rescued share of the teacher's confident
  // errors first, then its other mistakes, then its uncertain hits.
  const std::size_t rescued = rescue_count(spec, tc, cc, overlap);
  std::vector<int> outside_rank(n, 0);
  {
    std::vector<std::size_t> ci;
    for (auto i : outside)
      if (plan.teacher[i] == Quadrant::certain_incorrect) ci.push_back(i);
    std::sort(ci.begin(), ci.end(), clip_rank);
    for (auto i : outside) {
      outside_rank[i] = plan.teacher[i] == Quadrant::uncertain_incorrect ? 1
                        : plan.teacher[i] == Quadrant::uncertain_correct ? 2
                                                                          : 3;
    }
    for (std::size_t j = 0; j < rescued; ++j) outside_rank[ci[j]] = 0;
  }
  std::sort(outside.begin(), outside.end(), [&](std::size_t a, std::size_t b) {
    return outside_rank[a] != outside_rank[b] ? outside_rank[a] < outside_rank[b] : clip_rank(a, b);
  });
  std::vector<bool> clip_cc(n, false);
  for (std::size_t j = 0; j < overlap; ++j) clip_cc[inside[j]] = true;
  for (std::size_t j = 0; j < cc.cc - overlap; ++j) clip_cc[outside[j]] = true;
  // Remaining zero-shot quadrants follow the teacher's: its mistakes take
  // the zero-shot mistakes first.
  auto teacher_rank = [&](std::size_t i) {
    switch (plan.teacher[i]) {
      case Quadrant::certain_incorrect: return 0;
      case Quadrant::uncertain_incorrect: return 1;
      case Quadrant::uncertain_correct: return 2;
      default: return 3;
    }
  };
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < n; ++i) {
    if (clip_cc[i]) plan.clip[i] = Quadrant::certain_correct;
    else rest.push_back(i);
  }
  std::sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) {
    const int ra = teacher_rank(a), rb = teacher_rank(b);
    return ra != rb ? ra < rb : clip_rank(b, a);
  });
  {
    std::size_t pos = 0;
    for (std::size_t j = 0; j < cc.ci; ++j) plan.clip[rest[pos++]] = Quadrant::certain_incorrect;
    for (std::size_t j = 0; j < cc.ui; ++j) plan.clip[rest[pos++]] = Quadrant::uncertain_incorrect;
  }
  std::size_t sym = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sym += (plan.teacher[i] == Quadrant::certain_correct) != (plan.clip[i] == Quadrant::certain_correct);
  }
  plan.realized_complementarity = static_cast<double>(sym) / static_cast<double>(n);

  std::vector<double> mix_weight(n);
  {
    std::uniform_real_distribution<double> mix(0.0, spec.mix_max);
    for (auto& m : mix_weight) m = mix(rng);
  }

  // Logits realizing the plan exactly.
  const auto tb = bands(spec.certainty_threshold, k, false);
  const auto cb = bands(spec.certainty_threshold, k, true);
  Matrix<double> teacher_prob(n, k), clip_prob(n, k);
  Matrix<double> teacher_logits(n, k), clip_logits(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    auto build = [&](Quadrant q, std::size_t wrong, std::size_t dark, const ConfidenceBands& b,
                     std::optional<double> dark_share) {
      const bool correct = q == Quadrant::certain_correct || q == Quadrant::uncertain_correct;
      const bool certain = q == Quadrant::certain_correct || q == Quadrant::certain_incorrect;
      const std::size_t top = correct ? y : wrong;
      std::size_t second = correct ? dark : y;
      if (second == top) second = (top + 1) % k;
      const double p = certain ? b.certain_lo + (b.certain_hi - b.certain_lo) * unit(rng)
                               : b.uncertain_lo + (b.uncertain_hi - b.uncertain_lo) * unit(rng);
      return plan_probabilities(k, top, second, p, correct ? dark_share : std::nullopt, rng);
    };
    // Both models see how strongly the confuser is blended in.
    const double blend = spec.mix_max > 0.0 ? mix_weight[i] / spec.mix_max : 0.0;
    const auto pt = build(plan.teacher[i], wrong_class[group[i]], confuser[i], tb, 0.15 + 0.8 * blend);
    const auto pc = build(plan.clip[i], wrong_class[group[i]], confuser[i], cb, 0.15 + 0.8 * blend);
    double mean_t = 0.0, max_c = -1e300;
    for (std::size_t c = 0; c < k; ++c) {
      mean_t += std::log(pt[c]);
      max_c = std::max(max_c, std::log(pc[c]));
    }
    mean_t /= static_cast<double>(k);
    for (std::size_t c = 0; c < k; ++c) {
      teacher_prob(i, c) = pt[c];
      clip_prob(i, c) = pc[c];
      teacher_logits(i, c) = std::log(pt[c]) - mean_t;
      // tau-scaled cosine: top class sits at cosine 0.3
      clip_logits(i, c) = std::log(pc[c]) - max_c + 0.3 * spec.clip_temperature;
    }
  }

  // Prompt slices jitter around the zero-shot logits with zero mean over prompts.
  PromptLogitTensor prompts{spec.prompts, n, k, std::vector<double>(spec.prompts * n * k)};
  {
    std::vector<double> eta(spec.prompts);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        double mean = 0.0;
        for (auto& e : eta) {
          e = spec.prompts > 1 ? spec.prompt_noise * gauss(rng) : 0.0;
          mean += e;
        }
        mean /= static_cast<double>(spec.prompts);
        for (std::size_t m = 0; m < spec.prompts; ++m) prompts(m, i, c) = clip_logits(i, c) + eta[m] - mean;
      }
  }

  // Task-teacher features collapse onto its predicted classes; zero-shot
  // features describe what the image contains (class, blended confuser, style).
  Matrix<double> teacher_proto(k, spec.teacher_dim), clip_proto(k + spec.styles, spec.clip_dim);
  for (auto& v : teacher_proto.flat()) v = gauss(rng);
  for (auto& v : clip_proto.flat()) v = gauss(rng);
  Matrix<double> teacher_feat(n, spec.teacher_dim), clip_feat(n, spec.clip_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const double m = mix_weight[i];
    for (std::size_t d = 0; d < spec.teacher_dim; ++d) {
      double v = spec.feature_noise * gauss(rng);
      for (std::size_t c = 0; c < k; ++c) v += teacher_prob(i, c) * teacher_proto(c, d);
      teacher_feat(i, d) = std::max(v, 0.0);
    }
    for (std::size_t d = 0; d < spec.clip_dim; ++d) {
      clip_feat(i, d) = (1.0 - m) * clip_proto(y, d) + m * clip_proto(confuser[i], d) +
                        0.5 * clip_proto(k + style[i], d) + spec.feature_noise * gauss(rng);
    }
  }

  // Images: class prototype blended with a confuser, plus a style pattern and noise.
  std::vector<std::vector<double>> class_field(k), style_field(spec.styles);
  for (auto& f : class_field) f = smooth_field(spec.image, rng);
  for (auto& f : style_field) f = smooth_field(spec.image, rng);
  Matrix<double> images(n, spec.image.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mix_weight[i];
    const auto& a = class_field[static_cast<std::size_t>(labels[i])];
    const auto& b = class_field[confuser[i]];
    const auto& s = style_field[style[i]];
    for (std::size_t d = 0; d < spec.image.size(); ++d) {
      const double v = 0.5 + 0.2 * ((1.0 - m) * a[d] + m * b[d]) + 0.1 * s[d] + spec.pixel_noise * gauss(rng);
      images(i, d) = std::clamp(v, 0.0, 1.0);
    }
  }

  std::filesystem::create_directories(dir);
  BundleManifest manifest;
  manifest.sample_count = n;
  manifest.class_count = k;
  manifest.prompt_count = spec.prompts;
  manifest.teacher_feature_dim = spec.teacher_dim;
  manifest.clip_feature_dim = spec.clip_dim;
  manifest.clip_temperature = spec.clip_temperature;
  manifest.image = spec.image;
  for (std::size_t c = 0; c < k; ++c) manifest.class_names.push_back("class_" + std::to_string(c));

  add_to_bundle(manifest, dir, CacheTensor::from_labels(labels));
  add_to_bundle(manifest, dir, CacheTensor::from_matrix(Role::images, images));
  add_to_bundle(manifest, dir, CacheTensor::from_matrix(Role::teacher_logits, teacher_logits));
  add_to_bundle(manifest, dir, prompts.to_cache());
  add_to_bundle(manifest, dir, CacheTensor::from_matrix(Role::teacher_features, teacher_feat));
  add_to_bundle(manifest, dir, CacheTensor::from_matrix(Role::clip_features, clip_feat));
  std::vector<std::int64_t> pt(n), pc(n);
  for (std::size_t i = 0; i < n; ++i) {
    pt[i] = quadrant_code(plan.teacher[i]);
    pc[i] = quadrant_code(plan.clip[i]);
  }
  add_to_bundle(manifest, dir, CacheTensor::i64(Role::other, {n}, pt), "plan_teacher");
  add_to_bundle(manifest, dir, CacheTensor::i64(Role::other, {n}, pc), "plan_clip");
  write_manifest(manifest, dir);

  KeyValueFile meta;
  spec.to_kv(meta, "");
  std::ostringstream rc;
  rc.precision(17);
  rc << plan.realized_complementarity;
  meta.set("realized_complementarity", rc.str());
  meta.save(dir / "synth.txt");
  return manifest;
}

SynthPlan load_plan(const std::filesystem::path& dir) {
  SynthPlan plan;
  auto decode = [](const CacheTensor& t) {
    std::vector<Quadrant> out;
    for (auto v : t.ints()) {
      if (v < 0 || v > 3) throw Error(ErrorCode::InvariantViolation, "quadrant code " + std::to_string(v));
      out.push_back(static_cast<Quadrant>(v));
    }
    return out;
  };
  plan.teacher = decode(read_tensor(dir / "plan_teacher.rkdc"));
  plan.clip = decode(read_tensor(dir / "plan_clip.rkdc"));
  const auto meta = KeyValueFile::load(dir / "synth.txt");
  plan.realized_complementarity = meta.get_double("realized_complementarity");
  return plan;
}

}  // namespace fkd
