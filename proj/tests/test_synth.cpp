#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "fusekd/diagnostics.hpp"
#include "fusekd/fusion.hpp"
#include "fusekd/pipeline.hpp"
#include "fusekd/synth.hpp"

using namespace fkd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "fusekd_tests" / "synth" / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double top1(const Matrix<double>& z, const std::vector<std::int64_t>& y) {
  return topk_accuracy(z, std::span<const std::int64_t>(y)).top1;
}

}  // namespace

TEST(Synth, QuadrantsMatchPlanExactly) {
  const auto dir = scratch("plan");
  SynthSpec s;
  s.samples = 3000;
  s.teacher = {0.70, 0.10, 0.10};
  s.clip = {0.55, 0.10, 0.20};
  gen_synth(s, dir);
  const auto b = load_bundle<float>(dir);
  const auto plan = load_plan(dir);
  EXPECT_EQ(quadrant_assignment(b.teacher_logits, b.labels, s.certainty_threshold), plan.teacher);
  EXPECT_EQ(quadrant_assignment(b.clip_logits, b.labels, s.certainty_threshold), plan.clip);
  const auto tc = quadrant_counts(b.teacher_logits, b.labels, s.certainty_threshold);
  EXPECT_EQ(tc.certain_correct, 2100u);
  EXPECT_EQ(tc.certain_incorrect, 300u);
  EXPECT_EQ(tc.uncertain_correct, 300u);
  EXPECT_EQ(tc.uncertain_incorrect, 300u);
  EXPECT_EQ(plan.teacher_counts(), tc);
  EXPECT_EQ(plan.clip_counts(), quadrant_counts(b.clip_logits, b.labels, s.certainty_threshold));
  EXPECT_NEAR(plan.realized_complementarity, s.complementarity, 1.0 / 3000);
}

TEST(Synth, ZeroShotCorrectsHalfOfConfidentErrors) {
  const auto dir = scratch("half");
  SynthSpec s;
  s.samples = 4000;
  s.teacher = {0.70, 0.10, 0.10};
  s.clip = {0.55, 0.10, 0.20};
  gen_synth(s, dir);
  const auto b = load_bundle<float>(dir);
  const auto plan = load_plan(dir);
  std::size_t teacher_ci = 0, rescued = 0;
  for (std::size_t i = 0; i < plan.teacher.size(); ++i) {
    if (plan.teacher[i] != Quadrant::certain_incorrect) continue;
    ++teacher_ci;
    rescued += plan.clip[i] == Quadrant::certain_correct;
  }
  EXPECT_GE(2 * rescued, teacher_ci);
  const auto before = quadrant_counts(b.teacher_logits, b.labels, 0.5);
  const auto after = quadrant_counts(fuse_logits(b.teacher_logits, b.clip_logits, 0.7), b.labels, 0.5);
  EXPECT_LT(after.certain_incorrect, before.certain_incorrect);
}

TEST(Synth, ComplementarityLiftsFusedAccuracy) {
  const auto dir = scratch("lift");
  SynthSpec s;
  s.samples = 10000;
  s.complementarity = 0.3;
  gen_synth(s, dir);
  const auto b = load_bundle<float>(dir);
  const double ft = top1(b.teacher_logits, b.labels), fc = top1(b.clip_logits, b.labels);
  const double ff = top1(fuse_logits(b.teacher_logits, b.clip_logits, 0.7), b.labels);
  EXPECT_GE(ff, std::max(ft, fc) + 1.0);
}

TEST(Synth, NoComplementarityNoGain) {
  const auto dir = scratch("flat");
  SynthSpec s;
  s.samples = 4000;
  s.teacher = {0.70, 0.10, 0.10};
  s.clip = s.teacher;
  s.complementarity = 0.0;
  s.rescue = 0.0;
  gen_synth(s, dir);
  const auto b = load_bundle<float>(dir);
  EXPECT_NEAR(load_plan(dir).realized_complementarity, 0.0, 1e-12);
  const double ft = top1(b.teacher_logits, b.labels);
  const double ff = top1(fuse_logits(b.teacher_logits, b.clip_logits, 0.7), b.labels);
  // Three binomial standard deviations at N = 4000, p = 0.8.
  EXPECT_NEAR(ff, ft, 300.0 * std::sqrt(0.8 * 0.2 / 4000.0));
}

TEST(Synth, SameSeedByteIdenticalDifferentSeedNot) {
  SynthSpec s;
  s.samples = 500;
  const auto a = scratch("a"), b = scratch("b"), c = scratch("c");
  gen_synth(s, a);
  gen_synth(s, b);
  s.seed = 2;
  gen_synth(s, c);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const auto name = e.path().filename();
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
    ++files;
  }
  EXPECT_GE(files, 10u);
  EXPECT_NE(slurp(a / "teacher_logits.rkdc"), slurp(c / "teacher_logits.rkdc"));
}

TEST(Synth, BundleShapeAndRanges) {
  const auto dir = scratch("ranges");
  SynthSpec s;
  s.samples = 1000;
  s.classes = 7;
  s.prompts = 3;
  s.image = {2, 5, 6};
  gen_synth(s, dir);
  const auto m = validate_bundle(dir);
  EXPECT_EQ(m.image, (ImageGeometry{2, 5, 6}));
  const auto b = load_bundle<double>(dir);
  std::map<std::int64_t, std::size_t> per_class;
  for (auto y : b.labels) ++per_class[y];
  EXPECT_EQ(per_class.size(), 7u);
  for (const auto& [y, count] : per_class) EXPECT_LE(count - 1000 / 7, 1u);
  for (double v : b.images->flat()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  for (double v : b.prompt_logits.values) ASSERT_LE(std::abs(v), m.clip_temperature);
}

TEST(Synth, PromptSlicesAverageToZeroShotLogits) {
  const auto dir = scratch("prompts");
  SynthSpec s;
  s.samples = 300;
  s.prompts = 5;
  s.prompt_noise = 2.0;
  gen_synth(s, dir);
  const auto b = load_bundle<double>(dir);
  const auto plan = load_plan(dir);
  EXPECT_EQ(quadrant_assignment(b.clip_logits, b.labels, 0.5), plan.clip);
  bool varied = false;
  for (std::size_t i = 0; i < 300 && !varied; ++i) varied = b.prompt_logits(0, i, 0) != b.prompt_logits(1, i, 0);
  EXPECT_TRUE(varied);
}

TEST(Synth, UnrealizableSpecs) {
  auto code = [](const SynthSpec& s) {
    try {
      s.validate();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::Io;
  };
  SynthSpec s;
  EXPECT_NO_THROW(s.validate());
  s.teacher = {0.8, 0.2, 0.1};
  EXPECT_EQ(code(s), ErrorCode::UnrealizableSpec);
  s = SynthSpec{};
  s.teacher.certain_correct = 1.2;
  EXPECT_EQ(code(s), ErrorCode::UnrealizableSpec);
  s = SynthSpec{};
  s.complementarity = 1.0;  // 0.70 + 0.55 cannot be fully disjoint
  EXPECT_EQ(code(s), ErrorCode::UnrealizableSpec);
  s = SynthSpec{};
  s.classes = 2;  // threshold 0.5 is not above 1/K
  EXPECT_EQ(code(s), ErrorCode::UnrealizableSpec);
  s = SynthSpec{};
  s.samples = 0;
  EXPECT_EQ(code(s), ErrorCode::UnrealizableSpec);
  s = SynthSpec{};
  s.mix_max = 1.5;
  EXPECT_EQ(code(s), ErrorCode::UnrealizableSpec);
  s = SynthSpec{};
  s.clip = s.teacher;
  s.complementarity = 0.0;  // no room outside the overlap for rescues
  EXPECT_EQ(code(s), ErrorCode::UnrealizableSpec);
  s.rescue = 0.0;
  EXPECT_NO_THROW(s.validate());
  s.rescue = 1.5;
  EXPECT_EQ(code(s), ErrorCode::UnrealizableSpec);
  EXPECT_THROW(gen_synth(s, scratch("never")), Error);
  EXPECT_FALSE(fs::exists(scratch("never") / "manifest.txt"));
}

TEST(Synth, KeyValueRoundTrip) {
  SynthSpec s;
  s.samples = 1234;
  s.classes = 5;
  s.image = {3, 4, 5};
  s.teacher = {0.6, 0.15, 0.1};
  s.complementarity = 0.25;
  s.pixel_noise = 0.3;
  s.seed = 99;
  KeyValueFile kv;
  s.to_kv(kv);
  const auto back = SynthSpec::from_kv(KeyValueFile::parse(kv.serialize()));
  EXPECT_EQ(back.samples, 1234u);
  EXPECT_EQ(back.classes, 5u);
  EXPECT_EQ(back.image, s.image);
  EXPECT_DOUBLE_EQ(back.teacher.certain_incorrect, 0.15);
  EXPECT_DOUBLE_EQ(back.complementarity, 0.25);
  EXPECT_DOUBLE_EQ(back.pixel_noise, 0.3);
  EXPECT_EQ(back.seed, 99u);
  KeyValueFile bad;
  bad.set("synth.samples", "-4");
  EXPECT_THROW(SynthSpec::from_kv(bad), Error);
}
