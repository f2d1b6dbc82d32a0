#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fusekd/pipeline.hpp"

using namespace fkd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "fusekd_tests" / "pipeline" / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename().string());
  return names;
}

std::vector<std::vector<std::string>> parse_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

const fs::path& small_bundle() {
  static const fs::path dir = [] {
    auto d = scratch("bundle");
    SynthSpec s;
    s.samples = 600;
    s.image = {1, 8, 8};
    s.teacher_dim = 8;
    s.clip_dim = 12;
    gen_synth(s, d);
    return d;
  }();
  return dir;
}

RunConfig small_config(const fs::path& out, int precision = 32) {
  KeyValueFile kv;
  kv.set("bundle", small_bundle().string());
  kv.set("out", out.string());
  kv.set("precision", std::to_string(precision));
  kv.set("epochs", "2");
  kv.set("hidden", "16");
  kv.set("learning_rate", "0.01");
  kv.set("corrupt.severities", "1,5");
  kv.set("attack.pgd_iters", "3");
  kv.set("stages", "all");
  return RunConfig::from_kv(kv);
}

ErrorCode parse_code(const std::string& text, std::string* message = nullptr) {
  try {
    RunConfig::from_kv(KeyValueFile::parse(text));
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.code();
  }
  return ErrorCode::Io;
}

}  // namespace

TEST(Config, DefaultsAndOverrides) {
  const auto c = RunConfig::from_kv(KeyValueFile::parse(
      "bundle = b\nalpha = 0.4\nhidden = 64, 32\nstages = fuse, train\nattack.eps = 0.002\n"
      "corrupt.kinds = gaussian_noise\nlogit_norm = per_sample_standardize\n"));
  EXPECT_EQ(c.bundle, fs::path("b"));
  EXPECT_DOUBLE_EQ(c.fusion().alpha, 0.4);
  EXPECT_DOUBLE_EQ(c.fusion().lambda, 0.7);
  EXPECT_DOUBLE_EQ(c.fusion().beta, 3.0);
  EXPECT_DOUBLE_EQ(c.fusion().gamma, 0.8);
  EXPECT_DOUBLE_EQ(c.fusion().t_temp, 3.0);
  EXPECT_EQ(c.fusion().logit_norm, LogitNorm::per_sample_standardize);
  EXPECT_EQ(c.train.hidden, (std::vector<std::size_t>{64, 32}));
  EXPECT_EQ(c.stages, (std::vector<Stage>{Stage::fuse, Stage::train}));
  EXPECT_EQ(c.attack_eps, std::vector<double>{0.002});
  EXPECT_EQ(c.corruption_kinds, std::vector<CorruptionKind>{CorruptionKind::gaussian_noise});
  EXPECT_EQ(c.precision, 32);
}

TEST(Config, ErrorsNameTheOffendingKey) {
  std::string msg;
  EXPECT_EQ(parse_code("bundle = b\nalhpa = 0.3\n", &msg), ErrorCode::ParseError);
  EXPECT_NE(msg.find("alhpa"), std::string::npos) << msg;
  EXPECT_EQ(parse_code("bundle = b\nepochs = many\n", &msg), ErrorCode::ParseError);
  EXPECT_NE(msg.find("epochs"), std::string::npos) << msg;
  EXPECT_EQ(parse_code("bundle = b\nhidden = 8, x\n", &msg), ErrorCode::ParseError);
  EXPECT_NE(msg.find("hidden"), std::string::npos) << msg;
  EXPECT_EQ(parse_code("bundle = b\nstages = fuse, nope\n", &msg), ErrorCode::ParseError);
  EXPECT_NE(msg.find("stages"), std::string::npos) << msg;
  EXPECT_EQ(parse_code("bundle = b\nlogit_norm = zscore\n", &msg), ErrorCode::ParseError);
  EXPECT_NE(msg.find("logit_norm"), std::string::npos) << msg;
  EXPECT_EQ(parse_code("bundle = b\nprecision = 16\n", &msg), ErrorCode::InvariantViolation);
  EXPECT_NE(msg.find("precision"), std::string::npos) << msg;
  EXPECT_EQ(parse_code("bundle = b\nalpha = 1.5\n"), ErrorCode::InvariantViolation);
  EXPECT_EQ(parse_code("bundle = b\ncorrupt.severities = 6\n", &msg), ErrorCode::InvariantViolation);
  EXPECT_NE(msg.find("corrupt.severities"), std::string::npos) << msg;
  EXPECT_EQ(parse_code("alpha = 0.5\n", &msg), ErrorCode::InvariantViolation);
  EXPECT_NE(msg.find("bundle"), std::string::npos) << msg;
}

TEST(Config, SynthKeysReachTheGenerator) {
  const auto c = RunConfig::from_kv(KeyValueFile::parse("bundle = b\nsynth.samples = 321\nsynth.seed = 7\n"));
  EXPECT_EQ(c.synth.samples, 321u);
  EXPECT_EQ(c.synth.seed, 7u);
}

TEST(Stages, Names) {
  for (auto s : kAllStages) EXPECT_EQ(stages_from_string(std::string(to_string(s))), std::vector<Stage>{s});
  const auto all = stages_from_string("all");
  EXPECT_EQ(all.size(), 6u);
  EXPECT_EQ(all.front(), Stage::fuse);
  EXPECT_EQ(all.back(), Stage::report);
  EXPECT_THROW(stages_from_string("Fuse"), Error);
}

TEST(Split, SizesAndOrder) {
  const auto s = holdout_split(10, 0.2);
  EXPECT_EQ(s.train, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(s.val, (std::vector<std::size_t>{8, 9}));
  EXPECT_THROW(holdout_split(10, 0.0), Error);
  EXPECT_THROW(holdout_split(10, 1.0), Error);
  EXPECT_THROW(holdout_split(3, 0.01), Error);
}

TEST(FormatNumber, RoundTrips) {
  for (double v : {0.0, -1.5, 0.1, 1.0 / 3.0, 6.02214076e23, 5e-324}) {
    EXPECT_EQ(std::strtod(format_number(v).c_str(), nullptr), v);
  }
}

TEST(StudentData, SplitsFusedTargets) {
  const auto b = load_bundle<double>(small_bundle());
  FusionConfig f;
  const auto d = student_data(b, f, 0.25);
  EXPECT_EQ(d.train.inputs.rows(), 450u);
  EXPECT_EQ(d.val.inputs.rows(), 150u);
  EXPECT_EQ(d.train.inputs.cols(), 64u);
  const auto z = fuse_logits(b.teacher_logits, b.clip_logits, f.alpha);
  for (std::size_t c = 0; c < z.cols(); ++c) EXPECT_DOUBLE_EQ(d.train.fused_logits(7, c), z(7, c));
  EXPECT_EQ(d.val.labels.front(), b.labels[450]);
}

TEST(Pipeline, FuseOnlyWritesExactlyTheFusedTensors) {
  const auto out = scratch("fuse_only");
  auto cfg = small_config(out);
  cfg.stages = {Stage::fuse};
  run_pipeline(cfg);
  EXPECT_EQ(listing(out), (std::set<std::string>{outputs::kFusedLogits, outputs::kFusedFeatures}));
  const auto z = read_tensor(out / outputs::kFusedLogits);
  EXPECT_EQ(z.role, Role::fused_logits);
  EXPECT_EQ(z.shape, (std::vector<std::uint64_t>{600, 10}));
  const auto f = read_tensor(out / outputs::kFusedFeatures);
  EXPECT_EQ(f.shape, (std::vector<std::uint64_t>{600, 8}));
}

TEST(Pipeline, GenSynthStageWritesAValidBundle) {
  const auto bundle = scratch("gen_bundle");
  KeyValueFile kv;
  kv.set("bundle", bundle.string());
  kv.set("out", scratch("gen_out").string());
  kv.set("stages", "gen-synth");
  kv.set("synth.samples", "200");
  run_pipeline(RunConfig::from_kv(kv));
  EXPECT_EQ(validate_bundle(bundle).sample_count, 200u);
}

TEST(Pipeline, FullRunEmitsEveryReportWithFixedHeaders) {
  const auto out = scratch("full");
  run_pipeline(small_config(out));
  const std::pair<const char*, const char*> fixed[] = {
      {outputs::kTrainCsv, headers::kTrain},        {outputs::kQuadrantsCsv, headers::kQuadrants},
      {outputs::kEnsembleCsv, headers::kEnsemble},  {outputs::kAttackCsv, headers::kRobustness},
      {outputs::kCorruptCsv, headers::kRobustness}, {outputs::kRobustnessCsv, headers::kRobustness}};
  for (const auto& [file, header] : fixed) {
    ASSERT_TRUE(fs::exists(out / file)) << file;
    std::istringstream in(slurp(out / file));
    std::string first;
    std::getline(in, first);
    EXPECT_EQ(first, header) << file;
  }
  // Every emitted CSV parses into rectangular rows of numbers after the label columns.
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().extension() != ".csv") continue;
    const auto rows = parse_csv(e.path());
    ASSERT_GE(rows.size(), 2u) << e.path();
    for (std::size_t r = 1; r < rows.size(); ++r) {
      ASSERT_EQ(rows[r].size(), rows[0].size()) << e.path() << " row " << r;
      for (std::size_t c = 1; c < rows[r].size(); ++c) {
        std::size_t pos = 0;
        EXPECT_NO_THROW(std::stod(rows[r][c], &pos)) << e.path();
        EXPECT_EQ(pos, rows[r][c].size()) << e.path() << " " << rows[r][c];
      }
    }
  }
  EXPECT_EQ(parse_csv(out / outputs::kTrainCsv).size(), 3u);
  EXPECT_EQ(parse_csv(out / outputs::kQuadrantsCsv).size(), 1u + 4u * 4u);
  EXPECT_EQ(parse_csv(out / outputs::kCorrelationCsv).size(), 11u);
  EXPECT_EQ(parse_csv(out / outputs::kEnsembleCsv).size(), 12u);
  // clean + (fgsm, pgd) x 3 eps, 5 kinds x 2 severities, plus the average row.
  EXPECT_EQ(parse_csv(out / outputs::kRobustnessCsv).size(), 1u + 7u + 10u + 1u);

  const auto j = nlohmann::json::parse(slurp(out / outputs::kSummaryJson));
  for (const char* key : {"config", "train", "quadrants", "ensemble", "correlation", "robustness"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["correlation"].size(), 10u);
  EXPECT_EQ(j["robustness"].back()["kind"], "corruption_average");
  for (const auto& r : j["robustness"]) {
    EXPECT_GE(r["top5"].get<double>(), r["top1"].get<double>());
    EXPECT_LE(r["top5"].get<double>(), 100.0);
  }
}

TEST(Pipeline, SixtyFourBitRunsAreBitIdentical) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  run_pipeline(small_config(a, 64));
  run_pipeline(small_config(b, 64));
  const auto names = listing(a);
  EXPECT_EQ(names, listing(b));
  for (const auto& n : names) {
    if (fs::is_directory(a / n)) {
      for (const auto& inner : listing(a / n)) EXPECT_EQ(slurp(a / n / inner), slurp(b / n / inner)) << inner;
    } else {
      EXPECT_EQ(slurp(a / n), slurp(b / n)) << n;
    }
  }
}

TEST(Pipeline, StageFailureNamesTheStage) {
  auto cfg = small_config(scratch("fail"));
  cfg.stages = {Stage::attack};
  try {
    run_pipeline(cfg);
    FAIL() << "attack without a trained student must fail";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), Stage::attack);
    EXPECT_EQ(e.cause(), ErrorCode::MissingFile);
    EXPECT_EQ(e.code(), ErrorCode::StageFailure);
    EXPECT_NE(std::string(e.what()).find("attack"), std::string::npos);
  }
  cfg.bundle = scratch("nowhere");
  cfg.stages = {Stage::fuse};
  try {
    run_pipeline(cfg);
    FAIL() << "missing bundle must fail";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), Stage::fuse);
    EXPECT_EQ(e.cause(), ErrorCode::MissingFile);
  }
}
