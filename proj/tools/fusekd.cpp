#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fusekd/pipeline.hpp"

// Exit codes: 0 success, 1 stage failure, 2 bad config or arguments.
int main(int argc, char** argv) {
  CLI::App app{"fusekd: fused-teacher distillation pipeline"};
  std::string config_path, stage, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  app.add_option("--config", config_path, "key = value run config")->required()->check(CLI::ExistingFile);
  app.add_option("--stage", stage,
                 "gen-synth, fuse, train, diagnose, attack, corrupt-eval, report or all "
                 "(default: the config's `stages`, else all)");
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  app.add_option("--out", out, "output directory (overrides the config)");
  CLI11_PARSE(app, argc, argv);

  fkd::RunConfig cfg;
  try {
    cfg = fkd::RunConfig::load(config_path);
    if (!stage.empty()) cfg.stages = fkd::stages_from_string(stage);
    if (cfg.stages.empty()) cfg.stages = fkd::stages_from_string("all");
    if (seed) cfg.seed = *seed;
    if (precision) cfg.precision = *precision;
    if (!out.empty()) cfg.out = out;
    cfg.validate();
  } catch (const fkd::Error& e) {
    std::cerr << "fusekd: config error [" << fkd::to_string(e.code()) << "]: " << e.what() << '\n';
    return 2;
  }

  try {
    fkd::run_pipeline(cfg);
  } catch (const fkd::StageError& e) {
    std::cerr << "fusekd: " << e.what() << " [" << fkd::to_string(e.cause()) << "]\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fusekd: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
