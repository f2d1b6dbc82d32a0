#include "fusekd/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace fkd {

namespace fs = std::filesystem;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::gen_synth: return "gen-synth";
    case Stage::fuse: return "fuse";
    case Stage::train: return "train";
    case Stage::diagnose: return "diagnose";
    case Stage::attack: return "attack";
    case Stage::corrupt_eval: return "corrupt-eval";
    case Stage::report: return "report";
  }
  return "?";
}

std::vector<Stage> stages_from_string(const std::string& name) {
  if (name == "all") return {Stage::fuse, Stage::train, Stage::diagnose, Stage::attack, Stage::corrupt_eval,
                             Stage::report};
  for (auto s : kAllStages)
    if (to_string(s) == name) return {s};
  throw Error(ErrorCode::ParseError, "unknown stage '" + name + "'");
}

std::string format_number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// ---- config -----------------------------------------------------------------

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "bundle",          "out",          "seed",           "precision",         "stages",
      "alpha",           "lambda",       "beta",           "gamma",             "t_temp",
      "certainty_threshold", "logit_norm", "epochs",       "batch_size",        "learning_rate",
      "momentum",        "weight_decay", "lr_decay_epochs", "lr_decay_factor",  "hidden",
      "val_fraction",    "diagnose.quadrants", "diagnose.correlation", "diagnose.ensemble",
      "diagnose.features", "ensemble.alphas", "ensemble.target_scale", "ensemble.residual",
      "attack.eps",      "attack.pgd_iters", "attack.pgd_step_fraction", "corrupt.kinds",
      "corrupt.severities", "report.csv", "report.json"};
  return keys;
}

template <typename F>
auto parse_list(const KeyValueFile& kv, const std::string& key, F&& convert) {
  using V = decltype(convert(std::string{}));
  std::vector<V> out;
  for (const auto& item : kv.get_list(key)) {
    try {
      out.push_back(convert(item));
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      throw Error(ErrorCode::ParseError, kv.origin() + ": key '" + key + "': bad list item '" + item + "'");
    }
  }
  return out;
}

double to_double_strict(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

long long to_int_strict(const std::string& s) {
  std::size_t pos = 0;
  const long long v = std::stoll(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return v;
}

std::size_t nonneg(const KeyValueFile& kv, const std::string& key, std::size_t fallback) {
  const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw Error(ErrorCode::ParseError, kv.origin() + ": key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

RunConfig RunConfig::from_kv(const KeyValueFile& kv) {
  for (const auto& [key, value] : kv.entries()) {
    if (key.rfind("synth.", 0) == 0) continue;
    if (!known_keys().count(key)) throw Error(ErrorCode::ParseError, kv.origin() + ": unknown key '" + key + "'");
  }
  RunConfig c;
  c.bundle = kv.get_string("bundle", "");
  c.out = kv.get_string("out", c.out.string());
  c.seed = kv.get_u64("seed", c.seed);
  c.precision = static_cast<int>(kv.get_int("precision", c.precision));
  if (kv.contains("stages")) {
    c.stages.clear();
    for (const auto& name : kv.get_list("stages")) {
      try {
        for (auto s : stages_from_string(name)) c.stages.push_back(s);
      } catch (const Error& e) {
        throw Error(ErrorCode::ParseError, kv.origin() + ": key 'stages': " + e.what());
      }
    }
  }

  auto& f = c.train.fusion;
  f.alpha = kv.get_double("alpha", f.alpha);
  f.lambda = kv.get_double("lambda", f.lambda);
  f.beta = kv.get_double("beta", f.beta);
  f.gamma = kv.get_double("gamma", f.gamma);
  f.t_temp = kv.get_double("t_temp", f.t_temp);
  f.certainty_threshold = kv.get_double("certainty_threshold", f.certainty_threshold);
  if (kv.contains("logit_norm")) {
    try {
      f.logit_norm = logit_norm_from_string(kv.get_string("logit_norm"));
    } catch (const Error& e) {
      throw Error(ErrorCode::ParseError, kv.origin() + ": key 'logit_norm': " + e.what());
    }
  }

  auto& t = c.train;
  t.epochs = nonneg(kv, "epochs", t.epochs);
  t.batch_size = nonneg(kv, "batch_size", t.batch_size);
  t.learning_rate = kv.get_double("learning_rate", t.learning_rate);
  t.momentum = kv.get_double("momentum", t.momentum);
  t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
  t.lr_decay_factor = kv.get_double("lr_decay_factor", t.lr_decay_factor);
  auto sizes = [&](const std::string& key) {
    return parse_list(kv, key, [&](const std::string& s) {
      const auto v = to_int_strict(s);
      if (v < 0) throw Error(ErrorCode::ParseError, kv.origin() + ": key '" + key + "' must be non-negative");
      return static_cast<std::size_t>(v);
    });
  };
  if (kv.contains("lr_decay_epochs")) t.lr_decay_epochs = sizes("lr_decay_epochs");
  if (kv.contains("hidden")) t.hidden = sizes("hidden");
  c.val_fraction = kv.get_double("val_fraction", c.val_fraction);

  c.quadrants = kv.get_bool("diagnose.quadrants", c.quadrants);
  c.correlation = kv.get_bool("diagnose.correlation", c.correlation);
  c.ensemble = kv.get_bool("diagnose.ensemble", c.ensemble);
  c.features = kv.get_bool("diagnose.features", c.features);
  if (kv.contains("ensemble.alphas")) c.ensemble_alphas = parse_list(kv, "ensemble.alphas", to_double_strict);
  if (kv.contains("ensemble.target_scale")) c.target_scale = kv.get_double("ensemble.target_scale");
  c.residual = kv.get_double("ensemble.residual", c.residual);

  if (kv.contains("attack.eps")) c.attack_eps = parse_list(kv, "attack.eps", to_double_strict);
  c.pgd_iters = static_cast<int>(kv.get_int("attack.pgd_iters", c.pgd_iters));
  c.pgd_step_fraction = kv.get_double("attack.pgd_step_fraction", c.pgd_step_fraction);
  if (kv.contains("corrupt.kinds")) {
    c.corruption_kinds = parse_list(kv, "corrupt.kinds", [&](const std::string& s) {
      try {
        return corruption_from_string(s);
      } catch (const Error& e) {
        throw Error(ErrorCode::ParseError, kv.origin() + ": key 'corrupt.kinds': " + e.what());
      }
    });
  }
  if (kv.contains("corrupt.severities")) {
    c.severities = parse_list(kv, "corrupt.severities", [](const std::string& s) {
      return static_cast<int>(to_int_strict(s));
    });
  }
  c.report_csv = kv.get_bool("report.csv", c.report_csv);
  c.report_json = kv.get_bool("report.json", c.report_json);

  c.synth = SynthSpec::from_kv(kv, "synth.");
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) { return from_kv(KeyValueFile::load(path)); }

void RunConfig::validate() const {
  auto bad = [](const std::string& key, const std::string& why) {
    throw Error(ErrorCode::InvariantViolation, "config key '" + key + "': " + why);
  };
  if (bundle.empty()) bad("bundle", "required");
  if (out.empty()) bad("out", "must not be empty");
  if (precision != 32 && precision != 64) bad("precision", "must be 32 or 64");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) bad("val_fraction", "must lie in (0,1)");
  train.validate();
  for (double a : ensemble_alphas)
    if (!(a >= 0.0 && a <= 1.0)) bad("ensemble.alphas", "values must lie in [0,1]");
  if (target_scale && !(*target_scale > 0.0)) bad("ensemble.target_scale", "must be > 0");
  if (!(residual >= 0.0)) bad("ensemble.residual", "must be >= 0");
  for (double e : attack_eps)
    if (!(e >= 0.0 && e <= 1.0)) bad("attack.eps", "values must lie in [0,1]");
  if (pgd_iters < 1) bad("attack.pgd_iters", "must be >= 1");
  if (!(pgd_step_fraction > 0.0)) bad("attack.pgd_step_fraction", "must be > 0");
  for (int s : severities)
    if (s < 1 || s > 5) bad("corrupt.severities", "values must lie in 1..5");
}

// ---- bundle loading ---------------------------------------------------------

template <typename T>
LoadedBundle<T> load_bundle(const fs::path& dir) {
  LoadedBundle<T> b;
  b.manifest = validate_bundle(dir);
  auto file = [&](Role r) { return dir / (std::string(to_string(r)) + kTensorExtension); };
  b.labels = read_tensor(file(Role::labels)).ints();
  b.teacher_logits = read_tensor(file(Role::teacher_logits)).to_matrix();
  b.prompt_logits = PromptLogitTensor::from_cache(read_tensor(file(Role::clip_prompt_logits)));
  b.clip_logits = average_prompt_logits(b.prompt_logits);
  b.teacher_features = read_tensor(file(Role::teacher_features)).to_matrix().template cast<T>();
  b.clip_features = read_tensor(file(Role::clip_features)).to_matrix().template cast<T>();
  if (b.manifest.image) b.images = read_tensor(file(Role::images)).to_matrix().template cast<T>();
  return b;
}

Split holdout_split(std::size_t samples, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw Error(ErrorCode::InvariantViolation, "val_fraction must lie in (0,1)");
  }
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(samples)));
  if (n_val == 0 || n_val >= samples) {
    throw Error(ErrorCode::InsufficientSamples, "held-out split of " + std::to_string(samples) +
                                                    " samples leaves an empty side");
  }
  Split s;
  for (std::size_t i = 0; i < samples; ++i) (i < samples - n_val ? s.train : s.val).push_back(i);
  return s;
}

template <typename T>
StudentData<T> student_data(const LoadedBundle<T>& b, const FusionConfig& fusion, double val_fraction) {
  if (!b.images) throw Error(ErrorCode::MissingFile, "bundle has no images; the student needs inputs");
  const auto split = holdout_split(b.labels.size(), val_fraction);
  const Matrix<T> fused = fuse_logits(b.teacher_logits, b.clip_logits, fusion.alpha, fusion.logit_norm).template cast<T>();
  auto labels_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::int64_t> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = b.labels[idx[i]];
    return y;
  };
  StudentData<T> d;
  d.train.inputs = b.images->gather_rows(split.train);
  d.train.labels = labels_of(split.train);
  d.train.fused_logits = fused.gather_rows(split.train);
  d.train.teacher_features = b.teacher_features.gather_rows(split.train);
  d.train.clip_features = b.clip_features.gather_rows(split.train);
  d.val.inputs = b.images->gather_rows(split.val);
  d.val.labels = labels_of(split.val);
  return d;
}

// ---- stages -------------------------------------------------------------------

namespace {

void write_csv(const fs::path& path, const std::string& header, const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << header << '\n';
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

Csv read_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  Csv csv;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_list(line);
    if (first) {
      csv.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != csv.header.size()) {
        throw Error(ErrorCode::ParseError, path.string() + ": row width differs from header");
      }
      csv.rows.push_back(std::move(cells));
    }
  }
  return csv;
}

nlohmann::json csv_to_json(const Csv& csv) {
  auto cell = [](const std::string& s) -> nlohmann::json {
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec == std::errc() && r.ptr == s.data() + s.size()) return v;
    return s;
  };
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : csv.rows) {
    nlohmann::json o = nlohmann::json::object();
    for (std::size_t i = 0; i < r.size(); ++i) o[csv.header[i]] = cell(r[i]);
    rows.push_back(std::move(o));
  }
  return rows;
}

std::vector<std::string> robustness_row(const RobustnessRow& r) {
  return {r.kind, format_number(r.param), format_number(r.top1), format_number(r.top5)};
}

template <typename T>
class Runner {
 public:
  explicit Runner(const RunConfig& cfg) : cfg_(cfg) {}

  void run(Stage s) {
    switch (s) {
      case Stage::gen_synth: gen(); break;
      case Stage::fuse: fuse(); break;
      case Stage::train: train_student(); break;
      case Stage::diagnose: diagnose(); break;
      case Stage::attack: attack(); break;
      case Stage::corrupt_eval: corrupt_eval(); break;
      case Stage::report: report(); break;
    }
  }

 private:
  const RunConfig& cfg_;
  std::optional<LoadedBundle<T>> bundle_;

  fs::path out(const char* name) const { return cfg_.out / name; }

  const LoadedBundle<T>& bundle() {
    if (!bundle_) bundle_ = load_bundle<T>(cfg_.bundle);
    return *bundle_;
  }

  StudentNet<T> load_trained() {
    const auto dir = out(outputs::kStudentDir);
    if (!fs::exists(dir / "student.txt")) {
      throw Error(ErrorCode::MissingFile, "no trained student under " + dir.string() + "; run the train stage");
    }
    return load_student<T>(dir).first;
  }

  void gen() { gen_synth(cfg_.synth, cfg_.bundle); }

  void fuse() {
    const auto& b = bundle();
    const auto& f = cfg_.fusion();
    const Matrix<double> z = fuse_logits(b.teacher_logits, b.clip_logits, f.alpha, f.logit_norm);
    Matrix<T> projected = b.clip_features;
    if (b.clip_features.cols() != b.teacher_features.cols()) {
      const auto proj = LinearProjection<T>::init(b.clip_features.cols(), b.teacher_features.cols(), cfg_.seed);
      projected = project_features(b.clip_features, proj);
    }
    const Matrix<T> ff = fuse_features(b.teacher_features, projected, f.lambda);
    write_tensor(CacheTensor::from_matrix(Role::fused_logits, z), out(outputs::kFusedLogits));
    write_tensor(CacheTensor::from_matrix(Role::fused_features, ff), out(outputs::kFusedFeatures));
  }

  void train_student() {
    const auto data = student_data(bundle(), cfg_.fusion(), cfg_.val_fraction);
    TrainConfig tc = cfg_.train;
    tc.seed = cfg_.seed;
    const auto result = train<T>(data.train, data.val, tc);
    save_student(result.net, result.projection ? &*result.projection : nullptr, out(outputs::kStudentDir));
    std::vector<std::vector<std::string>> rows;
    for (const auto& e : result.report.epochs) {
      rows.push_back({std::to_string(e.epoch), format_number(e.loss.ce), format_number(e.loss.logit_kl),
                      format_number(e.loss.feat), format_number(e.loss.total), format_number(e.val_top1)});
    }
    write_csv(out(outputs::kTrainCsv), headers::kTrain, rows);
  }

  void diagnose() {
    const auto& b = bundle();
    const auto& f = cfg_.fusion();
    const Matrix<double> fused = fuse_logits(b.teacher_logits, b.clip_logits, f.alpha, f.logit_norm);
    std::optional<StudentNet<T>> net;
    if (fs::exists(out(outputs::kStudentDir) / "student.txt")) net = load_trained();
    std::optional<StudentData<T>> data;
    std::optional<ForwardPass<T>> fp;
    if (net) {
      data = student_data(b, f, cfg_.val_fraction);
      fp = forward_batch(*net, data->val.inputs);
    }

    if (cfg_.quadrants) {
      std::vector<std::vector<std::string>> rows;
      auto emit = [&](const std::string& who, const Matrix<double>& z, std::span<const std::int64_t> y) {
        const auto c = quadrant_counts(z, y, f.certainty_threshold);
        for (auto q : kQuadrants) {
          rows.push_back({who + "." + std::string(to_string(q)), std::to_string(c[q]),
                          format_number(100.0 * static_cast<double>(c[q]) / static_cast<double>(c.total()))});
        }
      };
      emit("teacher", b.teacher_logits, b.labels);
      emit("clip", b.clip_logits, b.labels);
      emit("fused", fused, b.labels);
      if (fp) emit("student", fp->logits.template cast<double>(), data->val.labels);
      write_csv(out(outputs::kQuadrantsCsv), headers::kQuadrants, rows);
    }

    if (cfg_.correlation) {
      const Matrix<double> corr = interclass_correlation(fp ? fp->logits.template cast<double>() : fused);
      std::string header = "class";
      for (const auto& name : b.manifest.class_names) header += "," + name;
      std::vector<std::vector<std::string>> rows;
      for (std::size_t i = 0; i < corr.rows(); ++i) {
        std::vector<std::string> r{b.manifest.class_names[i]};
        for (std::size_t j = 0; j < corr.cols(); ++j) r.push_back(format_number(corr(i, j)));
        rows.push_back(std::move(r));
      }
      write_csv(out(outputs::kCorrelationCsv), header, rows);
    }

    if (cfg_.ensemble) {
      const double scale = cfg_.target_scale ? *cfg_.target_scale : matched_target_scale(b.teacher_logits, b.labels);
      const auto target = target_logits(b.labels, b.manifest.class_count, scale);
      std::vector<std::vector<std::string>> rows;
      for (const auto& r : ensemble_sweep(b.teacher_logits, b.clip_logits, target, cfg_.ensemble_alphas,
                                          cfg_.residual)) {
        rows.push_back({format_number(r.alpha), format_number(r.bias_f), format_number(r.var_f),
                        format_number(r.error_f)});
      }
      write_csv(out(outputs::kEnsembleCsv), headers::kEnsemble, rows);
    }

    if (cfg_.features) {
      // Student tap features on the held-out split, or teacher features without a student.
      const Matrix<T>& feat = fp ? fp->features() : b.teacher_features;
      std::span<const std::int64_t> y = fp ? std::span<const std::int64_t>(data->val.labels) : b.labels;
      std::string header = "label";
      for (std::size_t j = 0; j < feat.cols(); ++j) header += ",f" + std::to_string(j);
      std::vector<std::vector<std::string>> rows;
      for (std::size_t i = 0; i < feat.rows(); ++i) {
        std::vector<std::string> r{std::to_string(y[i])};
        for (std::size_t j = 0; j < feat.cols(); ++j) r.push_back(format_number(static_cast<double>(feat(i, j))));
        rows.push_back(std::move(r));
      }
      write_csv(out(outputs::kFeaturesCsv), header, rows);
    }
  }

  void attack() {
    const auto net = load_trained();
    const auto data = student_data(bundle(), cfg_.fusion(), cfg_.val_fraction);
    const auto& x = data.val.inputs;
    const auto& y = data.val.labels;
    std::vector<std::vector<std::string>> rows;
    auto record = [&](const std::string& kind, double param, const Matrix<T>& adv) {
      const auto acc = evaluate(net, adv, y);
      rows.push_back(robustness_row({kind, param, acc.top1, acc.top5}));
    };
    record("clean", 0.0, x);
    for (double eps : cfg_.attack_eps) {
      record("fgsm", eps, fgsm_attack(net, x, y, eps));
      record("pgd", eps, pgd_attack(net, x, y, eps, eps * cfg_.pgd_step_fraction, cfg_.pgd_iters));
    }
    write_csv(out(outputs::kAttackCsv), headers::kRobustness, rows);
  }

  void corrupt_eval() {
    const auto& b = bundle();
    if (!b.manifest.image) throw Error(ErrorCode::MissingFile, "bundle has no image geometry");
    const auto net = load_trained();
    const auto data = student_data(b, cfg_.fusion(), cfg_.val_fraction);
    std::vector<std::vector<std::string>> rows;
    for (auto kind : cfg_.corruption_kinds) {
      for (int s : cfg_.severities) {
        const auto xc = corrupt(data.val.inputs, kind, s, cfg_.seed, *b.manifest.image);
        const auto acc = evaluate(net, xc, data.val.labels);
        rows.push_back(robustness_row({std::string(to_string(kind)), corruption_parameter(kind, s), acc.top1,
                                       acc.top5}));
      }
    }
    write_csv(out(outputs::kCorruptCsv), headers::kRobustness, rows);
  }

  void report() {
    // Collate whatever earlier stages left in the output directory.
    std::vector<std::vector<std::string>> robust;
    double corrupt_top1 = 0.0, corrupt_top5 = 0.0;
    std::size_t corrupt_n = 0;
    for (const char* name : {outputs::kAttackCsv, outputs::kCorruptCsv}) {
      if (!fs::exists(out(name))) continue;
      const auto csv = read_csv(out(name));
      if (csv.header != split_list(headers::kRobustness)) {
        throw Error(ErrorCode::ParseError, std::string(name) + ": unexpected header");
      }
      for (const auto& r : csv.rows) {
        robust.push_back(r);
        if (std::string_view(name) == outputs::kCorruptCsv) {
          corrupt_top1 += std::stod(r[2]);
          corrupt_top5 += std::stod(r[3]);
          ++corrupt_n;
        }
      }
    }
    if (corrupt_n > 0) {
      const double n = static_cast<double>(corrupt_n);
      robust.push_back(robustness_row({"corruption_average", 0.0, corrupt_top1 / n, corrupt_top5 / n}));
    }
    if (cfg_.report_csv) write_csv(out(outputs::kRobustnessCsv), headers::kRobustness, robust);

    if (!cfg_.report_json) return;
    nlohmann::json j;
    j["config"] = {{"bundle", cfg_.bundle.string()},
                   {"seed", cfg_.seed},
                   {"precision", cfg_.precision},
                   {"alpha", cfg_.fusion().alpha},
                   {"lambda", cfg_.fusion().lambda},
                   {"beta", cfg_.fusion().beta},
                   {"gamma", cfg_.fusion().gamma},
                   {"t_temp", cfg_.fusion().t_temp},
                   {"certainty_threshold", cfg_.fusion().certainty_threshold},
                   {"logit_norm", std::string(to_string(cfg_.fusion().logit_norm))}};
    auto section = [&](const char* key, const char* file) {
      if (fs::exists(out(file))) j[key] = csv_to_json(read_csv(out(file)));
    };
    section("train", outputs::kTrainCsv);
    section("quadrants", outputs::kQuadrantsCsv);
    section("ensemble", outputs::kEnsembleCsv);
    if (fs::exists(out(outputs::kCorrelationCsv))) {
      const auto csv = read_csv(out(outputs::kCorrelationCsv));
      nlohmann::json m = nlohmann::json::array();
      for (const auto& r : csv.rows) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t i = 1; i < r.size(); ++i) row.push_back(std::stod(r[i]));
        m.push_back(std::move(row));
      }
      j["correlation"] = std::move(m);
    }
    if (!robust.empty()) j["robustness"] = csv_to_json(Csv{split_list(headers::kRobustness), robust});
    std::ofstream o(out(outputs::kSummaryJson), std::ios::binary);
    if (!o) throw Error(ErrorCode::Io, "cannot write " + out(outputs::kSummaryJson).string());
    o << j.dump(2) << '\n';
  }
};

template <typename T>
void run_all(const RunConfig& cfg) {
  Runner<T> runner(cfg);
  for (auto s : cfg.stages) {
    try {
      if (s != Stage::gen_synth) fs::create_directories(cfg.out);
      runner.run(s);
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError(s, e.code(), e.what());
    } catch (const std::exception& e) {
      throw StageError(s, ErrorCode::Io, e.what());
    }
  }
}

}  // namespace

void run_pipeline(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.precision == 64) run_all<double>(cfg);
  else run_all<float>(cfg);
}

template LoadedBundle<float> load_bundle<float>(const fs::path&);
template LoadedBundle<double> load_bundle<double>(const fs::path&);
template StudentData<float> student_data<float>(const LoadedBundle<float>&, const FusionConfig&, double);
template StudentData<double> student_data<double>(const LoadedBundle<double>&, const FusionConfig&, double);

}  // namespace fkd
