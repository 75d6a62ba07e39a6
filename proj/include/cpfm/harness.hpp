// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment plumbing: end-to-end adaptation runs, the synth5 scenario suite,
// ablations, embedding dumps and result files.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "cpfm/adaptation.hpp"
#include "cpfm/dataset.hpp"
#include "cpfm/metrics.hpp"
#include "cpfm/source_model.hpp"
#include "cpfm/teacher_service.hpp"

namespace cpfm {

inline constexpr std::uint64_t kDefaultBackboneSeed = 12345;

struct Ablation {
  bool no_prompt = false;
  bool no_input_recon = false;
  bool no_prompt_recon = false;
  bool naive_avg = false;

  std::string name() const {
    std::string n;
    auto add = [&](bool on, const char* tag) {
      if (on) n += (n.empty() ? "" : "+") + std::string(tag);
    };
    add(no_prompt, "no_prompt");
    add(no_input_recon, "no_input_recon");
    add(no_prompt_recon, "no_prompt_recon");
    add(naive_avg, "naive_avg");
    return n.empty() ? "full" : n;
  }
};

struct RunConfig {
  EncoderConfig encoder;
  std::uint64_t backbone_seed = kDefaultBackboneSeed;
  AdaptOptions adapt;
  Ablation ablation;
  bool clone_prompts = false;

  /// Encoder config and options with the ablation switches applied.
  EncoderConfig effective_encoder() const {
    EncoderConfig c = encoder;
    if (ablation.no_prompt) c.prompt_len = 0;
    return c;
  }
  AdaptOptions effective_adapt() const {
    AdaptOptions o = adapt;
    if (ablation.no_input_recon) {
      o.weights.input_recon = 0.0;
      o.mask_inputs = false;
    }
    if (ablation.no_prompt_recon) o.weights.prompt_recon = 0.0;
    if (ablation.naive_avg) o.naive_avg = true;
    return o;
  }
  void validate() const {
    encoder.validate();
    adapt.validate();
  }
};

/// The public backbone every source and target model is built on.
inline Backbone public_backbone(const EncoderConfig& cfg, std::uint64_t seed) { return Backbone::init(cfg, seed); }

inline double evaluate_mf1(const std::vector<Distribution>& probs, const Dataset& labeled) {
  labeled.check_labels();
  const std::vector<std::size_t> y(labeled.labels.begin(), labeled.labels.end());
  return macro_f1(hard_labels(probs), y, labeled.classes);
}

struct EpochRecord {
  std::size_t epoch = 0;
  LossStats loss;
  std::vector<double> lambda;
  double test_mf1 = std::numeric_limits<double>::quiet_NaN();
  bool buffers_on_simplex = true;
  double seconds = 0.0;
};

struct RunReport {
  std::string scenario;
  std::uint64_t seed = 0;
  std::string variant = "full";
  std::size_t teachers = 0;
  double mf1 = std::numeric_limits<double>::quiet_NaN();
  double source_only_mf1 = std::numeric_limits<double>::quiet_NaN();
  double upper_bound_mf1 = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> teacher_mf1;
  std::vector<EpochRecord> epochs;
  double seconds = 0.0;
};

/// JSON form of a report; NaN scores become null. Timings are optional so two
/// reports of the same run can be compared byte for byte.
inline json report_json(const RunReport& r, bool with_timings = true) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json epochs = json::array();
  for (const EpochRecord& e : r.epochs) {
    json rec{{"epoch", e.epoch},
             {"ce", e.loss.ce},
             {"prompt_recon", e.loss.prompt_recon},
             {"input_recon", e.loss.input_recon},
             {"total", e.loss.total},
             {"lambda", e.lambda},
             {"test_mf1", num(e.test_mf1)},
             {"buffers_on_simplex", e.buffers_on_simplex}};
    if (with_timings) rec["seconds"] = e.seconds;
    epochs.push_back(std::move(rec));
  }
  json teacher_mf1 = json::array();
  for (double t : r.teacher_mf1) teacher_mf1.push_back(num(t));
  json out{{"scenario", r.scenario},           {"seed", r.seed},
           {"variant", r.variant},             {"teachers", r.teachers},
           {"mf1", num(r.mf1)},                {"source_only_mf1", num(r.source_only_mf1)},
           {"upper_bound_mf1", num(r.upper_bound_mf1)}, {"teacher_mf1", teacher_mf1},
           {"epochs", epochs}};
  if (with_timings) out["seconds"] = r.seconds;
  return out;
}

struct AdaptResult {
  CpfmModel model;
  std::vector<double> lambda;
  RunReport report;
};

/// Algorithm 1 end to end against teachers reachable only through their
/// prediction interface. Teachers are queried once, before the first epoch.
/// With `target_test` the fused prediction is scored after every epoch.
inline AdaptResult adapt_with_teachers(const RunConfig& config, const std::vector<Teacher*>& teachers,
                                       const Dataset& target_train, const Dataset* target_test = nullptr,
                                       std::ostream* log = nullptr) {
  config.validate();
  if (teachers.empty()) throw ConfigError("adapt: at least one teacher is required");
  const EncoderConfig cfg = config.effective_encoder();
  const AdaptOptions opt = config.effective_adapt();
  if (target_train.series_len != cfg.series_len || target_train.channels != cfg.channels ||
      target_train.classes != cfg.classes) {
    throw ConfigError("adapt: target data shape does not match the encoder config");
  }
  for (Teacher* t : teachers) {
    const TeacherInfo info = t->info();
    if (info.series_len != cfg.series_len || info.channels != cfg.channels || info.classes != cfg.classes) {
      throw ContractError("adapt: teacher serves " + std::to_string(info.series_len) + "x" +
                          std::to_string(info.channels) + " series with " + std::to_string(info.classes) +
                          " classes, the target model expects " + std::to_string(cfg.series_len) + "x" +
                          std::to_string(cfg.channels) + " with " + std::to_string(cfg.classes));
    }
  }
  const auto start = std::chrono::steady_clock::now();
  const Dataset unlabeled = target_train.unlabeled();
  std::vector<std::vector<Distribution>> initial;
  for (Teacher* t : teachers) initial.push_back(query_teacher(*t, unlabeled));

  AdaptResult result{CpfmModel::init(cfg, public_backbone(cfg, config.backbone_seed), teachers.size(),
                                     derive_seed(opt.seed, 9), config.clone_prompts),
                     {},
                     {}};
  result.report.teachers = teachers.size();
  result.report.variant = config.ablation.name();
  result.report.seed = opt.seed;
  Adapter adapter(result.model, initial, opt);
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    const EpochStats st = adapter.run_epoch(unlabeled);
    EpochRecord rec{st.epoch, st.loss, st.weights.lambda, std::numeric_limits<double>::quiet_NaN(),
                    st.buffers_on_simplex, st.seconds};
    if (target_test) rec.test_mf1 = evaluate_mf1(predict(result.model, *target_test, adapter.lambda()), *target_test);
    if (log) {
      *log << "epoch " << rec.epoch << " ce " << rec.loss.ce << " pr " << rec.loss.prompt_recon << " ir "
           << rec.loss.input_recon << " total " << rec.loss.total;
      if (target_test) *log << " test_mf1 " << rec.test_mf1;
      *log << " (" << rec.seconds << " s)\n";
    }
    result.report.epochs.push_back(std::move(rec));
  }
  result.lambda = adapter.lambda();
  if (target_test) result.report.mf1 = result.report.epochs.back().test_mf1;
  result.report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------
// synth5 suite.

struct SuiteConfig {
  RunConfig run;
  std::uint32_t source_per_class = 6;
  std::uint32_t target_per_class = 100;
  double train_fraction = 0.7;
  SourceTrainOptions source;
  std::vector<std::size_t> scenarios{0, 1, 2, 3, 4};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t sources = 1;       // teachers per target: scenario i uses sources i, i+1, ... (mod 5)
  bool socket_teachers = true;   // serve each teacher over loopback TCP
  bool upper_bound = false;      // also train on the labeled target split
  bool log_epochs = false;

  /// Desk-scale preset: small labeled sources and a larger unlabeled target.
  static SuiteConfig synth5_preset() {
    SuiteConfig s;
    s.source.epochs = 60;
    s.source.lr = 1e-2;
    s.source.batch_size = 32;
    s.run.adapt.epochs = 10;
    s.run.adapt.batch_size = 16;
    s.run.adapt.lr = 1e-2;
    return s;
  }

  void validate() const {
    run.validate();
    if (sources < 1 || sources > synth5_table().size()) throw ConfigError("suite: sources must be in 1..5");
    if (scenarios.empty() || seeds.empty()) throw ConfigError("suite: need at least one scenario and one seed");
    for (std::size_t s : scenarios)
      if (s >= synth5_table().size()) throw ConfigError("suite: scenario index out of range");
  }
};

struct DomainSplit {
  Dataset train, test;
};

/// Source (role false) or target (role true) domain of a scenario, split into train and test.
inline DomainSplit synth5_split(const SuiteConfig& cfg, std::size_t scenario, bool target, std::uint64_t seed) {
  Synth5Options opt;
  opt.series_len = cfg.run.encoder.series_len;
  opt.channels = cfg.run.encoder.channels;
  opt.per_class = target ? cfg.target_per_class : cfg.source_per_class;
  opt.seed = seed;
  auto [train, test] = split(gen_domain(synth5_domain(scenario, target, opt)), cfg.train_fraction,
                             derive_seed(seed, 2 * scenario + (target ? 1 : 0)));
  return {std::move(train), std::move(test)};
}

inline SourceModel train_source_model(const EncoderConfig& cfg, std::uint64_t backbone_seed, const Dataset& train,
                                      SourceTrainOptions opt, std::uint64_t seed) {
  SourceModel m = SourceModel::init(cfg, public_backbone(cfg, backbone_seed), seed);
  opt.seed = seed;
  train_source(m, train, opt);
  return m;
}

/// Teachers for one run, either in-process or each behind its own loopback service.
class TeacherPool {
 public:
  TeacherPool(const std::vector<const SourceModel*>& models, bool sockets) {
    for (const SourceModel* m : models) {
      auto local = std::make_shared<InProcessTeacher>(*m);
      if (sockets) {
        auto server = std::make_unique<TeacherServer>(local, "127.0.0.1:0");
        server->start();
        remotes_.push_back(std::make_unique<RemoteTeacher>(server->address()));
        teachers_.push_back(remotes_.back().get());
        servers_.push_back(std::move(server));
      } else {
        teachers_.push_back(local.get());
      }
      locals_.push_back(std::move(local));
    }
  }
  ~TeacherPool() {
    remotes_.clear();  // disconnect before the servers stop
    for (auto& s : servers_) s->stop();
  }
  const std::vector<Teacher*>& teachers() const { return teachers_; }

 private:
  std::vector<std::shared_ptr<InProcessTeacher>> locals_;
  std::vector<std::unique_ptr<TeacherServer>> servers_;
  std::vector<std::unique_ptr<RemoteTeacher>> remotes_;
  std::vector<Teacher*> teachers_;
};

/// Source indices feeding target `scenario` when `m` sources are used.
inline std::vector<std::size_t> suite_sources(std::size_t scenario, std::size_t m) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < m; ++k) out.push_back((scenario + k) % synth5_table().size());
  return out;
}

struct SuiteResult {
  std::vector<RunReport> rows;

  /// Mean and sample standard deviation of a column over all rows.
  template <class F>
  std::pair<double, double> stats(F&& column) const {
    double sum = 0.0;
    for (const RunReport& r : rows) sum += column(r);
    const double mean = sum / static_cast<double>(rows.size());
    double ss = 0.0;
    for (const RunReport& r : rows) ss += (column(r) - mean) * (column(r) - mean);
    const double sd = rows.size() > 1 ? std::sqrt(ss / static_cast<double>(rows.size() - 1)) : 0.0;
    return {mean, sd};
  }
  double mean_mf1() const {
    return stats([](const RunReport& r) { return r.mf1; }).first;
  }
  double mean_source_only() const {
    return stats([](const RunReport& r) { return r.source_only_mf1; }).first;
  }
};

/// Trains sources (cached per seed), serves them, adapts every scenario and
/// scores on the held-out target split.
inline SuiteResult run_suite(const SuiteConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  SuiteResult result;
  const EncoderConfig& enc = cfg.run.encoder;
  for (std::uint64_t seed : cfg.seeds) {
    std::map<std::size_t, SourceModel> sources;
    auto source_for = [&](std::size_t j) -> const SourceModel& {
      auto it = sources.find(j);
      if (it == sources.end()) {
        const DomainSplit s = synth5_split(cfg, j, false, seed);
        it = sources.emplace(j, train_source_model(enc, cfg.run.backbone_seed, s.train, cfg.source,
                                                   derive_seed(seed, 100 + j)))
                 .first;
      }
      return it->second;
    };
    for (std::size_t scenario : cfg.scenarios) {
      const DomainSplit target = synth5_split(cfg, scenario, true, seed);
      std::vector<const SourceModel*> models;
      for (std::size_t j : suite_sources(scenario, cfg.sources)) models.push_back(&source_for(j));

      RunConfig run = cfg.run;
      run.adapt.seed = seed;
      std::vector<std::vector<Distribution>> teacher_test;
      RunReport report;
      {
        TeacherPool pool(models, cfg.socket_teachers);
        AdaptResult r = adapt_with_teachers(run, pool.teachers(), target.train, &target.test,
                                            cfg.log_epochs ? log : nullptr);
        report = std::move(r.report);
        for (Teacher* t : pool.teachers()) teacher_test.push_back(query_teacher(*t, target.test.unlabeled()));
      }
      report.scenario = "T" + std::to_string(scenario);
      for (const auto& p : teacher_test) report.teacher_mf1.push_back(evaluate_mf1(p, target.test));
      // Source-only: hard labels of the (uniformly averaged) teacher predictions.
      std::vector<Distribution> avg(target.test.size(), Distribution(enc.classes, 0.0));
      for (const auto& p : teacher_test)
        for (std::size_t s = 0; s < avg.size(); ++s)
          for (std::size_t c = 0; c < enc.classes; ++c) avg[s][c] += p[s][c] / static_cast<double>(teacher_test.size());
      report.source_only_mf1 = evaluate_mf1(avg, target.test);
      if (cfg.upper_bound) {
        const SourceModel oracle =
            train_source_model(enc, cfg.run.backbone_seed, target.train, cfg.source, derive_seed(seed, 200 + scenario));
        report.upper_bound_mf1 = evaluate_mf1(oracle.predict(target.test), target.test);
      }
      if (log) {
        *log << report.scenario << " seed " << seed << " " << report.variant << " M=" << report.teachers
             << ": source-only " << std::fixed << std::setprecision(1) << report.source_only_mf1 << " -> CPFM "
             << report.mf1 << " (" << report.seconds << " s)\n"
             << std::defaultfloat << std::setprecision(6);
      }
      result.rows.push_back(std::move(report));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Output files.

namespace detail {

inline std::string fixed(double v, int digits = 2) {
  if (std::isnan(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::string full_precision(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace detail

/// Columns padded to their widest cell; first column left-aligned, the rest right-aligned.
inline std::string aligned_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], row[c].size());
    }
  std::ostringstream os;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) os << "  ";
      os << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << row[c];
    }
    os << '\n';
  }
  return os.str();
}

inline std::string mean_sd(std::pair<double, double> ms) {
  if (std::isnan(ms.first)) return "-";
  return detail::fixed(ms.first) + " ± " + detail::fixed(ms.second);
}

/// Per-scenario mean ± std over seeds plus an overall row.
inline std::string suite_table(const SuiteResult& result) {
  std::vector<std::vector<std::string>> rows{{"scenario", "runs", "source-only", "CPFM", "upper-bound"}};
  std::vector<std::string> names;
  for (const RunReport& r : result.rows)
    if (std::find(names.begin(), names.end(), r.scenario) == names.end()) names.push_back(r.scenario);
  auto add_row = [&](const std::string& label, const SuiteResult& part) {
    rows.push_back({label, std::to_string(part.rows.size()),
                    mean_sd(part.stats([](const RunReport& r) { return r.source_only_mf1; })),
                    mean_sd(part.stats([](const RunReport& r) { return r.mf1; })),
                    mean_sd(part.stats([](const RunReport& r) { return r.upper_bound_mf1; }))});
  };
  for (const std::string& name : names) {
    SuiteResult part;
    for (const RunReport& r : result.rows)
      if (r.scenario == name) part.rows.push_back(r);
    add_row(name, part);
  }
  add_row("average", result);
  return aligned_table(rows);
}

/// results.csv, epochs.csv, lambda.csv, timings.csv and table.txt under `dir`.
inline void write_suite(const SuiteResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto results = detail::open_out(dir / "results.csv");
  results << "scenario,seed,variant,teachers,mf1,source_only_mf1,upper_bound_mf1,teacher_mf1\n";
  auto epochs = detail::open_out(dir / "epochs.csv");
  epochs << "scenario,seed,variant,epoch,ce,prompt_recon,input_recon,total,test_mf1,buffers_on_simplex\n";
  auto lambda = detail::open_out(dir / "lambda.csv");
  lambda << "scenario,seed,variant,epoch,teacher,lambda\n";
  auto timings = detail::open_out(dir / "timings.csv");
  timings << "scenario,seed,variant,epoch,seconds\n";
  using detail::full_precision;
  for (const RunReport& r : result.rows) {
    const std::string key = r.scenario + "," + std::to_string(r.seed) + "," + r.variant;
    std::string per_teacher;
    for (double t : r.teacher_mf1) per_teacher += (per_teacher.empty() ? "" : ";") + full_precision(t);
    results << key << ',' << r.teachers << ',' << full_precision(r.mf1) << ',' << full_precision(r.source_only_mf1)
            << ',' << full_precision(r.upper_bound_mf1) << ',' << per_teacher << '\n';
    for (const EpochRecord& e : r.epochs) {
      epochs << key << ',' << e.epoch << ',' << full_precision(e.loss.ce) << ',' << full_precision(e.loss.prompt_recon)
             << ',' << full_precision(e.loss.input_recon) << ',' << full_precision(e.loss.total) << ','
             << full_precision(e.test_mf1) << ',' << (e.buffers_on_simplex ? 1 : 0) << '\n';
      for (std::size_t i = 0; i < e.lambda.size(); ++i)
        lambda << key << ',' << e.epoch << ',' << i << ',' << full_precision(e.lambda[i]) << '\n';
      timings << key << ',' << e.epoch << ',' << e.seconds << '\n';
    }
    timings << key << ",total," << r.seconds << '\n';
  }
  detail::open_out(dir / "table.txt") << suite_table(result);
}

/// Reads the mf1 columns of a results.csv back into reports (epochs are not restored).
inline SuiteResult read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  SuiteResult out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 7) throw DataError("results.csv: short row '" + line + "'");
    RunReport r;
    r.scenario = cells[0];
    r.seed = std::stoull(cells[1]);
    r.variant = cells[2];
    r.teachers = std::stoul(cells[3]);
    r.mf1 = std::stod(cells[4]);
    r.source_only_mf1 = std::stod(cells[5]);
    r.upper_bound_mf1 = std::stod(cells[6]);
    out.rows.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablations.

struct AblationRow {
  Ablation ablation;
  SuiteResult result;
};

inline std::vector<Ablation> standard_ablations() {
  std::vector<Ablation> out(5);
  out[1].no_prompt = true;
  out[2].no_input_recon = true;
  out[3].no_prompt_recon = true;
  out[4].naive_avg = true;
  return out;
}

inline std::vector<AblationRow> run_ablations(const SuiteConfig& base, const std::vector<Ablation>& variants,
                                              std::ostream* log = nullptr) {
  std::vector<AblationRow> out;
  for (const Ablation& a : variants) {
    SuiteConfig cfg = base;
    cfg.run.ablation = a;
    out.push_back({a, run_suite(cfg, log)});
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::vector<std::vector<std::string>> cells{{"variant", "runs", "MF1"}};
  for (const AblationRow& r : rows) {
    cells.push_back({r.ablation.name(), std::to_string(r.result.rows.size()),
                     mean_sd(r.result.stats([](const RunReport& x) { return x.mf1; }))});
  }
  return aligned_table(cells);
}

// ---------------------------------------------------------------------------
// Embeddings.

/// Mean-pooled encoder output of one branch for every sample, [n, d].
inline std::vector<std::vector<double>> branch_embeddings(const CpfmModel& model, const Dataset& data,
                                                          std::size_t teacher, std::size_t branch,
                                                          std::size_t batch_size = 64) {
  NoGradGuard no_grad;
  const Branch& b = model.pairs.at(teacher).at(branch);
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::span<const double>> rows;
    for (std::size_t s = start; s < end; ++s) rows.push_back(data.sample(s));
    Tensor pooled = mean_axis(encode(make_batch(rows, data.series_len, data.channels), b.prompt, {}, model.backbone,
                                     model.config),
                              -2);
    const std::size_t d = pooled.dim(-1);
    for (std::size_t s = 0; s < rows.size(); ++s) {
      auto v = pooled.values().subspan(s * d, d);
      out.emplace_back(v.begin(), v.end());
    }
  }
  return out;
}

inline void write_embeddings_csv(const std::vector<std::vector<double>>& rows, const Dataset& data,
                                 const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  const std::size_t d = rows.empty() ? 0 : rows.front().size();
  out << "label";
  for (std::size_t j = 0; j < d; ++j) out << ",e" << j;
  out << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << (data.has_labels ? std::to_string(data.labels[i]) : std::string("-1"));
    for (double v : rows[i]) out << ',' << detail::full_precision(v);
    out << '\n';
  }
}

}  // namespace cpfm
