// SPDX-License-Identifier: Apache-2.0
// cpfm: data generation, source training, teacher serving, black-box
// adaptation and the synth5 experiment suite.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "cpfm/cpfm.hpp"

namespace fs = std::filesystem;
using namespace cpfm;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void add_encoder_options(CLI::App& app, EncoderConfig& c) {
  app.add_option("--series-len", c.series_len, "Series length T")->capture_default_str();
  app.add_option("--channels", c.channels, "Input channels")->capture_default_str();
  app.add_option("--patch-len", c.patch_len, "Patch length P")->capture_default_str();
  app.add_option("--model-dim", c.model_dim, "Model width d")->capture_default_str();
  app.add_option("--heads", c.heads, "Attention heads")->capture_default_str();
  app.add_option("--layers", c.layers, "Transformer layers")->capture_default_str();
  app.add_option("--prompt-len", c.prompt_len, "Prompt rows")->capture_default_str();
  app.add_option("--classes", c.classes, "Classes K")->capture_default_str();
  app.add_option("--mask-ratio", c.mask_ratio, "Fraction of patches masked")->capture_default_str();
}

void add_adapt_options(CLI::App& app, RunConfig& r, bool with_seed = true) {
  AdaptOptions& a = r.adapt;
  app.add_option("--epochs", a.epochs, "Adaptation epochs")->capture_default_str();
  app.add_option("--batch-size", a.batch_size, "Adaptation batch size")->capture_default_str();
  app.add_option("--lr", a.lr, "Adam learning rate")->capture_default_str();
  app.add_option("--ema-gamma", a.ema_gamma, "EMA weight of the buffered label")->capture_default_str();
  app.add_option("--gamma1", a.weights.prompt_recon, "Prompt reconstruction weight")->capture_default_str();
  app.add_option("--gamma2", a.weights.input_recon, "Input reconstruction weight")->capture_default_str();
  app.add_option("--masked-share", a.weights.masked_share, "Weight of masked positions in input recon")
      ->capture_default_str();
  app.add_option("--confident-threshold", a.confident_threshold, "Confidence threshold for teacher weights")
      ->capture_default_str();
  if (with_seed) app.add_option("--seed", a.seed, "Run seed")->capture_default_str();
  app.add_option("--backbone-seed", r.backbone_seed, "Seed of the public backbone")->capture_default_str();
  app.add_flag("--no-prompt", r.ablation.no_prompt, "Ablation: no prompt tokens");
  app.add_flag("--no-input-recon", r.ablation.no_input_recon, "Ablation: no masking or input reconstruction");
  app.add_flag("--no-prompt-recon", r.ablation.no_prompt_recon, "Ablation: no prompt reconstruction");
  app.add_flag("--naive-avg", r.ablation.naive_avg, "Ablation: uniform teacher weights");
  app.add_flag("--clone-prompts", r.clone_prompts, "Start both branches of a pair from the same prompt");
}

void add_source_options(CLI::App& app, SourceTrainOptions& s, const std::string& prefix) {
  app.add_option("--" + prefix + "epochs", s.epochs, "Source training epochs")->capture_default_str();
  app.add_option("--" + prefix + "batch-size", s.batch_size, "Source training batch size")->capture_default_str();
  app.add_option("--" + prefix + "lr", s.lr, "Source training learning rate")->capture_default_str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string mf1_line(const char* what, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s MF1 %.2f\n", what, v);
  return buf;
}

struct GenDataArgs {
  std::size_t scenario = 0;
  std::string role = "target";
  Synth5Options opt;
  double train_fraction = 0.7;
  fs::path out = "data";
};

void cmd_gen_data(const GenDataArgs& a) {
  if (a.role != "source" && a.role != "target") throw ConfigError("--role must be source or target");
  const bool target = a.role == "target";
  const DomainSpec spec = synth5_domain(a.scenario, target, a.opt);
  auto [train, test] = split(gen_domain(spec), a.train_fraction, derive_seed(a.opt.seed, 2 * a.scenario + target));
  fs::create_directories(a.out);
  write_dataset(train, a.out / (spec.name + "_train.tsds"));
  write_dataset(test, a.out / (spec.name + "_test.tsds"));
  std::cout << spec.name << ": " << train.size() << " train / " << test.size() << " test samples in " << a.out
            << '\n';
}

struct TrainSourceArgs {
  EncoderConfig encoder;
  SourceTrainOptions train = SuiteConfig::synth5_preset().source;
  std::uint64_t backbone_seed = kDefaultBackboneSeed;
  fs::path data, test, out = "source.ckpt";
};

void cmd_train_source(TrainSourceArgs a) {
  const Dataset train = read_dataset(a.data);
  SourceModel m = train_source_model(a.encoder, a.backbone_seed, train, a.train, a.train.seed);
  write_checkpoint(m.to_checkpoint(), a.out);
  std::cout << mf1_line("train", evaluate_mf1(m.predict(train), train));
  if (!a.test.empty()) {
    const Dataset test = read_dataset(a.test);
    std::cout << mf1_line("test", evaluate_mf1(m.predict(test), test));
  }
  std::cout << "wrote " << a.out << '\n';
}

void cmd_serve(const fs::path& checkpoint, const std::string& addr) {
  auto teacher = std::make_shared<InProcessTeacher>(SourceModel::from_checkpoint(read_checkpoint(checkpoint)));
  TeacherServer server(teacher, addr, &std::cerr);
  server.start();
  std::cout << "serving " << checkpoint << " on " << server.address() << std::endl;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  const ServiceStats st = server.stats();
  std::cerr << "served " << st.hello << " hello, " << st.predict << " predict; refused " << st.forbidden
            << " forbidden, " << st.malformed << " malformed, " << st.bad_request << " bad requests\n";
}

struct AdaptArgs {
  RunConfig run;
  std::vector<std::string> teachers;
  fs::path data, test, out = "target.ckpt", report;
};

void cmd_adapt(AdaptArgs a) {
  if (a.teachers.empty()) a.teachers.push_back(default_teacher_address());
  std::vector<std::unique_ptr<RemoteTeacher>> remotes;
  std::vector<Teacher*> teachers;
  for (const std::string& addr : a.teachers) {
    remotes.push_back(std::make_unique<RemoteTeacher>(addr));
    teachers.push_back(remotes.back().get());
  }
  const TeacherInfo info = teachers.front()->info();
  a.run.encoder.series_len = info.series_len;
  a.run.encoder.channels = info.channels;
  a.run.encoder.classes = info.classes;
  const Dataset train = read_dataset(a.data);
  Dataset test;
  if (!a.test.empty()) test = read_dataset(a.test);
  AdaptResult r = adapt_with_teachers(a.run, teachers, train, a.test.empty() ? nullptr : &test, &std::cout);
  write_checkpoint(r.model.to_checkpoint(r.lambda), a.out);
  std::cout << "wrote " << a.out << '\n';
  if (!a.report.empty()) write_text(a.report, report_json(r.report).dump(2) + "\n");
}

void cmd_eval(const fs::path& checkpoint, const fs::path& data) {
  const Checkpoint ck = read_checkpoint(checkpoint);
  const Dataset ds = read_dataset(data);
  std::vector<Distribution> probs;
  if (ck.has("source.head.weight")) {
    probs = SourceModel::from_checkpoint(ck).predict(ds);
  } else {
    const CpfmModel m = CpfmModel::from_checkpoint(ck);
    probs = predict(m, ds, checkpoint_lambda(ck, m.teachers()));
  }
  std::cout << mf1_line(data.filename().string().c_str(), evaluate_mf1(probs, ds));
}

void cmd_suite(SuiteConfig cfg, const fs::path& out) {
  const SuiteResult r = run_suite(cfg, &std::cerr);
  write_suite(r, out);
  std::cout << suite_table(r);
}

void cmd_ablate(SuiteConfig cfg, const fs::path& out) {
  const auto rows = run_ablations(cfg, standard_ablations(), &std::cerr);
  for (const AblationRow& row : rows) write_suite(row.result, out / row.ablation.name());
  const std::string table = ablation_table(rows);
  write_text(out / "ablation.txt", table);
  std::cout << table;
}

void cmd_dump(const fs::path& checkpoint, const fs::path& data, const fs::path& out) {
  const CpfmModel m = CpfmModel::from_checkpoint(read_checkpoint(checkpoint));
  const Dataset ds = read_dataset(data);
  for (std::size_t i = 0; i < m.teachers(); ++i)
    for (std::size_t f = 0; f < 2; ++f) {
      const fs::path path = out / ("t" + std::to_string(i) + "_b" + std::to_string(f + 1) + ".csv");
      write_embeddings_csv(branch_embeddings(m, ds, i, f), ds, path);
      std::cout << "wrote " << path << '\n';
    }
}

/// Replaces `--config FILE` with one `--key=value` argument per file entry,
/// skipping keys that also appear as flags on the command line.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  auto it = std::find_if(args.begin(), args.end(),
                         [](const std::string& a) { return a == "--config" || a.rfind("--config=", 0) == 0; });
  if (it == args.end()) return args;
  std::string file;
  if (*it == "--config") {
    if (std::next(it) == args.end()) throw ConfigError("--config needs a file name");
    file = *std::next(it);
    it = args.erase(it, std::next(it, 2));
  } else {
    file = it->substr(9);
    it = args.erase(it);
  }
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config file " + file);
  auto given = [&](const std::string& key) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == "--" + key || a.rfind("--" + key + "=", 0) == 0 || (key.size() > 1 && a == "!--" + key);
    });
  };
  std::vector<std::string> injected;
  for (const CLI::ConfigItem& item : CLI::ConfigINI().from_config(in)) {
    if (!item.parents.empty()) throw ConfigError("config file must be flat, found section '" + item.parents[0] + "'");
    if (given(item.name)) continue;
    for (const std::string& v : item.inputs) injected.push_back("--" + item.name + "=" + v);
  }
  // Subcommand names come first on the command line, so the file's options go right after them.
  auto sub = std::find_if(args.begin() + 1, args.end(), [](const std::string& a) { return a.rfind("-", 0) != 0; });
  args.insert(sub == args.end() ? args.end() : std::next(sub), injected.begin(), injected.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Black-box time-series domain adaptation with prompted dual branches"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synth5 domain as train/test dataset files");
  gen_cmd->add_option("--scenario", gen.scenario, "Scenario 0..4")->capture_default_str();
  gen_cmd->add_option("--role", gen.role, "source or target")->capture_default_str();
  gen_cmd->add_option("--per-class", gen.opt.per_class, "Samples per class")->capture_default_str();
  gen_cmd->add_option("--series-len", gen.opt.series_len, "Series length")->capture_default_str();
  gen_cmd->add_option("--channels", gen.opt.channels, "Channels")->capture_default_str();
  gen_cmd->add_option("--seed", gen.opt.seed, "Data seed")->capture_default_str();
  gen_cmd->add_option("--train-fraction", gen.train_fraction, "Train share of each class")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->capture_default_str();

  TrainSourceArgs ts;
  auto* ts_cmd = app.add_subcommand("train-source", "Train a source model on labeled data");
  add_encoder_options(*ts_cmd, ts.encoder);
  add_source_options(*ts_cmd, ts.train, "");
  ts_cmd->add_option("--seed", ts.train.seed, "Training seed")->capture_default_str();
  ts_cmd->add_option("--backbone-seed", ts.backbone_seed, "Seed of the public backbone")->capture_default_str();
  ts_cmd->add_option("--data", ts.data, "Labeled training set")->required();
  ts_cmd->add_option("--test", ts.test, "Optional labeled test set");
  ts_cmd->add_option("--out", ts.out, "Checkpoint path")->capture_default_str();

  fs::path serve_ckpt;
  std::string serve_addr = "127.0.0.1:7070";
  auto* serve_cmd = app.add_subcommand("serve-teacher", "Serve a source checkpoint as a black-box teacher");
  serve_cmd->add_option("--checkpoint", serve_ckpt, "Source checkpoint")->required();
  serve_cmd->add_option("--addr", serve_addr, "host:port to listen on")->capture_default_str();

  AdaptArgs ad;
  ad.run = SuiteConfig::synth5_preset().run;
  auto* ad_cmd = app.add_subcommand("adapt", "Adapt a target model using remote teachers");
  add_encoder_options(*ad_cmd, ad.run.encoder);
  add_adapt_options(*ad_cmd, ad.run);
  ad_cmd->add_option("--teacher", ad.teachers, "Teacher host:port, repeatable (default $CPFM_TEACHER_ADDR)");
  ad_cmd->add_option("--data", ad.data, "Unlabeled target set (labels, if any, are ignored)")->required();
  ad_cmd->add_option("--test", ad.test, "Optional labeled target test set");
  ad_cmd->add_option("--out", ad.out, "Checkpoint path")->capture_default_str();
  ad_cmd->add_option("--report", ad.report, "Write the run report as JSON");

  fs::path eval_ckpt, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "Macro-F1 of a source or target checkpoint");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "Labeled dataset")->required();

  SuiteConfig suite = SuiteConfig::synth5_preset();
  fs::path suite_out = "results";
  auto add_suite_options = [&](CLI::App& cmd) {
    add_encoder_options(cmd, suite.run.encoder);
    add_adapt_options(cmd, suite.run, false);
    add_source_options(cmd, suite.source, "source-");
    cmd.add_option("--sources", suite.sources, "Teachers per target (1..5)")->capture_default_str();
    cmd.add_option("--scenarios", suite.scenarios, "Scenario indices")->capture_default_str();
    cmd.add_option("--seeds", suite.seeds, "Seeds")->capture_default_str();
    cmd.add_option("--source-per-class", suite.source_per_class, "Source samples per class")
        ->capture_default_str();
    cmd.add_option("--target-per-class", suite.target_per_class, "Target samples per class")
        ->capture_default_str();
    cmd.add_option("--train-fraction", suite.train_fraction, "Train share of each class")->capture_default_str();
    cmd.add_flag("!--in-process", suite.socket_teachers, "Call teachers directly instead of over loopback TCP");
    cmd.add_flag("--upper-bound", suite.upper_bound, "Also train on labeled target data");
    cmd.add_flag("--log-epochs", suite.log_epochs, "Log every adaptation epoch");
    cmd.add_option("--out", suite_out, "Output directory")->capture_default_str();
  };
  auto* suite_cmd = app.add_subcommand("suite", "Run the synth5 scenario suite");
  add_suite_options(*suite_cmd);
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the suite for the full model and each ablation");
  add_suite_options(*ablate_cmd);

  fs::path dump_ckpt, dump_data, dump_out = "embeddings";
  auto* dump_cmd = app.add_subcommand("dump-embeddings", "Write mean-pooled branch embeddings as CSV");
  dump_cmd->add_option("--checkpoint", dump_ckpt, "Target checkpoint")->required();
  dump_cmd->add_option("--data", dump_data, "Dataset")->required();
  dump_cmd->add_option("--out", dump_out, "Output directory")->capture_default_str();

  fs::path report_in;
  auto* report_cmd = app.add_subcommand("report", "Summarize a results.csv as a table");
  report_cmd->add_option("--results", report_in, "results.csv from suite")->required();

  for (CLI::App* sub : app.get_subcommands({})) {
    sub->add_option("--config", "Flat key=value file; each key is a long option name, flags win over the file");
  }

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }
  std::vector<char*> expanded;
  for (std::string& a : args) expanded.push_back(a.data());
  CLI11_PARSE(app, static_cast<int>(expanded.size()), expanded.data());
  try {
    if (*gen_cmd) cmd_gen_data(gen);
    if (*ts_cmd) cmd_train_source(ts);
    if (*serve_cmd) cmd_serve(serve_ckpt, serve_addr);
    if (*ad_cmd) cmd_adapt(ad);
    if (*eval_cmd) cmd_eval(eval_ckpt, eval_data);
    if (*suite_cmd) cmd_suite(suite, suite_out);
    if (*ablate_cmd) cmd_ablate(suite, suite_out);
    if (*dump_cmd) cmd_dump(dump_ckpt, dump_data, dump_out);
    if (*report_cmd) std::cout << suite_table(read_results_csv(report_in));
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
