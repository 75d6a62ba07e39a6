// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cpfm/harness.hpp"

using namespace cpfm;
namespace fs = std::filesystem;

namespace {

// Small enough that a 15-run suite takes about a second.
SuiteConfig tiny_suite() {
  SuiteConfig s = SuiteConfig::synth5_preset();
  EncoderConfig& e = s.run.encoder;
  e.series_len = 32;
  e.patch_len = 8;
  e.model_dim = 8;
  e.heads = 2;
  e.layers = 1;
  e.prompt_len = 2;
  s.source_per_class = 4;
  s.target_per_class = 4;
  s.source.epochs = 2;
  s.run.adapt.epochs = 2;
  return s;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("cpfm_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string first_line(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  return line;
}

}  // namespace

TEST(Ablation, NamesAndEffectiveConfig) {
  RunConfig r;
  EXPECT_EQ(r.ablation.name(), "full");
  r.ablation.no_prompt = true;
  r.ablation.naive_avg = true;
  EXPECT_EQ(r.ablation.name(), "no_prompt+naive_avg");
  EXPECT_EQ(r.effective_encoder().prompt_len, 0u);
  EXPECT_TRUE(r.effective_adapt().naive_avg);

  RunConfig ir;
  ir.ablation.no_input_recon = true;
  EXPECT_EQ(ir.effective_adapt().weights.input_recon, 0.0);
  EXPECT_FALSE(ir.effective_adapt().mask_inputs);
  EXPECT_EQ(ir.effective_adapt().weights.prompt_recon, ir.adapt.weights.prompt_recon);

  RunConfig pr;
  pr.ablation.no_prompt_recon = true;
  EXPECT_EQ(pr.effective_adapt().weights.prompt_recon, 0.0);
  EXPECT_TRUE(pr.effective_adapt().mask_inputs);
}

TEST(SuiteSources, WrapAround) {
  EXPECT_EQ(suite_sources(3, 1), (std::vector<std::size_t>{3}));
  EXPECT_EQ(suite_sources(3, 3), (std::vector<std::size_t>{3, 4, 0}));
  EXPECT_EQ(suite_sources(0, 5), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(AdaptWithTeachers, RejectsIncompatibleTeachers) {
  const SuiteConfig s = tiny_suite();
  const DomainSplit target = synth5_split(s, 0, true, 0);
  EXPECT_THROW(adapt_with_teachers(s.run, {}, target.train), ConfigError);

  EncoderConfig other = s.run.encoder;
  other.classes = 4;
  InProcessTeacher wrong(SourceModel::init(other, public_backbone(other, 1), 2));
  EXPECT_THROW(adapt_with_teachers(s.run, {&wrong}, target.train), ContractError);
}

TEST(Suite, FifteenRowsAndDeterministicReports) {
  SuiteConfig s = tiny_suite();
  const SuiteResult a = run_suite(s);
  s.socket_teachers = false;
  const SuiteResult b = run_suite(s);
  ASSERT_EQ(a.rows.size(), 15u);
  ASSERT_EQ(b.rows.size(), 15u);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(report_json(a.rows[i], false).dump(), report_json(b.rows[i], false).dump()) << i;
    EXPECT_EQ(a.rows[i].epochs.size(), 2u);
    EXPECT_GE(a.rows[i].mf1, 0.0);
    EXPECT_LE(a.rows[i].mf1, 100.0);
    EXPECT_EQ(a.rows[i].teacher_mf1.size(), 1u);
    // With one teacher the source-only column is that teacher's score.
    EXPECT_EQ(a.rows[i].source_only_mf1, a.rows[i].teacher_mf1[0]);
  }
  EXPECT_EQ(a.rows.front().scenario, "T0");
  EXPECT_EQ(a.rows.back().seed, 2u);
}

TEST(Suite, MultiSourceRowsCarryEveryTeacher) {
  SuiteConfig s = tiny_suite();
  s.sources = 3;
  s.scenarios = {4};
  s.seeds = {1};
  s.socket_teachers = false;
  const SuiteResult r = run_suite(s);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].teachers, 3u);
  EXPECT_EQ(r.rows[0].teacher_mf1.size(), 3u);
  for (const EpochRecord& e : r.rows[0].epochs) {
    ASSERT_EQ(e.lambda.size(), 3u);
    EXPECT_DOUBLE_EQ(*std::max_element(e.lambda.begin(), e.lambda.end()), 1.0);
  }
}

TEST(Suite, RejectsBadConfig) {
  SuiteConfig s = tiny_suite();
  s.sources = 6;
  EXPECT_THROW(run_suite(s), ConfigError);
  s = tiny_suite();
  s.scenarios = {5};
  EXPECT_THROW(run_suite(s), ConfigError);
  s = tiny_suite();
  s.seeds.clear();
  EXPECT_THROW(run_suite(s), ConfigError);
}

TEST(SuiteFiles, WrittenAndReadBack) {
  SuiteConfig s = tiny_suite();
  s.scenarios = {0, 1};
  s.seeds = {0};
  s.socket_teachers = false;
  s.upper_bound = true;
  const SuiteResult r = run_suite(s);
  const fs::path dir = scratch_dir("files");
  write_suite(r, dir);
  EXPECT_EQ(first_line(dir / "results.csv"),
            "scenario,seed,variant,teachers,mf1,source_only_mf1,upper_bound_mf1,teacher_mf1");
  EXPECT_EQ(first_line(dir / "epochs.csv"),
            "scenario,seed,variant,epoch,ce,prompt_recon,input_recon,total,test_mf1,buffers_on_simplex");
  EXPECT_EQ(first_line(dir / "lambda.csv"), "scenario,seed,variant,epoch,teacher,lambda");
  EXPECT_EQ(first_line(dir / "timings.csv"), "scenario,seed,variant,epoch,seconds");
  EXPECT_EQ(first_line(dir / "table.txt").substr(0, 8), "scenario");

  const SuiteResult back = read_results_csv(dir / "results.csv");
  ASSERT_EQ(back.rows.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.rows[i].mf1, r.rows[i].mf1);
    EXPECT_EQ(back.rows[i].source_only_mf1, r.rows[i].source_only_mf1);
    EXPECT_EQ(back.rows[i].upper_bound_mf1, r.rows[i].upper_bound_mf1);
  }
  EXPECT_EQ(suite_table(back), suite_table(r));
  fs::remove_all(dir);
}

TEST(Tables, AlignedColumns) {
  const std::string t = aligned_table({{"a", "1"}, {"long", "100"}});
  EXPECT_EQ(t, "a       1\nlong  100\n");
  EXPECT_EQ(mean_sd({1.0, 0.5}), "1.00 ± 0.50");
  EXPECT_EQ(mean_sd({std::nan(""), 0.0}), "-");
}

TEST(Embeddings, OneRowPerSampleAndClonedBranchesAgree) {
  SuiteConfig s = tiny_suite();
  const DomainSplit target = synth5_split(s, 2, true, 0);
  const EncoderConfig& cfg = s.run.encoder;
  const CpfmModel m = CpfmModel::init(cfg, public_backbone(cfg, 1), 2, 3, true);
  const auto b1 = branch_embeddings(m, target.test, 1, 0, 7);
  const auto b2 = branch_embeddings(m, target.test, 1, 1, 7);
  ASSERT_EQ(b1.size(), target.test.size());
  EXPECT_EQ(b1.front().size(), cfg.model_dim);
  EXPECT_EQ(b1, b2);

  const fs::path dir = scratch_dir("emb");
  write_embeddings_csv(b1, target.test, dir / "e.csv");
  std::ifstream in(dir / "e.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, target.test.size() + 1);
  fs::remove_all(dir);
}
