// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "cpfm/dataset.hpp"
#include "cpfm/metrics.hpp"
#include "cpfm/source_model.hpp"

using namespace cpfm;

namespace {

DomainSpec clean_spec(std::uint32_t per_class = 3) {
  DomainSpec s;
  s.name = "clean";
  s.classes = 3;
  s.series_len = 16;
  s.channels = 2;
  s.base_freqs = {1.0, 2.0, 3.0};
  s.per_class = per_class;
  s.seed = 11;
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cpfm_dataset_test_" + name);
}

}  // namespace

TEST(GenDomain, NoiselessSamplesAreExactSinusoids) {
  const Dataset ds = gen_domain(clean_spec());
  ASSERT_EQ(ds.size(), 9u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t c = ds.labels[i];
    EXPECT_EQ(c, i / 3);
    auto x = ds.sample(i);
    for (std::size_t t = 0; t < 16; ++t)
      for (std::size_t ch = 0; ch < 2; ++ch) {
        const double want = std::sin(2 * std::numbers::pi * (c + 1.0) * t / 16 + ch * std::numbers::pi / 4);
        EXPECT_DOUBLE_EQ(x[t * 2 + ch], want);
      }
  }
  EXPECT_TRUE(std::ranges::equal(ds.sample(0), ds.sample(1)));
}

TEST(GenDomain, AppliesShift) {
  DomainSpec s = clean_spec(1);
  s.freq_shift = 0.5;
  s.amplitude = 2.0;
  s.phase = 0.25;
  const Dataset ds = gen_domain(s);
  const double want = 2.0 * std::sin(2 * std::numbers::pi * 1.5 * 3 / 16 + 0.25 + std::numbers::pi / 4);
  EXPECT_DOUBLE_EQ(ds.sample(0)[3 * 2 + 1], want);
}

TEST(GenDomain, SameSeedIsBitIdentical) {
  DomainSpec s = clean_spec();
  s.noise_std = 0.5;
  EXPECT_EQ(gen_domain(s), gen_domain(s));
  DomainSpec other = s;
  other.seed = 12;
  EXPECT_NE(gen_domain(s).values, gen_domain(other).values);
}

TEST(GenDomain, SampleNoiseDoesNotDependOnDatasetSize) {
  DomainSpec small = clean_spec(2);
  small.noise_std = 1.0;
  DomainSpec large = small;
  large.per_class = 5;
  // Sample 0 of class 0 sits at index 0 in both.
  EXPECT_TRUE(std::ranges::equal(gen_domain(small).sample(0), gen_domain(large).sample(0)));
}

TEST(GenDomain, RejectsInvalidSpecs) {
  DomainSpec s = clean_spec();
  s.base_freqs = {1.0, 1.0, 2.0};
  EXPECT_THROW(gen_domain(s), ConfigError);
  s = clean_spec();
  s.classes = 1;
  s.base_freqs = {1.0};
  EXPECT_THROW(gen_domain(s), ConfigError);
  s = clean_spec();
  s.per_class = 0;
  EXPECT_THROW(gen_domain(s), ConfigError);
  s = clean_spec();
  s.noise_std = -1.0;
  EXPECT_THROW(gen_domain(s), ConfigError);
}

TEST(DatasetFile, RoundTripsBitExact) {
  DomainSpec s = clean_spec();
  s.noise_std = 0.3;
  const Dataset ds = gen_domain(s);
  const auto path = temp_file("labeled.tsds");
  write_dataset(ds, path);
  const Dataset back = read_dataset(path);
  EXPECT_EQ(back, ds);
  EXPECT_EQ(encode_dataset(back), encode_dataset(ds));
  std::filesystem::remove(path);
}

TEST(DatasetFile, UnlabeledRoundTripsWithFlagCleared) {
  const Dataset ds = gen_domain(clean_spec()).unlabeled();
  const auto bytes = encode_dataset(ds);
  EXPECT_EQ(bytes[6], 0);  // flags low byte
  const Dataset back = decode_dataset(bytes);
  EXPECT_FALSE(back.has_labels);
  EXPECT_TRUE(back.labels.empty());
  EXPECT_EQ(back, ds);
}

TEST(DatasetFile, HeaderLayout) {
  const auto bytes = encode_dataset(gen_domain(clean_spec()));
  ASSERT_EQ(bytes.size(), 4 + 2 + 2 + 16 + 9 * 32 * 8 + 9 * 2u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TSDS");
  EXPECT_EQ(bytes[4], 1);  // version
  EXPECT_EQ(bytes[6], 1);  // has labels
  EXPECT_EQ(bytes[8], 9);  // n
  EXPECT_EQ(bytes[12], 16);
  EXPECT_EQ(bytes[16], 2);
  EXPECT_EQ(bytes[20], 3);
}

TEST(DatasetFile, TruncationIsAFormatError) {
  const auto bytes = encode_dataset(gen_domain(clean_spec()));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_dataset(part), FormatError) << "cut at " << cut;
  }
}

TEST(DatasetFile, ReportsOffsets) {
  auto bytes = encode_dataset(gen_domain(clean_spec()));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    decode_dataset(bad_magic);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto bad_version = bytes;
  bad_version[4] = 9;
  try {
    decode_dataset(bad_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  auto bad_label = bytes;
  bad_label[bytes.size() - 2] = 7;
  try {
    decode_dataset(bad_label);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), bytes.size() - 2);
  }
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_dataset(trailing), FormatError);
}

TEST(DatasetFile, MissingFileThrows) {
  EXPECT_ANY_THROW(read_dataset(temp_file("does_not_exist.tsds")));
}

TEST(Split, SeventyThirtyPerClass) {
  const Dataset ds = gen_domain(clean_spec(10));
  auto [train, test] = split(ds, 0.7, 5);
  ASSERT_EQ(train.size(), 21u);
  ASSERT_EQ(test.size(), 9u);
  for (std::uint16_t c = 0; c < 3; ++c) {
    EXPECT_EQ(std::ranges::count(train.labels, c), 7);
    EXPECT_EQ(std::ranges::count(test.labels, c), 3);
  }
}

TEST(Split, SameSeedSameSplitAndDisjointCover) {
  DomainSpec s = clean_spec(10);
  s.noise_std = 1.0;
  const Dataset ds = gen_domain(s);
  auto a = split(ds, 0.6, 2);
  auto b = split(ds, 0.6, 2);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  auto c = split(ds, 0.6, 3);
  EXPECT_NE(a.first.values, c.first.values);
  // Every sample lands in exactly one part.
  std::size_t found = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto x = ds.sample(i);
    auto in = [&](const Dataset& part) {
      for (std::size_t j = 0; j < part.size(); ++j)
        if (std::ranges::equal(part.sample(j), x)) return 1;
      return 0;
    };
    EXPECT_EQ(in(a.first) + in(a.second), 1);
    found += in(a.first);
  }
  EXPECT_EQ(found, a.first.size());
}

TEST(Split, RejectsBadFraction) {
  const Dataset ds = gen_domain(clean_spec());
  EXPECT_THROW(split(ds, 0.0, 1), ContractError);
  EXPECT_THROW(split(ds, 1.0, 1), ContractError);
}

TEST(Synth5, DomainsAreDistinctAndDeterministic) {
  Synth5Options opt;
  opt.per_class = 2;
  for (std::size_t i = 0; i < synth5_table().size(); ++i) {
    const DomainSpec src = synth5_domain(i, false, opt);
    const DomainSpec tgt = synth5_domain(i, true, opt);
    EXPECT_NE(src.seed, tgt.seed);
    EXPECT_EQ(gen_domain(src), gen_domain(synth5_domain(i, false, opt)));
    EXPECT_EQ(gen_domain(tgt).size(), 10u);
  }
  EXPECT_THROW(synth5_domain(5, false, opt), ConfigError);
}

// A source model loses accuracy when the target shifts frequency and doubles the noise.
TEST(Synth5, FrequencyShiftIsMeasurable) {
  EncoderConfig cfg;
  cfg.series_len = 32;
  cfg.channels = 1;
  cfg.patch_len = 8;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.prompt_len = 2;
  cfg.classes = 3;
  DomainSpec src;
  src.name = "src";
  src.classes = 3;
  src.series_len = 32;
  src.channels = 1;
  src.base_freqs = {1.0, 2.0, 3.0};
  src.noise_std = 0.2;
  src.per_class = 30;
  src.seed = 1;
  DomainSpec tgt = src;
  tgt.freq_shift = 0.8;
  tgt.noise_std = 0.4;
  tgt.seed = 2;
  auto [train, held_out] = split(gen_domain(src), 0.7, 3);
  const Dataset target = gen_domain(tgt);

  SourceModel model = SourceModel::init(cfg, Backbone::init(cfg, 4), 5);
  SourceTrainOptions opt;
  opt.epochs = 25;
  opt.lr = 1e-2;
  train_source(model, train, opt);
  auto score = [&](const Dataset& ds) {
    std::vector<std::size_t> preds, labels(ds.labels.begin(), ds.labels.end());
    for (const auto& p : model.predict(ds)) preds.push_back(argmax(p));
    return macro_f1(preds, labels, 3);
  };
  EXPECT_GT(score(held_out), score(target) + 10.0);
}
