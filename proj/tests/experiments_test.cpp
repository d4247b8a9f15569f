#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "psal/error.hpp"
#include "psal/experiments.hpp"
#include "psal/profile_index.hpp"

namespace psal {
namespace {

using testing::trained_fixture;

struct Setup {
  ProfileStats stats;
  Dataset wrong;
  Dataset correct;
};

const Setup& setup() {
  static const Setup s = [] {
    const auto& f = trained_fixture();
    Setup out;
    out.stats = compute_stats(f.model, f.data.splits.train, "train", 4);
    out.wrong = misclassified_subset(f.model, f.data.splits.holdout, 6);
    out.correct = correct_subset(f.model, f.data.splits.holdout, 6);
    return out;
  }();
  return s;
}

SweepConfig small_config() {
  SweepConfig c;
  c.counts = {0, 2, 8};
  c.seed = 11;
  c.workers = 3;
  c.resamples = 200;
  c.noise_seeds = 2;
  c.neighbors = 3;
  return c;
}

TEST(Selection, ModesPickExtremesAndRandomIsSeeded) {
  const std::vector<double> z{0.5, -2.0, 3.0, 1.0, -0.1, 3.0};
  EXPECT_EQ(select_filters(z, SelectionMode::kMostSalient, 2, 0, 0), (std::vector<std::size_t>{2, 5}));
  EXPECT_EQ(select_filters(z, SelectionMode::kLeastSalient, 2, 0, 0), (std::vector<std::size_t>{1, 4}));
  const auto a = select_filters(z, SelectionMode::kRandom, 3, 9, 4);
  EXPECT_EQ(a, select_filters(z, SelectionMode::kRandom, 3, 9, 4));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 3u);
  EXPECT_TRUE(select_filters(z, SelectionMode::kRandom, 0, 9, 4).empty());
  EXPECT_THROW(select_filters(z, SelectionMode::kRandom, 7, 9, 4), ConfigError);
  bool differs = false;
  for (std::size_t id = 0; id < 10 && !differs; ++id) {
    differs = select_filters(z, SelectionMode::kRandom, 3, 9, id) != a;
  }
  EXPECT_TRUE(differs);
}

TEST(Selection, CountsFromPercentages) {
  EXPECT_EQ(counts_from_percentages(168, {1, 5, 10}), (std::vector<std::size_t>{2, 8, 17}));
  EXPECT_EQ(counts_from_percentages(10, {1, 2}), (std::vector<std::size_t>{1}));
  EXPECT_THROW(counts_from_percentages(10, {0}), ConfigError);
}

TEST(SweepConfig, ValidationAndJson) {
  SweepConfig c = small_config();
  EXPECT_NO_THROW(c.validate(50));
  EXPECT_THROW(c.validate(5), ConfigError);
  c.counts = {3, 3};
  EXPECT_THROW(c.validate(50), ConfigError);
  c = small_config();
  c.modes = {SelectionMode::kRandom};
  const SweepConfig back = sweep_config_from_json(sweep_config_to_json(c));
  EXPECT_EQ(back.modes, c.modes);
  EXPECT_EQ(back.counts, c.counts);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_THROW(sweep_config_from_json({{"modes", {"sideways"}}}), ConfigError);
}

TEST(PruningSweep, ZeroFiltersChangeNothingAndModelIsUntouched) {
  const auto& f = trained_fixture();
  const auto& s = setup();
  ASSERT_FALSE(s.wrong.empty());
  const auto before = f.model.fingerprint();
  const auto r = pruning_sweep(f.model, s.wrong, s.stats, small_config());
  EXPECT_EQ(f.model.fingerprint(), before);
  EXPECT_EQ(r.records.size(), s.wrong.size() * 3 * 3);
  for (auto mode : small_config().modes) {
    const auto& row = r.row(mode, 0);
    EXPECT_EQ(row.d_predicted.mean, 0.0);
    EXPECT_EQ(row.d_true.mean, 0.0);
    EXPECT_EQ(row.corrected.mean, 0.0);
    EXPECT_EQ(row.samples, s.wrong.size());
  }
  for (const auto& rec : r.records) {
    EXPECT_GE(rec.d_predicted, -1.0);
    EXPECT_LE(rec.d_predicted, 1.0);
  }
}

TEST(PruningSweep, DeterministicAcrossWorkerCounts) {
  const auto& f = trained_fixture();
  const auto& s = setup();
  SweepConfig c = small_config();
  const auto a = report_to_json(pruning_sweep(f.model, s.wrong, s.stats, c));
  c.workers = 1;
  const auto b = report_to_json(pruning_sweep(f.model, s.wrong, s.stats, c));
  EXPECT_EQ(a.dump(), b.dump());
}

TEST(PruningSweep, CorrectPoolRunsAndEmptyPoolThrows) {
  const auto& f = trained_fixture();
  const auto& s = setup();
  ASSERT_FALSE(s.correct.empty());
  const auto r = correct_pool_pruning(f.model, s.correct, s.stats, small_config());
  EXPECT_EQ(r.name, "correct_pool_pruning");
  // samples were correct to begin with, so corrected is the rate of staying correct
  EXPECT_EQ(r.row(SelectionMode::kMostSalient, 0).corrected.mean, 1.0);
  Dataset empty;
  EXPECT_THROW(pruning_sweep(f.model, empty, s.stats, small_config()), ConfigError);
}

TEST(PerturbationSweep, ZeroNoiseGivesZeroDeltas) {
  const auto& f = trained_fixture();
  const auto& s = setup();
  SweepConfig c = small_config();
  c.noise_std = 0.0;
  const auto r = perturbation_sweep(f.model, s.wrong, s.stats, c);
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.d_predicted, 0.0);
    EXPECT_EQ(rec.d_true, 0.0);
  }
  c.noise_std = 0.5;
  const auto noisy = perturbation_sweep(f.model, s.wrong, s.stats, c);
  double moved = 0.0;
  for (const auto& rec : noisy.records) moved += std::abs(rec.d_predicted);
  EXPECT_GT(moved, 0.0);
}

struct NeighborSetup {
  ProfileIndex index;
};

const ProfileIndex& holdout_index() {
  static const ProfileIndex idx = [] {
    const auto& f = trained_fixture();
    return ProfileIndex::build(f.model, f.data.splits.holdout, setup().stats, 4);
  }();
  return idx;
}

TEST(FinetuneSweep, ZeroStepGivesZeroMetrics) {
  const auto& f = trained_fixture();
  const auto& s = setup();
  SweepConfig c = small_config();
  c.counts = {0, 1};
  c.step_size = 0.0;
  c.allow_over_cap = true;  // 54 filters leave a cap of zero
  const auto before = f.model.fingerprint();
  const auto r = finetune_sweep(f.model, s.wrong, s.stats, f.data.splits.holdout, holdout_index(), c);
  EXPECT_EQ(f.model.fingerprint(), before);
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.d_true, 0.0);
    EXPECT_EQ(rec.corrected, 0.0);
    EXPECT_EQ(rec.neighbor_corrected, 0.0);
    EXPECT_EQ(rec.neighbor_true_delta, 0.0);
    EXPECT_EQ(rec.baseline_corrected, 0.0);
  }
}

TEST(FinetuneSweep, PositiveStepRaisesTrueConfidenceForMostSalient) {
  const auto& f = trained_fixture();
  const auto& s = setup();
  SweepConfig c = small_config();
  c.counts = {1};
  c.step_size = 0.05;
  c.modes = {SelectionMode::kMostSalient};
  c.allow_over_cap = true;
  const auto r = finetune_sweep(f.model, s.wrong, s.stats, f.data.splits.holdout, holdout_index(), c);
  EXPECT_GT(r.row(SelectionMode::kMostSalient, 1).d_true.mean, 0.0);
  c.allow_over_cap = false;
  EXPECT_THROW(finetune_sweep(f.model, s.wrong, s.stats, f.data.splits.holdout, holdout_index(), c), ConfigError);
}

TEST(MaskExperiment, RecordsAreConsistentAndReproducible) {
  const auto& f = trained_fixture();
  const auto& s = setup();
  MaskConfig c;
  c.percent = 5;
  c.seed = 2;
  c.workers = 3;
  const auto a = mask_dataset_experiment(f.model, s.wrong, s.stats, c);
  ASSERT_EQ(a.records.size(), s.wrong.size());
  const std::size_t pixels = 16 * 16;
  for (const auto& r : a.records) EXPECT_EQ(r.masked_pixels, (pixels * 5 + 99) / 100);
  c.workers = 1;
  const auto b = mask_dataset_experiment(f.model, s.wrong, s.stats, c);
  EXPECT_EQ(mask_report_to_json(a).dump(), mask_report_to_json(b).dump());
  const auto& t = a.salient_vs_random_incorrect;
  EXPECT_EQ(t.positive + t.negative + t.ties, a.records.size());
  c.percent = 0;
  EXPECT_THROW(mask_dataset_experiment(f.model, s.wrong, s.stats, c), ConfigError);
}

TEST(Reports, CsvHasOneRowPerModeAndCount) {
  const auto& f = trained_fixture();
  const auto& s = setup();
  const auto r = pruning_sweep(f.model, s.wrong, s.stats, small_config());
  const auto dir = std::filesystem::temp_directory_path() / "psal_exp_test";
  write_report_csv(dir / "prune.csv", r);
  std::ifstream in(dir / "prune.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("mode,k,samples,d_predicted_mean", 0), 0u);
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 9u);
  write_json(dir / "prune.json", report_to_json(r));
  EXPECT_TRUE(std::filesystem::exists(dir / "prune.json"));
  std::filesystem::remove_all(dir);
}

TEST(Bootstrap, ConstantAndNormalSamples) {
  const auto c = bootstrap_mean_ci(std::vector<double>(50, 2.5), 500, 0.95, 1);
  EXPECT_EQ(c.lower, 2.5);
  EXPECT_EQ(c.upper, 2.5);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(10000);
  for (auto& x : v) x = n(rng);
  const auto ci = bootstrap_mean_ci(v, 1000, 0.95, 3);
  // half-width of a 95% interval for the mean of 10000 unit normals is about 1.96/100
  EXPECT_NEAR(ci.upper - ci.estimate, 0.0196, 0.003);
  EXPECT_NEAR(ci.estimate - ci.lower, 0.0196, 0.003);
}

}  // namespace
}  // namespace psal
