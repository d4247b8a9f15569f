#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "fixtures.hpp"
#include "psal/error.hpp"
#include "psal/saliency.hpp"
#include "test_util.hpp"

namespace psal {
namespace {

using testing::rel_err;
using testing::trained_fixture;

ModelSpec tiny_plain() {
  ModelSpec spec;
  spec.architecture = Architecture::kPlainCnn;
  spec.widths = {3, 4};
  spec.blocks_per_stage = 1;
  spec.channels = 2;
  spec.height = 6;
  spec.width = 6;
  spec.num_classes = 3;
  return spec;
}

Sample random_sample(const ModelSpec& spec, std::uint64_t seed, std::size_t label) {
  std::mt19937_64 rng(seed);
  return {seed, testing::random_tensor({spec.channels, spec.height, spec.width}, rng), label};
}

std::vector<std::size_t> argsort_desc(const std::vector<double>& v) { return top_k(v, v.size()); }

TEST(ParamSaliency, NonNegativeAndPartitionAccounting) {
  const auto& t = trained_fixture();
  for (std::size_t i = 0; i < 5; ++i) {
    const auto ps = param_saliency(t.model, t.data.splits.val.samples[i]);
    for (double v : ps.values) ASSERT_GE(v, 0.0);
    const auto prof = filter_aggregate(ps, t.model.registry());
    double by_filter = 0.0, total = 0.0;
    for (const auto& g : t.model.registry().groups()) by_filter += g.alpha.size() * prof.values[g.id];
    for (double v : ps.values) total += v;
    EXPECT_LT(rel_err(by_filter, total), 1e-9);
  }
}

TEST(ParamSaliency, DeadFilterSilencesItsWeightsAndConsumers) {
  const auto& t = trained_fixture();
  const auto& layer0 = t.model.conv_layers()[0];
  const std::size_t channel = 2;
  const Model dead = prune_filters(t.model, {layer0.filter_offset + channel});
  const auto ps = param_saliency(dead, t.data.splits.val.samples[0]);
  for (auto i : dead.registry().group(layer0.filter_offset + channel).alpha) EXPECT_EQ(ps.values[i], 0.0);
  // Every conv that reads layer 0's output directly sees a zero input channel.
  std::size_t checked = 0;
  for (const auto& l : dead.conv_layers()) {
    if (l.layer_id == 0 || l.in_channels != layer0.out_channels || l.stage != 1 || checked > 0) continue;
    for (std::size_t o = 0; o < l.out_channels; ++o) {
      for (std::size_t k = 0; k < l.kernel * l.kernel; ++k) {
        const std::size_t idx = l.weight_offset + o * l.fan_in() + channel * l.kernel * l.kernel + k;
        EXPECT_EQ(ps.values[idx], 0.0) << l.name;
      }
    }
    ++checked;
  }
  EXPECT_EQ(checked, 1u);
}

TEST(ParamSaliency, MatchesFiniteDifferenceOfLoss) {
  const ModelSpec spec = tiny_plain();
  std::size_t compared = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Model model(spec, seed);
    const Sample s = random_sample(spec, 100 + seed, seed % 3);
    const auto ps = param_saliency(model, s);
    const double h = 1e-5;
    for (std::size_t l = 0; l < model.conv_layers().size(); ++l) {
      Tensor w = model.conv_weights()[l];
      const std::size_t base = model.conv_layers()[l].weight_offset;
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double orig = w.at(i);
        auto eval = [&](double v, std::uint64_t* sig) {
          w.mutable_data()[i] = v;
          ActivationPatternProbe probe;
          const double loss = sample_loss(model, s);
          *sig = probe.signature();
          return loss;
        };
        std::uint64_t s0, s1, s2;
        const double lp = eval(orig + h, &s1), lm = eval(orig - h, &s2);
        eval(orig, &s0);
        w.mutable_data()[i] = orig;
        if (s0 != s1 || s0 != s2) continue;
        EXPECT_LT(rel_err(ps.values[base + i], std::fabs((lp - lm) / (2 * h))), 1e-4) << "layer " << l << " i " << i;
        ++compared;
      }
    }
  }
  EXPECT_GT(compared, 300u);
}

TEST(FilterAggregate, ConstantsDirectSumAndZero) {
  const Model model(tiny_plain(), 0);
  const auto& reg = model.registry();
  ParameterSaliency ps;
  ps.values.assign(reg.kernel_weight_count(), 0.25);
  for (double v : filter_aggregate(ps, reg).values) EXPECT_DOUBLE_EQ(v, 0.25);
  std::fill(ps.values.begin(), ps.values.end(), 0.0);
  for (double v : filter_aggregate(ps, reg).values) EXPECT_EQ(v, 0.0);
  const auto& g = reg.group(4);
  for (std::size_t j = 0; j < g.alpha.size(); ++j) ps.values[g.alpha[j]] = static_cast<double>(j + 1);
  const double oracle = static_cast<double>(g.alpha.size() + 1) / 2.0;  // mean of 1..n
  EXPECT_NEAR(filter_aggregate(ps, reg).values[4], oracle, 1e-15);
  ps.values.pop_back();
  EXPECT_THROW(filter_aggregate(ps, reg), ShapeError);
}

FilterSaliencyProfile make_profile(std::vector<double> v) {
  FilterSaliencyProfile p;
  p.values = std::move(v);
  return p;
}

TEST(ProfileStats, SingleAndTwoPoint) {
  const auto one = stats_from_profiles({make_profile({1.0, 2.0, 0.0})}, "r");
  EXPECT_EQ(one.mean, (std::vector<double>{1.0, 2.0, 0.0}));
  for (double s : one.std) EXPECT_EQ(s, 0.0);
  const auto two = stats_from_profiles({make_profile({1.0, 5.0}), make_profile({3.0, 2.0})}, "r");
  EXPECT_DOUBLE_EQ(two.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(two.mean[1], 3.5);
  EXPECT_DOUBLE_EQ(two.std[0], 1.0);
  EXPECT_DOUBLE_EQ(two.std[1], 1.5);
  EXPECT_THROW(stats_from_profiles({}, "r"), ConfigError);
}

TEST(ProfileStats, MatchesWelfordOracle) {
  std::mt19937_64 rng(3);
  std::gamma_distribution<double> dist(2.0, 0.5);
  std::vector<FilterSaliencyProfile> profiles;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(17);
    for (auto& x : v) x = dist(rng);
    profiles.push_back(make_profile(v));
  }
  const auto st = stats_from_profiles(profiles, "r");
  for (std::size_t k = 0; k < 17; ++k) {
    double mean = 0.0, m2 = 0.0;
    for (std::size_t n = 0; n < profiles.size(); ++n) {
      const double x = profiles[n].values[k];
      const double d = x - mean;
      mean += d / static_cast<double>(n + 1);
      m2 += d * (x - mean);
    }
    EXPECT_NEAR(st.mean[k], mean, 1e-12);
    EXPECT_NEAR(st.std[k], std::sqrt(m2 / 200.0), 1e-12);
  }
}

TEST(Standardize, MeanProfileZeroAndGuard) {
  ProfileStats st;
  st.mean = {1.0, 2.0, 3.0};
  st.std = {0.5, 0.0, 2.0};
  for (double v : standardize(make_profile(st.mean), st).values) EXPECT_EQ(v, 0.0);
  const auto z = standardize(make_profile({1.5, 2.5, 1.0}), st);
  EXPECT_DOUBLE_EQ(z.values[0], 1.0);
  EXPECT_TRUE(std::isfinite(z.values[1]));
  EXPECT_DOUBLE_EQ(z.values[1], 0.5 / 1e-12);
  EXPECT_DOUBLE_EQ(z.values[2], -1.0);
  EXPECT_TRUE(z.standardized);
  EXPECT_THROW(standardize(make_profile({1.0}), st), ShapeError);
}

TEST(Standardize, ReferenceSetBecomesZeroMeanUnitStd) {
  const auto& t = trained_fixture();
  const auto raw = raw_profiles(t.model, t.data.splits.val, 2);
  const auto st = stats_from_profiles(raw, "val");
  std::vector<FilterSaliencyProfile> z;
  for (const auto& p : raw) z.push_back(standardize(p, st));
  const auto again = stats_from_profiles(z, "z");
  for (std::size_t k = 0; k < st.mean.size(); ++k) {
    if (st.std[k] <= st.eps) continue;
    EXPECT_NEAR(again.mean[k], 0.0, 1e-9);
    EXPECT_NEAR(again.std[k], 1.0, 1e-6);
  }
}

TEST(Saliency, WorkerCountDoesNotChangeResults) {
  const auto& t = trained_fixture();
  const auto a = raw_profiles(t.model, t.data.splits.val, 1);
  const auto b = raw_profiles(t.model, t.data.splits.val, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].values, b[i].values);
}

TEST(SmoothGrad, ZeroNoiseSeedAndSimilarity) {
  const auto& t = trained_fixture();
  const Sample& s = t.data.splits.val.samples[4];
  const auto plain = raw_profile(t.model, s);
  EXPECT_EQ(smoothgrad_param_saliency(t.model, s, 0.0, 3, 1).values, plain.values);
  EXPECT_EQ(smoothgrad_param_saliency(t.model, s, 0.05, 4, 9).values,
            smoothgrad_param_saliency(t.model, s, 0.05, 4, 9).values);
  EXPECT_GE(cosine(smoothgrad_param_saliency(t.model, s, 0.01, 25, 2).values, plain.values), 0.9);
  EXPECT_THROW(smoothgrad_param_saliency(t.model, s, 0.01, 0, 2), ConfigError);
}

TEST(AdversarialSaliency, OneStepIsCollinear) {
  const auto& t = trained_fixture();
  for (std::size_t i = 0; i < 3; ++i) {
    const Sample& s = t.data.splits.val.samples[i];
    const auto plain = raw_profile(t.model, s);
    const auto adv = adversarial_saliency(t.model, s, 1e-4, 1);
    EXPECT_NEAR(cosine(adv.values, plain.values), 1.0, 1e-9);
    // Collinear profiles give the same ranking; compare per-k top sets.
    const auto ra = argsort_desc(adv.values), rp = argsort_desc(plain.values);
    std::size_t mismatched_k = 0;
    for (std::size_t k = 1; k <= ra.size(); ++k) {
      std::set<std::size_t> a(ra.begin(), ra.begin() + static_cast<long>(k)), b(rp.begin(), rp.begin() + static_cast<long>(k));
      // Near-ties can swap order after the 1/||g|| rescale; only count gaps wider than roundoff.
      if (a != b && std::fabs(plain.values[rp[k - 1]] - plain.values[rp[std::min(k, rp.size() - 1)]]) >
                        1e-9 * plain.values[rp[0]]) {
        ++mismatched_k;
      }
    }
    EXPECT_EQ(mismatched_k, 0u);
  }
}

TEST(AdversarialSaliency, MultiStepAgreesWithGradientMagnitude) {
  const auto& t = trained_fixture();
  const std::size_t k = t.model.registry().filter_count() / 10;
  for (std::size_t i = 0; i < 3; ++i) {
    const Sample& s = t.data.splits.val.samples[i];
    const auto plain = raw_profile(t.model, s);
    const auto adv = adversarial_saliency(t.model, s, 1e-4, 10);
    EXPECT_GE(cosine(adv.values, plain.values), 0.9);
    const auto a = top_k(adv.values, k), b = top_k(plain.values, k);
    const std::set<std::size_t> sa(a.begin(), a.end());
    std::size_t overlap = 0;
    for (auto id : b) overlap += sa.count(id);
    EXPECT_GE(static_cast<double>(overlap), 0.85 * static_cast<double>(k));
  }
  EXPECT_THROW(adversarial_saliency(t.model, t.data.splits.val.samples[0], 0.0), ConfigError);
}

TEST(L1AdversarialSaliency, ScaledPlainProfile) {
  const auto& t = trained_fixture();
  const Sample& s = t.data.splits.val.samples[2];
  const auto plain = raw_profile(t.model, s);
  EXPECT_EQ(l1_adversarial_saliency(t.model, s, 0.0).values, plain.values);
  const auto scaled = l1_adversarial_saliency(t.model, s, 0.99);
  for (std::size_t k = 0; k < plain.values.size(); ++k) EXPECT_NEAR(scaled.values[k], 0.01 * plain.values[k], 1e-15);
  EXPECT_NEAR(cosine(scaled.values, plain.values), 1.0, 1e-12);
  EXPECT_EQ(argsort_desc(scaled.values), argsort_desc(plain.values));
  EXPECT_THROW(l1_adversarial_saliency(t.model, s, 1.0), ConfigError);
}

TEST(Ranking, PositiveScalingInvariance) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(40), b(40);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    const double c = 0.01 + 100 * u(rng);
    std::vector<double> ac(a), bc(b);
    for (auto& x : ac) x *= c;
    for (auto& x : bc) x *= c;
    EXPECT_EQ(argsort_desc(a), argsort_desc(ac));
    EXPECT_NEAR(cosine(a, b), cosine(ac, bc), 1e-12);
  }
}

TEST(GroupProfiles, SingleMemberAndSortedExport) {
  const auto& t = trained_fixture();
  ProfileStats st = compute_stats(t.model, t.data.splits.val, "val");
  const auto z = standardized_profile(t.model, t.data.splits.val.samples[0], st);
  const GroupProfile one = group_profile({z}, t.model.registry());
  EXPECT_EQ(one.mean, z.values);

  const GroupProfile g = average_group_profiles(t.model, t.data.splits.val, st, SampleGroup::kCorrect);
  ASSERT_EQ(g.layer_boundaries.size(), t.model.registry().layers().size());
  ASSERT_EQ(g.sorted.size(), t.model.registry().filter_count());
  for (std::size_t i = 1; i < g.sorted.size(); ++i) {
    if (g.sorted[i].layer_id == g.sorted[i - 1].layer_id) {
      EXPECT_GE(g.sorted[i - 1].value, g.sorted[i].value);
      EXPECT_EQ(g.sorted[i].rank_in_layer, g.sorted[i - 1].rank_in_layer + 1);
    } else {
      EXPECT_GT(g.sorted[i].layer_id, g.sorted[i - 1].layer_id);
      EXPECT_EQ(g.sorted[i].rank_in_layer, 0u);
    }
  }
  EXPECT_THROW(group_profile({}, t.model.registry()), ConfigError);
}

TEST(ProfilePersistence, RoundTrips) {
  const auto& t = trained_fixture();
  const auto dir = std::filesystem::temp_directory_path() / "psal_saliency_test";
  ProfileStats st = compute_stats(t.model, t.data.splits.val, "val");
  save_stats(st, dir / "stats.json");
  const ProfileStats back = load_stats(dir / "stats.json");
  EXPECT_EQ(back.mean, st.mean);
  EXPECT_EQ(back.std, st.std);
  EXPECT_EQ(back.model_fingerprint, t.model.fingerprint());

  const auto z = standardized_profile(t.model, t.data.splits.val.samples[1], st);
  save_profile(z, dir / "p.json");
  const auto loaded = load_profile(dir / "p.json");
  EXPECT_TRUE(loaded.standardized);
  EXPECT_EQ(loaded.sample_id, z.sample_id);
  ASSERT_EQ(loaded.values.size(), z.values.size());
  for (std::size_t k = 0; k < z.values.size(); ++k) EXPECT_EQ(loaded.values[k], static_cast<float>(z.values[k]));

  std::vector<FilterSaliencyProfile> batch = {z, raw_profile(t.model, t.data.splits.val.samples[2])};
  save_profile_batch(batch, dir / "batch.jsonl", dir / "batch.f32");
  const auto lb = load_profile_batch(dir / "batch.jsonl");
  ASSERT_EQ(lb.size(), 2u);
  EXPECT_FALSE(lb[1].standardized);
  EXPECT_EQ(lb[1].values[3], static_cast<float>(batch[1].values[3]));
  EXPECT_THROW(load_profile(dir / "missing.json"), MissingArtifactError);
}

}  // namespace
}  // namespace psal
