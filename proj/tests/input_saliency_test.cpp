#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "psal/error.hpp"
#include "psal/input_saliency.hpp"
#include "psal/stats.hpp"
#include "test_util.hpp"

namespace psal {
namespace {

using testing::rel_err;
using testing::trained_fixture;

struct Prepared {
  ProfileStats stats;
  std::vector<double> target;
  BoostSpec spec;
};

Prepared prepare_target(const Model& model, const Sample& s, const Dataset& ref) {
  Prepared p;
  p.stats = compute_stats(model, ref, "val");
  p.spec = top_salient_boost(standardized_profile(model, s, p.stats));
  p.target = boost_profile(standardized_profile(model, s, p.stats).values, p.spec);
  return p;
}

TEST(BoostProfile, IdentityGlobalScaleAndSingleEntry) {
  const std::vector<double> z = {0.5, -1.0, 2.0, 0.0, 3.0};
  EXPECT_EQ(boost_profile(z, {{0, 2, 4}, 1.0}), z);
  const auto all = boost_profile(z, {{0, 1, 2, 3, 4}, 100.0});
  NoGradGuard ng;
  EXPECT_NEAR(cosine_distance(Tensor({5}, z), Tensor({5}, all)).item(), 0.0, 1e-12);
  const auto one = boost_profile(z, {{2}, 100.0});
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (i == 2) EXPECT_EQ(one[i], 200.0);
    else EXPECT_EQ(one[i], z[i]);
  }
  EXPECT_THROW(boost_profile(z, {{5}, 100.0}), ConfigError);
  EXPECT_THROW(boost_profile(z, {{}, 100.0}), ConfigError);
}

TEST(InputSaliency, DirectionalDerivativeMatchesFiniteDifference) {
  const auto& t = trained_fixture();
  std::mt19937_64 rng(21);
  std::size_t compared = 0, skipped = 0;
  for (std::size_t si = 0; si < 3; ++si) {
    const Sample& s = t.data.splits.val.samples[si];
    const Prepared p = prepare_target(t.model, s, t.data.splits.val);
    const Tensor g = boost_objective_gradient(t.model, s.image, s.label, p.stats, p.target);
    for (int d = 0; d < 20; ++d) {
      const Tensor u0 = testing::random_tensor(s.image.shape(), rng);
      double n = 0;
      for (double v : u0.data()) n += v * v;
      const Tensor u = scale(u0, 1.0 / std::sqrt(n));
      const double h = 1e-4;
      auto at = [&](double step, std::uint64_t* sig) {
        ActivationPatternProbe probe;
        const double v = boost_objective(t.model, add(s.image, scale(u, step)), s.label, p.stats, p.target);
        *sig = probe.signature();
        return v;
      };
      std::uint64_t a, b, c;
      const double fp = at(h, &a), fm = at(-h, &b);
      at(0.0, &c);
      if (a != c || b != c) {
        ++skipped;
        continue;
      }
      double analytic = 0.0;
      for (std::size_t i = 0; i < u.numel(); ++i) analytic += g.at(i) * u.at(i);
      EXPECT_LT(rel_err((fp - fm) / (2 * h), analytic), 1e-3) << "sample " << si << " dir " << d;
      ++compared;
    }
  }
  EXPECT_GE(compared, 40u) << skipped << " skipped";
}

TEST(InputSaliency, ZeroWeightsGiveZeroMap) {
  const auto& t = trained_fixture();
  Model zero(t.model);
  for (auto& w : zero.conv_weights()) {
    Tensor handle = w;
    for (auto& v : handle.mutable_data()) v = 0.0;
  }
  const Sample& s = t.data.splits.val.samples[0];
  // Statistics from the trained net keep ŝ away from the all-zero vector.
  const ProfileStats st = compute_stats(t.model, t.data.splits.val, "val");
  const auto map = input_saliency_map(zero, s, {{0, 1, 2}, 100.0}, st);
  for (double v : map.values) EXPECT_EQ(v, 0.0);
}

TEST(InputSaliency, DeterministicAndScaleInvariant) {
  const auto& t = trained_fixture();
  const Sample& s = t.data.splits.val.samples[5];
  const Prepared p = prepare_target(t.model, s, t.data.splits.val);
  const auto m1 = input_saliency_map(t.model, s, p.spec, p.stats);
  const auto m2 = input_saliency_map(t.model, s, p.spec, p.stats);
  EXPECT_EQ(m1.values, m2.values);
  for (double v : m1.values) EXPECT_GE(v, 0.0);
  const Tensor g = boost_objective_gradient(t.model, s.image, s.label, p.stats, p.target);
  for (double c : {2.0, 0.5, 8.0}) {
    std::vector<double> scaled = p.target;
    for (auto& v : scaled) v *= c;
    const Tensor gc = boost_objective_gradient(t.model, s.image, s.label, p.stats, scaled);
    EXPECT_TRUE(std::equal(g.data().begin(), g.data().end(), gc.data().begin())) << "c=" << c;
  }
  std::vector<double> scaled = p.target;
  for (auto& v : scaled) v *= 3.0;
  const Tensor g3 = boost_objective_gradient(t.model, s.image, s.label, p.stats, scaled);
  EXPECT_LT(testing::max_rel_err(g, g3, 1e-12), 1e-10);
}

TEST(InputSaliency, PixelsOutsideLiveReceptiveFieldsGetZero) {
  ModelSpec spec;
  spec.architecture = Architecture::kPlainCnn;
  spec.widths = {4};
  spec.blocks_per_stage = 1;
  spec.channels = 1;
  spec.height = 8;
  spec.width = 8;
  spec.num_classes = 3;
  Model model(spec, 4);
  for (auto& w : model.conv_weights()) {
    Tensor handle = w;
    for (auto& v : handle.mutable_data()) v = 0.1;
  }
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> bright(0.5, 1.0);
  auto image = [&](bool dark_quadrant) {
    std::vector<double> px(64);
    for (std::size_t i = 0; i < 64; ++i) {
      px[i] = (dark_quadrant && i / 8 >= 4 && i % 8 >= 4) ? -100.0 : bright(rng);
    }
    return Tensor({1, 8, 8}, px);
  };
  Dataset ref;
  ref.num_classes = 3;
  ref.image_shape = {1, 8, 8};
  for (std::size_t i = 0; i < 6; ++i) ref.samples.push_back({i, image(false), i % 3});
  const ProfileStats st = compute_stats(model, ref, "ref");
  const Sample s{99, image(true), 1};
  const auto map = input_saliency_map(model, s, {{1}, 100.0}, st);
  double outside = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    // Every 3x3 window touching the dark quadrant has a negative pre-activation.
    if (i / 8 >= 4 && i % 8 >= 4) EXPECT_EQ(map.values[i], 0.0) << "pixel " << i;
    else outside += map.values[i];
  }
  EXPECT_GT(outside, 0.0);
}

TEST(Postprocess, PercentileZeroNoBlurIsRescale) {
  PixelSaliencyMap m;
  m.height = 2;
  m.width = 3;
  m.values = {1.0, 3.0, 2.0, 5.0, 4.0, 1.0};
  const auto out = postprocess_map(m, 0.0, false);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.values[i], (m.values[i] - 1.0) / 4.0, 1e-15);
  EXPECT_FALSE(out.degenerate);
}

TEST(Postprocess, TopTenPercentSurviveWithTies) {
  PixelSaliencyMap m;
  m.height = 5;
  m.width = 10;
  for (int i = 0; i < 50; ++i) m.values.push_back(i);
  auto survivors = [](const PixelSaliencyMap& p) {
    std::size_t n = 0;
    for (double v : p.values) n += v > 0;
    return n;
  };
  // ceil(10% of 50) = 5 survivors; zeroed pixels set the rescale minimum.
  EXPECT_EQ(survivors(postprocess_map(m, 90.0, false)), 5u);
  PixelSaliencyMap shifted = m;
  for (auto& v : shifted.values) v += 100;
  const auto out = postprocess_map(shifted, 90.0, false);
  for (std::size_t i = 0; i < 45; ++i) EXPECT_EQ(out.values[i], 0.0);
  for (std::size_t i = 45; i < 50; ++i) EXPECT_GT(out.values[i], 0.0);
  // Ties at the cutoff survive together.
  PixelSaliencyMap tied = shifted;
  tied.values[44] = tied.values[45];
  const auto t2 = postprocess_map(tied, 90.0, false);
  EXPECT_GT(t2.values[44], 0.0);
}

TEST(Postprocess, BlurStencilAndDegenerate) {
  std::vector<double> hot(25, 0.0);
  hot[12] = 1.0;
  const auto b = gaussian_blur3x3(hot, 5, 5, 0.8);
  // exp(-d^2 / 1.28) weights normalized by their sum 3.669776...
  EXPECT_NEAR(b[12], 0.272496, 1e-6);
  EXPECT_NEAR(b[7], 0.124757, 1e-6);
  EXPECT_NEAR(b[11], 0.124757, 1e-6);
  EXPECT_NEAR(b[6], 0.057118, 1e-6);
  EXPECT_NEAR(b[18], 0.057118, 1e-6);
  EXPECT_EQ(b[0], 0.0);
  PixelSaliencyMap flat;
  flat.height = flat.width = 4;
  flat.values.assign(16, 0.3);
  const auto d = postprocess_map(flat);
  EXPECT_TRUE(d.degenerate);
  for (double v : d.values) EXPECT_EQ(v, 0.0);
}

Tensor ramp_image() {
  std::vector<double> px(2 * 4 * 5);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = 0.1 * static_cast<double>(i) + 1.0;
  return Tensor({2, 4, 5}, px);
}

TEST(Masking, ApplyMaskBasics) {
  const Tensor img = ramp_image();
  const Tensor same = apply_mask(img, {});
  EXPECT_TRUE(std::equal(img.data().begin(), img.data().end(), same.data().begin()));
  MaskSpec full;
  full.regions = {{0, 0, 4, 5}};
  const Tensor blank = apply_mask(img, full);
  for (double v : blank.data()) EXPECT_EQ(v, 0.0);
  MaskSpec part;
  part.regions = {{1, 1, 2, 2}};
  part.fill = FillMode::kConstant;
  part.constant = -7.0;
  part.protect = Rect{1, 1, 1, 1};
  const Tensor m = apply_mask(img, part);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 5; ++x) {
        const std::size_t i = (c * 4 + y) * 5 + x;
        const bool masked = y >= 1 && y < 3 && x >= 1 && x < 3 && !(y == 1 && x == 1);
        if (masked) EXPECT_EQ(m.at(i), -7.0);
        else EXPECT_EQ(m.at(i), img.at(i));
      }
    }
  }
  MaskSpec bad;
  bad.regions = {{3, 3, 2, 2}};
  EXPECT_THROW(apply_mask(img, bad), ConfigError);
  const MaskSpec back = mask_spec_from_json(mask_spec_to_json(part));
  EXPECT_EQ(resolve_mask(back, 4, 5), resolve_mask(part, 4, 5));
}

TEST(Masking, TopPercentAndRandomControl) {
  const Tensor img = ramp_image();
  PixelSaliencyMap map;
  map.height = 4;
  map.width = 5;
  map.values = {0, 9, 1, 8, 2, 7, 3, 6, 4, 5, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  const auto top = mask_top_percent(img, map, 25.0);  // ceil(0.25 * 20) = 5
  EXPECT_EQ(top.count, 5u);
  for (std::size_t i : {1, 3, 5, 7, 9}) EXPECT_TRUE(top.mask[i]) << i;
  std::size_t total = 0;
  for (bool b : top.mask) total += b;
  EXPECT_EQ(total, 5u);
  // Ties break toward the lowest index.
  const auto tie = mask_top_percent(img, map, 50.0);  // 10 pixels: 9 positive + index 0
  EXPECT_TRUE(tie.mask[0]);
  EXPECT_FALSE(tie.mask[10]);

  const Rect protect{0, 0, 2, 5};
  const auto guarded = mask_top_percent(img, map, 10.0, protect);  // 10 eligible -> 1 pixel
  EXPECT_EQ(guarded.count, 1u);
  EXPECT_TRUE(guarded.mask[10]);
  const auto none = mask_top_percent(img, map, 10.0, Rect{0, 0, 4, 5});
  EXPECT_TRUE(none.empty);
  EXPECT_EQ(none.count, 0u);

  const auto rnd = mask_random(img, guarded.count, protect, 3);
  std::size_t n = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    n += rnd.mask[i];
    if (i < 10) EXPECT_FALSE(rnd.mask[i]);
  }
  EXPECT_EQ(n, 1u);
}

TEST(FilterSaliencyDelta, OriginalZeroAndConstantImageFinite) {
  const auto& t = trained_fixture();
  const Sample& s = t.data.splits.val.samples[2];
  const ProfileStats st = compute_stats(t.model, t.data.splits.val, "val");
  const auto spec = top_salient_boost(standardized_profile(t.model, s, st));
  MaskSpec full;
  full.regions = {{0, 0, 16, 16}};
  const auto r = filter_saliency_delta(t.model, {s.image, s.image, apply_mask(s.image, full)}, s.label, spec.filters, st);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].delta, 0.0);
  EXPECT_EQ(r[1].delta, 0.0);
  EXPECT_TRUE(std::isfinite(r[2].mean));
  EXPECT_TRUE(std::isfinite(r[2].std));
}

TEST(Sanity, CascadeShapeAndIdentityRow) {
  const auto& t = trained_fixture();
  const auto sets = cascade_stage_sets(t.model);
  ASSERT_EQ(sets.size(), t.model.stage_count());
  EXPECT_EQ(sets.front(), std::vector<std::size_t>{t.model.stage_count() - 1});
  EXPECT_EQ(sets.back().size(), t.model.stage_count());
  Dataset ref = t.data.splits.val;
  ref.samples.resize(20);
  const auto rows = sanity_randomization(t.model, t.data.splits.val.samples[0], 10, 100.0, {sets.back()}, ref, 1);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[0].spearman, 1.0);
  EXPECT_LE(std::fabs(rows[1].spearman), 1.0);
}

TEST(MapPersistence, RoundTrip) {
  PixelSaliencyMap m;
  m.height = 2;
  m.width = 2;
  m.values = {0.5, 0.25, 0.0, 1.0};
  m.filters = {3, 4};
  m.factor = 100.0;
  const auto path = std::filesystem::temp_directory_path() / "psal_map_test" / "m.json";
  save_map(m, path);
  const auto back = load_map(path);
  EXPECT_EQ(back.values, m.values);
  EXPECT_EQ(back.filters, m.filters);
}

TEST(Statistics, SpearmanSignTestBootstrap) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_EQ(average_ranks({5, 1, 5, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
  // Pearson on ranks {1,2,3.5,3.5} vs {1,2,3,4}.
  EXPECT_NEAR(spearman({1, 2, 3, 3}, {1, 2, 3, 4}), 0.9486832980505138, 1e-12);
  EXPECT_EQ(spearman({1, 1, 1}, {1, 2, 3}), 0.0);

  const auto t = sign_test({1, 1, 1, 1, 1, 1, 1, 1, 1, -1, 0});
  EXPECT_EQ(t.positive, 9u);
  EXPECT_EQ(t.ties, 1u);
  EXPECT_NEAR(t.p_value, 22.0 / 1024.0, 1e-12);  // 2 * (C(10,9) + C(10,10)) / 2^10
  EXPECT_NEAR(t.p_greater, 11.0 / 1024.0, 1e-12);
  EXPECT_DOUBLE_EQ(sign_test({1, -1}).p_value, 1.0);

  std::vector<double> v;
  for (int i = 0; i < 200; ++i) v.push_back(i % 7);
  const auto ci = bootstrap_mean_ci(v, 1000, 0.95, 4);
  EXPECT_LT(ci.lower, ci.estimate);
  EXPECT_GT(ci.upper, ci.estimate);
  const auto ci2 = bootstrap_mean_ci(v, 1000, 0.95, 4);
  EXPECT_EQ(ci.lower, ci2.lower);
  EXPECT_THROW(bootstrap_mean_ci({}, 10), ConfigError);
}

}  // namespace
}  // namespace psal
