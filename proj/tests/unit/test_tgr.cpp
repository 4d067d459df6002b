#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "gradcheck.hpp"
#include "owt/phantom.hpp"
#include "owt/tgr.hpp"

namespace owt {
namespace {

using testing::gradcheck;
using testing::random_tensor;

double chi_square_p(const std::vector<double>& observed, const std::vector<double>& expected) {
  double stat = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) stat += std::pow(observed[i] - expected[i], 2) / expected[i];
  boost::math::chi_squared dist(static_cast<double>(observed.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

PhantomSpec small_spec(std::size_t count, std::uint64_t seed) {
  PhantomSpec s;
  s.height = s.width = 16;
  s.groups = 2;
  s.min_area = 20;
  s.max_area = 60;
  s.count = count;
  s.seed = seed;
  return s;
}

ModelConfig small_model() {
  ModelConfig c;
  c.height = c.width = 16;
  c.patch = 4;
  c.dim = 16;
  c.heads = 2;
  c.enc_blocks = c.tge_blocks = c.dec_blocks = 1;
  c.groups = 2;
  c.tokens_per_group = 2;
  c.seed = 5;
  return c;
}

TEST(SelectionTest, FloorArithmetic) {
  EXPECT_EQ(selection_size(4, 0.999), 4u);
  EXPECT_EQ(selection_size(4, 0.0), 0u);
  EXPECT_EQ(selection_size(4, 0.2), 1u);
  EXPECT_EQ(selection_size(4, 0.1999), 0u);
}

TEST(SelectionTest, NeverEmptyNeverAllDistinctInRange) {
  Rng rng(1);
  for (int i = 0; i < 20000; ++i) {
    const auto s = draw_selection(4, rng);
    ASSERT_GE(s.groups.size(), 1u);
    ASSERT_LE(s.groups.size(), 4u);
    std::vector<bool> seen(5, false);
    for (auto k : s.groups) {
      ASSERT_LE(k, 4u);
      ASSERT_FALSE(seen[k]);
      seen[k] = true;
    }
  }
  EXPECT_THROW(draw_selection(0, rng), ConfigError);
}

TEST(SelectionTest, SizeLawMatchesConditionalDistribution) {
  Rng rng(2);
  const std::size_t n = 100000;
  std::vector<double> counts(4, 0.0);
  for (std::size_t i = 0; i < n; ++i) counts[draw_selection(4, rng).groups.size() - 1] += 1;
  // P(size = k | size >= 1) = (1/5) / (4/5)
  const std::vector<double> expected(4, n * 0.25);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(counts[k] / n, 0.25, 0.01);
  EXPECT_GT(chi_square_p(counts, expected), 0.01);
}

TEST(SelectionTest, PairsAreUniformGivenSizeTwo) {
  Rng rng(3);
  std::map<std::pair<std::size_t, std::size_t>, double> freq;
  double total = 0;
  for (int i = 0; i < 100000; ++i) {
    const auto s = draw_selection(4, rng);
    if (s.groups.size() != 2) continue;
    freq[{std::min(s.groups[0], s.groups[1]), std::max(s.groups[0], s.groups[1])}] += 1;
    total += 1;
  }
  ASSERT_EQ(freq.size(), 10u);
  std::vector<double> obs, exp;
  for (const auto& [_, c] : freq) {
    EXPECT_NEAR(c / total, 0.1, 0.01);
    obs.push_back(c);
    exp.push_back(total / 10);
  }
  EXPECT_GT(chi_square_p(obs, exp), 0.01);
}

TEST(SelectionTest, OrderIsUniform) {
  Rng rng(4);
  double first_smaller = 0, pairs = 0;
  for (int i = 0; i < 40000; ++i) {
    const auto s = draw_selection(2, rng);
    if (s.groups.size() != 2) continue;
    first_smaller += s.groups[0] < s.groups[1];
    pairs += 1;
  }
  EXPECT_NEAR(first_smaller / pairs, 0.5, 0.02);
}

TEST(MaskTest, AllGroupsKeepsImage) {
  const auto s = generate_one(small_spec(1, 7), 0);
  const auto m = mask_target(s.image, s.labels, RetainedSelection::all(3), 2);
  EXPECT_EQ(m.target, s.image);
}

TEST(MaskTest, BackgroundOnly) {
  const auto s = generate_one(small_spec(1, 7), 0);
  const auto m = mask_target(s.image, s.labels, RetainedSelection::only(0), 2);
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    EXPECT_EQ(m.target.pixels[i], s.labels[i] == 0 ? s.image.pixels[i] : 0.0f);
  }
}

TEST(MaskTest, RandomSelectionPixelAudit) {
  Rng rng(8);
  const auto data = generate(small_spec(20, 9));
  for (const auto& s : data) {
    const auto sel = draw_selection(2, rng);
    const auto m = mask_target(s.image, s.labels, sel, 2);
    double zeroed = 0;
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      const bool kept = std::find(sel.groups.begin(), sel.groups.end(), s.labels[i]) != sel.groups.end();
      if (kept) {
        EXPECT_EQ(std::memcmp(&m.target.pixels[i], &s.image.pixels[i], sizeof(float)), 0);
      } else {
        zeroed += std::abs(m.target.pixels[i]);
      }
    }
    EXPECT_EQ(zeroed, 0.0);
    EXPECT_EQ(mask_target(m.target, s.labels, sel, 2).target, m.target);
  }
}

TEST(MaskTest, LabelOutOfRangeRejected) {
  auto s = generate_one(small_spec(1, 7), 0);
  s.labels[5] = 3;
  EXPECT_THROW(mask_target(s.image, s.labels, RetainedSelection::all(3), 2), DataError);
  EXPECT_THROW(mask_target(s.image, LabelMap(4, 0), RetainedSelection::all(3), 2), DimensionError);
}

TEST(LossTest, ZeroAtEquality) {
  const auto a = random_tensor<double>({8, 8, 1}, 1, 1.0, false);
  EXPECT_EQ(reconstruction_loss(a, a, 0.0).item(), 0.0);
  EXPECT_EQ(reconstruction_loss(a, a, 2.5).item(), 0.0);
}

TEST(LossTest, ConstantOffset) {
  const auto a = random_tensor<double>({8, 8, 1}, 2, 1.0, false);
  const auto b = add(a, Tensor64::full({8, 8, 1}, 0.3));
  EXPECT_NEAR(reconstruction_loss(b, a, 0.0).item(), 0.09, 1e-12);
  // A constant shift leaves the difference channels untouched and moves each pooled level by 0.3.
  EXPECT_GE(reconstruction_loss(b, a, 1.0).item(), 0.09);
}

TEST(LossTest, NonNegativeAndPositiveWhenDifferent) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_tensor<double>({8, 8, 1}, seed, 1.0, false);
    const auto b = random_tensor<double>({8, 8, 1}, seed + 100, 1.0, false);
    EXPECT_GT(reconstruction_loss(a, b, 0.0).item(), 0.0);
    EXPECT_GT(reconstruction_loss(a, b, 0.7).item(), reconstruction_loss(a, b, 0.0).item());
  }
}

TEST(LossTest, GradientMatchesFiniteDifferences) {
  auto pred = random_tensor<double>({8, 8, 1}, 3);
  const auto target = random_tensor<double>({8, 8, 1}, 4, 1.0, false);
  const auto r = gradcheck<double>({pred}, [&] { return reconstruction_loss(pred, target, 0.5); }, 1e-6);
  EXPECT_LT(r.relative_error, 1e-6);
}

TEST(LossTest, ShapeMismatch) {
  EXPECT_THROW(reconstruction_loss(Tensor::zeros({4, 4, 1}), Tensor::zeros({4, 8, 1}), 0.0), DimensionError);
}

TEST(ScheduleTest, PeakScalesWithBatch) {
  TgrConfig c;
  c.base_lr = 1e-4;
  c.effective_batch = 256;
  EXPECT_DOUBLE_EQ(c.peak_lr(), 1e-4);
  c.effective_batch = 64;
  EXPECT_DOUBLE_EQ(c.peak_lr(), 2.5e-5);
}

TEST(ScheduleTest, EndpointsAndMidpoint) {
  TgrConfig c;
  c.base_lr = 1e-3;
  c.effective_batch = 256;
  c.epochs = 10;
  c.warmup_epochs = 2;
  const std::size_t spe = 5;
  EXPECT_EQ(lr_at(0, c, spe), 0.0);
  EXPECT_NEAR(lr_at(5, c, spe), 0.5e-3, 1e-15);
  EXPECT_NEAR(lr_at(10, c, spe), 1e-3, 1e-15);
  EXPECT_NEAR(lr_at(30, c, spe), 0.5e-3, 1e-15);
  EXPECT_NEAR(lr_at(50, c, spe), 0.0, 1e-15);
  EXPECT_THROW(lr_at(1, c, 0), ConfigError);
}

TEST(ScheduleTest, ContinuousAtWarmupJunction) {
  TgrConfig c;
  c.base_lr = 1e-3;
  c.epochs = 100;
  c.warmup_epochs = 7;
  const std::size_t spe = 1000;
  const double before = lr_at(6999, c, spe), at = lr_at(7000, c, spe), after = lr_at(7001, c, spe);
  EXPECT_NEAR(before, at, 1e-3 * 2e-4);
  EXPECT_NEAR(after, at, 1e-3 * 2e-4);
}

TEST(ScheduleTest, NoWarmup) {
  TgrConfig c;
  c.base_lr = 1e-3;
  c.epochs = 4;
  c.warmup_epochs = 0;
  EXPECT_DOUBLE_EQ(lr_at(0, c, 3), 1e-3);
}

TEST(ConfigTest, Validation) {
  TgrConfig c;
  c.epochs = 10;
  c.warmup_epochs = 10;
  EXPECT_THROW(c.validate(), ConfigError);
  c.warmup_epochs = 1;
  c.labeled_fraction = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.labeled_fraction = 1;
  c.effective_batch = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_mode("semi"), TrainMode::kSemi);
  EXPECT_THROW(parse_mode("owt"), ConfigError);
}

TgrConfig smoke_config(std::size_t epochs) {
  TgrConfig c;
  c.base_lr = 2e-3;
  c.effective_batch = 8;
  c.epochs = epochs;
  c.warmup_epochs = 0.5;
  c.seed = 11;
  return c;
}

TEST(TrainTest, IdenticalSeedsGiveIdenticalTrajectories) {
  const auto data = generate(small_spec(16, 12));
  auto run = [&] {
    auto m = OwtModel::init(small_model());
    AdamW opt(m.parameters());
    return train(m, opt, data, smoke_config(2), TrainMode::kTgr);
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.rows.size(), 4u);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].loss, b.rows[i].loss);
    EXPECT_EQ(a.rows[i].lr, b.rows[i].lr);
    EXPECT_EQ(a.rows[i].step, i);
  }
}

TEST(TrainTest, ForcedAllGroupsTargetsWholeImage) {
  const auto data = generate(small_spec(2, 13));
  const auto m = OwtModel::init(small_model());
  const auto all = RetainedSelection::all(3);
  Rng rng(0);
  for (const auto& s : data) {
    const auto owt_loss = sample_loss(m, s, TrainMode::kTgr, 0.0, rng, &all).item();
    const auto img = to_tensor(s.image);
    const auto direct = mse_loss(forward_owt(img, all, m).image, img).item();
    EXPECT_EQ(owt_loss, direct);
  }
}

TEST(TrainTest, LossFallsOnPhantoms) {
  const auto data = generate(small_spec(64, 14));
  auto m = OwtModel::init(small_model());
  AdamW opt(m.parameters());
  const auto log = train(m, opt, data, smoke_config(25), TrainMode::kTgr);
  ASSERT_EQ(log.rows.size(), 200u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 8; ++i) first += log.rows[i].loss;
  for (std::size_t i = 192; i < 200; ++i) last += log.rows[i].loss;
  EXPECT_LT(last, first);
}

TEST(TrainTest, CsvLogFormat) {
  TrainLog log;
  log.rows.push_back({0, 0.0, 0.0, 0.5, 1.0});
  log.rows.push_back({1, 0.5, 1e-4, 0.25, 2.0});
  const auto path = std::filesystem::temp_directory_path() / "owt_test_log.csv";
  log.write_csv(path.string());
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "step,epoch,lr,loss,wall_ms");
  EXPECT_EQ(row, "0,0,0,0.5,1");
  std::filesystem::remove(path);
}

TEST(TrainTest, DivergenceRaises) {
  const auto data = generate(small_spec(2, 15));
  auto m = OwtModel::init(small_model());
  m.out_proj.weight.mutable_data()[0] = std::numeric_limits<float>::infinity();
  AdamW opt(m.parameters());
  EXPECT_THROW(train(m, opt, data, smoke_config(1), TrainMode::kTgr), NumericError);
}

TEST(SemiTest, LabeledSubset) {
  const auto a = labeled_subset(100, 0.2, 3);
  EXPECT_EQ(a.size(), 20u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(a, labeled_subset(100, 0.2, 3));
  EXPECT_NE(a, labeled_subset(100, 0.2, 4));
  EXPECT_EQ(labeled_subset(10, 1.0, 3).size(), 10u);
  EXPECT_THROW(labeled_subset(2, 0.1, 3), DataError);
  EXPECT_THROW(labeled_subset(2, 0.0, 3), ConfigError);
}

TEST(SemiTest, StageOneTouchesOnlyHolisticParameters) {
  const auto data = generate(small_spec(8, 16));
  auto m = OwtModel::init(small_model());
  const auto before = OwtModel::init(small_model());
  TgrConfig c = smoke_config(1);
  c.effective_batch = 2;
  c.semi_stage1_epochs = 1;
  TrainHooks stop;
  // Compare parameters right after stage 1 by snapshotting inside the first stage-2 step.
  std::vector<std::vector<float>> snapshot;
  bool taken = false;
  stop.on_step = [&](const StepRecord&) {};
  TrainHooks s1;
  s1.on_epoch = [&](std::size_t) {
    auto p = m.parameters();
    for (const auto& e : p.entries()) snapshot.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    taken = true;
  };
  const auto r = train_semi(m, data, 0.5, c, s1, stop);
  ASSERT_TRUE(taken);
  EXPECT_EQ(r.labeled.size(), 4u);
  EXPECT_EQ(r.stage1.rows.size(), 4u);
  EXPECT_EQ(r.stage2.rows.size(), 2u);
  const auto holistic = m.holistic_parameters();
  auto ref = before.parameters();
  std::size_t i = 0, changed_holistic = 0, changed_routing = 0;
  for (const auto& e : ref.entries()) {
    const bool moved = !std::equal(snapshot[i].begin(), snapshot[i].end(), e.tensor.data().begin());
    (holistic.find(e.name) ? changed_holistic : changed_routing) += moved;
    ++i;
  }
  EXPECT_GT(changed_holistic, 0u);
  EXPECT_EQ(changed_routing, 0u);
}

TEST(SemiTest, WarmupFractionKeptPerStage) {
  const auto data = generate(small_spec(8, 17));
  auto m = OwtModel::init(small_model());
  TgrConfig c = smoke_config(4);
  c.warmup_epochs = 2;  // half the run
  c.semi_stage1_epochs = 2;
  const auto r = train_semi(m, data, 1.0, c);
  // Stage 1: 2 epochs x 1 step, warmup one epoch, so step 1 sits at the peak.
  EXPECT_EQ(r.stage1.rows[0].lr, 0.0);
  EXPECT_NEAR(r.stage1.rows[1].lr, c.peak_lr(), 1e-15);
  EXPECT_NEAR(r.stage2.rows[2].lr, c.peak_lr(), 1e-15);
}

TEST(AllocationTest, HandComputedCase) {
  const std::vector<double> v{16, 1};
  EXPECT_EQ(allocate_tokens(v, 6), (std::vector<std::size_t>{4, 2}));
}

TEST(AllocationTest, EqualVolumes) {
  const std::vector<double> v(5, 1234.0);
  EXPECT_EQ(allocate_tokens(v, 100), std::vector<std::size_t>(5, 20));
}

TEST(AllocationTest, FourthPowerVolumesReproduceCounts) {
  std::vector<double> v;
  for (double c : {45.0, 20.0, 13.0, 13.0, 9.0}) v.push_back(std::pow(c, 4));
  EXPECT_EQ(allocate_tokens(v, 100), (std::vector<std::size_t>{45, 20, 13, 13, 9}));
}

TEST(AllocationTest, MinimumOnePerGroupAndExactSum) {
  const std::vector<double> v{1e8, 1e-8, 1e-8, 5};
  const auto c = allocate_tokens(v, 6);
  EXPECT_EQ(std::accumulate(c.begin(), c.end(), std::size_t{0}), 6u);
  for (auto x : c) EXPECT_GE(x, 1u);
  EXPECT_THROW(allocate_tokens(v, 3), ConfigError);
  EXPECT_THROW(allocate_tokens(std::vector<double>{1, 0}, 4), ConfigError);
}

TEST(AllocationTest, SumsExactlyOverRandomInputs) {
  Rng rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 7;
    std::vector<double> v(n);
    for (auto& x : v) x = 1 + 5000 * uniform01(rng);
    const std::size_t budget = n + trial;
    const auto c = allocate_tokens(v, budget);
    EXPECT_EQ(std::accumulate(c.begin(), c.end(), std::size_t{0}), budget);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (v[i] > v[j]) EXPECT_GE(c[i] + 1, c[j]);
  }
}

TEST(AllocationTest, GroupVolumesCountPixels) {
  const auto data = generate(small_spec(3, 19));
  const auto v = group_volumes(data, 2);
  EXPECT_NEAR(std::accumulate(v.begin(), v.end(), 0.0), 256.0, 1e-9);
}

}  // namespace
}  // namespace owt
