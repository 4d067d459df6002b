#include <gtest/gtest.h>

#include "owt/flops.hpp"

namespace owt {
namespace {

constexpr double kG = 1e9;

TEST(FlopsTest, SingleLinearLayer) {
  EXPECT_DOUBLE_EQ(linear_flops(10, 4, 8, FlopConvention{2.0}), 640.0);
  EXPECT_DOUBLE_EQ(linear_flops(10, 4, 8), 320.0);
}

TEST(FlopsTest, BlockIsTwelveTCSquared) {
  EXPECT_DOUBLE_EQ(block_flops(196, 768, 12, {}), 12.0 * 196 * 768 * 768);
  FlopConvention with_attn;
  with_attn.attention_products = true;
  const double dh = 64;
  EXPECT_DOUBLE_EQ(block_flops(196, 768, 12, with_attn), 12.0 * 196 * 768 * 768 + 12 * (2 * 196 * dh * dh + 2 * 196 * dh));
}

TEST(FlopsTest, TotalIsSumOfParts) {
  FlopsShape s;
  for (double f : {1.0, 2.0}) {
    FlopConvention cv{f, true, true};
    const auto b = count_flops(s, cv);
    EXPECT_EQ(b.total(), b.encoder + b.collector + b.group_encoder + b.restorer + b.decoder);
  }
}

TEST(FlopsTest, StageOracles) {
  const FlopsShape s;
  const auto b = count_flops(s);
  const double t = 196, c = 768;
  EXPECT_DOUBLE_EQ(b.encoder, 6 * 12 * t * c * c);
  EXPECT_DOUBLE_EQ(b.group_encoder, 6 * 12 * 100 * c * c);
  EXPECT_DOUBLE_EQ(b.decoder, 8 * 12 * t * c * c);
  EXPECT_DOUBLE_EQ(b.collector, t * c * 100 + t * c * c);
  EXPECT_DOUBLE_EQ(b.restorer, 100 * c * t + 100 * c * c);
}

TEST(FlopsTest, TableTwoStagesWithinTenPercent) {
  const FlopsShape s;
  const auto owt = count_flops(s);
  const auto mae = count_flops_holistic(s, 12);
  auto near = [](double got, double want) { return std::abs(got / kG - want) <= 0.1 * want; };
  EXPECT_TRUE(near(mae.encoder, 16.66)) << mae.encoder / kG;
  EXPECT_TRUE(near(mae.decoder, 11.11)) << mae.decoder / kG;
  EXPECT_TRUE(near(mae.total(), 27.77)) << mae.total() / kG;
  EXPECT_TRUE(near(owt.encoder, 8.33)) << owt.encoder / kG;
  EXPECT_TRUE(near(owt.group_encoder, 4.25)) << owt.group_encoder / kG;
  EXPECT_TRUE(near(owt.restorer, 0.074)) << owt.restorer / kG;
  EXPECT_TRUE(near(owt.decoder, 11.11)) << owt.decoder / kG;
  EXPECT_TRUE(near(owt.total(), 24.01)) << owt.total() / kG;
}

TEST(FlopsTest, CollectorOnlyMatchesUnderDoubledCount) {
  // The reported collector cost lines up with multiplies-plus-adds, unlike every other column.
  const FlopsShape s;
  EXPECT_NEAR(count_flops(s).collector / kG, 0.1306, 1e-3);
  EXPECT_NEAR(count_flops(s, FlopConvention{2.0}).collector / kG, 0.25, 0.025);
}

TEST(FlopsTest, FromModelConfig) {
  ModelConfig c;
  c.height = c.width = 32;
  c.patch = 4;
  c.dim = 64;
  c.heads = 4;
  c.enc_blocks = c.tge_blocks = c.dec_blocks = 2;
  c.groups = 3;
  c.tokens_per_group = 4;
  const auto s = FlopsShape::from_model(c, 8);
  EXPECT_EQ(s.tokens, 64u);
  EXPECT_EQ(s.group_tokens, 16u);
  EXPECT_EQ(s.patch_dim, 16u);
  const auto b = count_flops(s);
  EXPECT_DOUBLE_EQ(b.group_encoder, 2 * 12.0 * 8 * 64 * 64);
  EXPECT_LT(count_flops(FlopsShape::from_model(c, 4)).total(), b.total());
}

TEST(FlopsTest, InvalidShape) {
  FlopsShape s;
  s.retained_tokens = 0;
  EXPECT_THROW(count_flops(s), ConfigError);
  s = FlopsShape{};
  s.heads = 7;
  EXPECT_THROW(count_flops(s), ConfigError);
}

}  // namespace
}  // namespace owt
