#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "gradcheck.hpp"
#include "owt/model.hpp"

namespace owt {
namespace {

using testing::gradcheck;
using testing::random_tensor;
using testing::weighted_sum;

ModelConfig tiny_config() {
  ModelConfig c;
  c.height = 8;
  c.width = 8;
  c.patch = 4;
  c.dim = 8;
  c.heads = 2;
  c.enc_blocks = c.tge_blocks = c.dec_blocks = 1;
  c.groups = 2;
  c.tokens_per_group = 2;
  c.seed = 3;
  return c;
}

// Raises the init scale so every path carries a gradient well above rounding.
template <typename T>
void scale_parameters(BasicOwtModel<T>& m, double factor) {
  auto params = m.parameters();
  for (auto& p : params.entries()) {
    if (!p.decay) continue;
    for (auto& v : p.tensor.mutable_data()) v = static_cast<T>(v * factor);
  }
}

template <typename T>
std::vector<BasicTensor<T>> leaves_of(const BasicOwtModel<T>& m) {
  std::vector<BasicTensor<T>> out;
  const auto params = m.parameters();
  for (const auto& p : params.entries()) out.push_back(p.tensor);
  return out;
}

TEST(ModelTest, DeskShapes) {
  ModelConfig c;
  const auto m = OwtModel::init(c);
  const auto img = random_tensor<float>({32, 32, 1}, 1, 0.5, false);
  const auto xh = encode(img, m);
  EXPECT_EQ(xh.tokens.shape(), (Shape{64, 64}));
  const auto out = forward_owt(img, RetainedSelection::all(4), m);
  EXPECT_EQ(out.image.shape(), (Shape{32, 32, 1}));
  EXPECT_EQ(out.groups.tokens.shape(), (Shape{16, 64}));
  EXPECT_EQ(out.attention.shape(), (Shape{16, 64}));
  EXPECT_EQ(forward_holistic(img, m).shape(), (Shape{32, 32, 1}));
}

TEST(ModelTest, CollectorOutputWidthFollowsGroupTokenCount) {
  for (std::size_t ng : {6u, 100u}) {
    ModelConfig c = tiny_config();
    c.groups = 1;
    c.tokens_per_group = ng / 2;
    const auto m = OwtModel::init(c);
    const auto xh = encode(random_tensor<float>({8, 8, 1}, 2, 1.0, false), m);
    const auto col = organ_collect(xh, m);
    EXPECT_EQ(col.groups.tokens.shape(), (Shape{ng, 8}));
    EXPECT_EQ(col.attention.shape(), (Shape{ng, 4}));
  }
}

TEST(ModelTest, EncodeRejectsGridMismatch) {
  const auto m = OwtModel::init(tiny_config());
  EXPECT_THROW(encode(Tensor::zeros({8, 12, 1}), m), DimensionError);
}

TEST(ModelTest, EncodeIsSensitiveToEveryPatch) {
  const auto m = OwtModel::init(tiny_config());
  auto a = random_tensor<float>({8, 8, 1}, 4, 1.0, false);
  auto b = Tensor::from_data(a.shape(), std::vector<float>(a.data().begin(), a.data().end()));
  b.mutable_data()[7 * 8 + 7] += 0.5f;  // bottom-right patch only
  const auto ea = encode(a, m).tokens, eb = encode(b, m).tokens;
  EXPECT_NE(std::vector<float>(ea.data().begin(), ea.data().end()),
            std::vector<float>(eb.data().begin(), eb.data().end()));
}

TEST(ModelTest, CollectorUniformWhenTokensEqual) {
  const auto m = OwtModel::init(tiny_config());
  std::vector<float> v(4 * 8);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 8; ++j) v[r * 8 + j] = 0.1f * static_cast<float>(j) - 0.3f;
  const HolisticEmbedding xh{Tensor::from_data({4, 8}, v), m.grid};
  const auto col = organ_collect(xh, m);
  for (float a : col.attention.data()) EXPECT_NEAR(a, 0.25f, 1e-7);
  const auto gv = m.collector_gamma(Tensor::from_data({1, 8}, std::vector<float>(v.begin(), v.begin() + 8)));
  for (std::size_t r = 0; r < col.groups.tokens.rows(); ++r)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(col.groups.tokens.at(r, j), gv.at(0, j), 1e-6);
}

TEST(ModelTest, CollectorMatchesMatrixOracle) {
  ModelConfig c = tiny_config();
  c.dim = 2;
  c.heads = 1;
  c.groups = 1;
  c.tokens_per_group = 1;
  auto m = BasicOwtModel<double>::init(c);
  // alpha: 2 -> 2, gamma: 2 -> 2, hand-set
  const std::vector<double> wa{1, -1, 0.5, 2}, ba{0.1, -0.2}, wg{2, 0, -1, 1}, bg{0, 0.5};
  std::copy(wa.begin(), wa.end(), m.collector_alpha.weight.mutable_data().begin());
  std::copy(ba.begin(), ba.end(), m.collector_alpha.bias.mutable_data().begin());
  std::copy(wg.begin(), wg.end(), m.collector_gamma.weight.mutable_data().begin());
  std::copy(bg.begin(), bg.end(), m.collector_gamma.bias.mutable_data().begin());
  const std::vector<double> x{0.3, -0.7, 1.2, 0.4, -0.5, 0.9, 0.0, 0.2};  // 4 tokens x 2
  const auto col = organ_collect(BasicHolisticEmbedding<double>{Tensor64::from_data({4, 2}, x), m.grid}, m);

  // A = softmax over tokens of (x wa + ba)^T; X_G = A (x wg + bg)
  double logits[2][4], gam[4][2];
  for (int t = 0; t < 4; ++t) {
    for (int o = 0; o < 2; ++o) {
      logits[o][t] = x[t * 2] * wa[o] + x[t * 2 + 1] * wa[2 + o] + ba[o];
      gam[t][o] = x[t * 2] * wg[o] + x[t * 2 + 1] * wg[2 + o] + bg[o];
    }
  }
  for (int o = 0; o < 2; ++o) {
    double z = 0, e[4];
    for (int t = 0; t < 4; ++t) z += e[t] = std::exp(logits[o][t]);
    for (int j = 0; j < 2; ++j) {
      double s = 0;
      for (int t = 0; t < 4; ++t) s += e[t] / z * gam[t][j];
      EXPECT_NEAR(col.groups.tokens.at(o, j), s, 1e-12);
    }
  }
}

TEST(ModelTest, GatherRetainedSlicesGroupSpans) {
  ModelConfig c = tiny_config();
  const auto m = OwtModel::init(c);
  const auto xg = organ_collect(encode(random_tensor<float>({8, 8, 1}, 5, 1.0, false), m), m).groups;
  const auto all = gather_retained(xg, RetainedSelection::all(3));
  EXPECT_EQ(std::vector<float>(all.data().begin(), all.data().end()),
            std::vector<float>(xg.tokens.data().begin(), xg.tokens.data().end()));
  const auto one = gather_retained(xg, RetainedSelection::only(1));
  ASSERT_EQ(one.shape(), (Shape{2, 8}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(one.at(r, j), xg.tokens.at(2 + r, j));
  EXPECT_THROW(gather_retained(xg, RetainedSelection{}), ContractError);
  EXPECT_THROW(gather_retained(xg, RetainedSelection{{0, 0}}), ContractError);
  EXPECT_THROW(gather_retained(xg, RetainedSelection{{3}}), ContractError);
}

TEST(ModelTest, AdaptiveGroupSpansAreContiguous) {
  ModelConfig c = tiny_config();
  c.group_token_counts = {3, 1, 2};
  const auto m = OwtModel::init(c);
  EXPECT_EQ(m.layout.total(), 6u);
  EXPECT_EQ(m.layout.offsets, (std::vector<std::size_t>{0, 3, 4}));
  EXPECT_EQ(m.layout.group_of(3), 1u);
  EXPECT_EQ(m.layout.group_of(5), 2u);
  const auto xg = organ_collect(encode(random_tensor<float>({8, 8, 1}, 6, 1.0, false), m), m).groups;
  EXPECT_EQ(gather_retained(xg, RetainedSelection{{2, 0}}).rows(), 5u);
}

TEST(AherTest, SingleTokenCopiesPsi) {
  const auto m = OwtModel::init(tiny_config());
  const auto tok = random_tensor<float>({1, 8}, 7, 1.0, false);
  const auto r = aher_restore(tok, m);
  EXPECT_EQ(r.embedding.tokens.shape(), (Shape{4, 8}));
  for (float a : r.attention.data()) EXPECT_EQ(a, 1.0f);
  const auto psi = m.restorer_psi(tok);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_FLOAT_EQ(r.embedding.tokens.at(t, j), psi.at(0, j));
}

TEST(AherTest, ShapeIndependentOfRetainedCount) {
  const auto m = OwtModel::init(tiny_config());
  for (std::size_t n : {1u, 40u, 100u}) {
    const auto r = aher_restore(random_tensor<float>({n, 8}, n, 1.0, false), m);
    EXPECT_EQ(r.embedding.tokens.shape(), (Shape{4, 8}));
    EXPECT_EQ(r.attention.shape(), (Shape{4, n}));
  }
  EXPECT_THROW(aher_restore(Tensor{}, m), ContractError);
}

TEST(AherTest, InvariantToRowPermutationAndInsideEnvelope) {
  const auto m = OwtModel::init(tiny_config());
  const auto x = random_tensor<float>({5, 8}, 11, 2.0, false);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const auto a = aher_restore(x, m).embedding.tokens;
  const auto b = aher_restore(gather_rows(x, perm), m).embedding.tokens;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-5);
  const auto psi = m.restorer_psi(x);
  for (std::size_t j = 0; j < 8; ++j) {
    float lo = psi.at(0, j), hi = lo;
    for (std::size_t r = 1; r < 5; ++r) lo = std::min(lo, psi.at(r, j)), hi = std::max(hi, psi.at(r, j));
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_GE(a.at(t, j), lo - 1e-6f);
      EXPECT_LE(a.at(t, j), hi + 1e-6f);
    }
  }
}

TEST(ModelTest, AttentionRowsAreDistributions) {
  const auto m = OwtModel::init(tiny_config());
  const auto out = forward_owt(random_tensor<float>({8, 8, 1}, 12, 1.0, false), RetainedSelection{{2, 1}}, m);
  const auto check = [](const Tensor& a) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        EXPECT_GE(a.at(r, c), 0.0f);
        s += a.at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  };
  check(out.attention);
  const auto xg = out.groups;
  check(aher_restore(token_group_encode(gather_retained(xg, RetainedSelection{{2, 1}}), m), m).attention);
}

TEST(ModelTest, SelectionOrderDoesNotChangeReconstruction) {
  auto m = OwtModel::init(tiny_config());
  scale_parameters(m, 10.0);
  const auto img = random_tensor<float>({8, 8, 1}, 13, 1.0, false);
  const auto a = forward_owt(img, RetainedSelection{{2, 0}}, m).image;
  const auto b = forward_owt(img, RetainedSelection{{0, 2}}, m).image;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-4);
}

TEST(ModelTest, ZeroEmbeddingDecodesToZeroWithZeroBiases) {
  auto m = OwtModel::init(tiny_config());
  auto params = m.parameters();
  for (auto& p : params.entries())
    if (p.name == "pos_embed" || p.name.ends_with(".bias"))
      for (auto& v : p.tensor.mutable_data()) v = 0.0f;
  const auto img = decode(HolisticEmbedding{Tensor::zeros({4, 8}), m.grid}, m);
  for (float v : img.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(decode(HolisticEmbedding{Tensor::zeros({5, 8}), m.grid}, m), DimensionError);
}

TEST(ModelTest, HolisticPathSharesCheckpointNames) {
  const auto m = OwtModel::init(tiny_config());
  const auto all = m.parameters();
  const auto holistic = m.holistic_parameters();
  for (const auto& p : holistic.entries()) EXPECT_NE(all.find(p.name), nullptr) << p.name;
  EXPECT_EQ(all.find("collector.alpha.weight")->shape(), (Shape{8, 6}));
  EXPECT_EQ(all.find("restorer.phi.weight")->shape(), (Shape{8, 4}));
}

TEST(ModelTest, ConfigValidation) {
  ModelConfig c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.tge_blocks = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.group_token_counts = {1, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.patch = 3;
  EXPECT_THROW(c.validate(), DimensionError);
}

TEST(ModelGradTest, EncodeInputGradient64) {
  auto m = BasicOwtModel<double>::init(tiny_config());
  scale_parameters(m, 10.0);
  auto img = random_tensor<double>({8, 8, 1}, 14);
  const auto r = gradcheck<double>({img}, [&] { return weighted_sum(encode(img, m).tokens, 24); }, 1e-5);
  EXPECT_LT(r.relative_error, 1e-4);
  EXPECT_GT(r.analytic_norm, 1e-6);
}

TEST(ModelGradTest, DecodeGradient64) {
  auto m = BasicOwtModel<double>::init(tiny_config());
  scale_parameters(m, 10.0);
  auto xh = random_tensor<double>({4, 8}, 15);
  const auto r = gradcheck<double>(
      {xh}, [&] { return weighted_sum(decode(BasicHolisticEmbedding<double>{xh, m.grid}, m), 16); }, 1e-5);
  EXPECT_LT(r.relative_error, 1e-4);
}

TEST(ModelGradTest, TokenGroupEncoderGradient64) {
  auto m = BasicOwtModel<double>::init(tiny_config());
  scale_parameters(m, 10.0);
  auto x = random_tensor<double>({3, 8}, 17);
  const auto r = gradcheck<double>({x}, [&] { return weighted_sum(token_group_encode(x, m), 18); }, 1e-5);
  EXPECT_LT(r.relative_error, 1e-4);
}

// End-to-end: every parameter and the input, c_e=8, one block per stage, 8x8 image, p=4.
TEST(ModelGradTest, EndToEndAllParameters64) {
  auto m = BasicOwtModel<double>::init(tiny_config());
  scale_parameters(m, 10.0);
  auto img = random_tensor<double>({8, 8, 1}, 19);
  auto leaves = leaves_of(m);
  leaves.push_back(img);
  const RetainedSelection sel{{2, 0}};
  const auto r = gradcheck<double>(leaves, [&] { return weighted_sum(forward_owt(img, sel, m).image, 20); }, 1e-5);
  EXPECT_LT(r.relative_error, 1e-4);
  EXPECT_GT(r.analytic_norm, 1e-3);
}

TEST(ModelGradTest, EndToEndAllParameters32) {
  auto m64 = BasicOwtModel<double>::init(tiny_config());
  scale_parameters(m64, 10.0);
  auto m = cast_model<float>(m64);
  auto img = random_tensor<float>({8, 8, 1}, 21, 1.0);
  auto leaves = leaves_of(m);
  leaves.push_back(img);
  const RetainedSelection sel{{1}};
  const auto r = gradcheck<float>(leaves, [&] { return weighted_sum(forward_owt(img, sel, m).image, 22); }, 1e-2);
  EXPECT_LT(r.relative_error, 1e-3);
}

// Every parameter must receive some gradient on the TGR path.
TEST(ModelGradTest, EveryParameterReceivesGradient) {
  auto m = OwtModel::init(tiny_config());
  auto img = random_tensor<float>({8, 8, 1}, 23, 1.0, false);
  mse_loss(forward_owt(img, RetainedSelection{{1, 2}}, m).image, img).backward();
  const auto params = m.parameters();
  for (const auto& p : params.entries()) {
    double n = 0;
    for (float g : p.tensor.grad()) n += std::abs(g);
    EXPECT_GT(n, 0.0) << p.name;
  }
}

}  // namespace
}  // namespace owt
