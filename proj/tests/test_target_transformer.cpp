#include <gtest/gtest.h>
#include <torch/torch.h>

#include <ATen/CPUGeneratorImpl.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "tbtnet/target_transformer.hpp"

using namespace tbtnet;

namespace {

void randomize(torch::nn::Module& m, double scale = 0.5) {
  torch::NoGradGuard guard;
  for (auto& p : m.parameters()) p.uniform_(-scale, scale);
}

int64_t count(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

torch::Tensor random_mask(int64_t b, int64_t h, int64_t w) {
  return (torch::rand({b, h, w}) > 0.5).to(torch::kFloat32);
}

}  // namespace

TEST(DropElements, ZeroRateIsIdentity) {
  auto x = torch::rand({3, 4, 5});
  EXPECT_TRUE(torch::equal(drop_elements(x, 0.0, true), x));
}

TEST(DropElements, EvalModeIsIdentity) {
  auto x = torch::rand({3, 4, 5});
  EXPECT_TRUE(torch::equal(drop_elements(x, 0.5, false), x));
}

TEST(DropElements, ZeroedFractionConcentratesAtRate) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(42);
  auto x = torch::ones({100000});
  auto y = drop_elements(x, 0.5, true, gen);
  const double zeroed = (y == 0).sum().item<double>() / 100000.0;
  EXPECT_NEAR(zeroed, 0.5, 0.02);
  // kept elements are not rescaled
  EXPECT_EQ(y.max().item<float>(), 1.0f);
}

TEST(DropElements, SameGeneratorSeedSameMask) {
  auto x = torch::rand({50, 50});
  auto a = drop_elements(x, 0.3, true, at::make_generator<at::CPUGeneratorImpl>(7));
  auto b = drop_elements(x, 0.3, true, at::make_generator<at::CPUGeneratorImpl>(7));
  EXPECT_TRUE(torch::equal(a, b));
}

TEST(DropElements, RateOutsideRangeIsConfigError) {
  auto x = torch::rand({4});
  EXPECT_THROW(drop_elements(x, 1.0, true), ConfigError);
  EXPECT_THROW(drop_elements(x, -0.1, false), ConfigError);
}

TEST(DownsampleMask, OnesAndZeros) {
  EXPECT_TRUE(torch::equal(downsample_mask(torch::ones({4, 4}), {2, 2}), torch::ones({2, 2})));
  EXPECT_TRUE(torch::equal(downsample_mask(torch::zeros({4, 4}), {2, 2}), torch::zeros({2, 2})));
}

TEST(DownsampleMask, SinglePixelMarksOnlyCoveringCell) {
  auto m = torch::zeros({4, 4});
  m[3][0] = 1;
  auto d = downsample_mask(m, {2, 2});
  auto expected = torch::tensor({0.0f, 0.0f, 1.0f, 0.0f}).view({2, 2});
  EXPECT_TRUE(torch::equal(d, expected));
}

TEST(DownsampleMask, NonDivisibleSizesMatchOracle) {
  torch::manual_seed(1);
  for (auto [h, th] : std::vector<std::pair<int, int>>{{25, 13}, {13, 7}, {50, 25}, {7, 4}, {9, 1}}) {
    auto m = (torch::rand({h, h}) > 0.9).to(torch::kFloat32);
    auto d = downsample_mask(m, {th, th});
    auto expected = oracle::downsample_mask(oracle::to_vec(m), h, h, th, th);
    EXPECT_EQ(oracle::to_vec(d), expected) << h << "->" << th;
  }
}

TEST(DownsampleMask, LargerTargetThrows) {
  EXPECT_THROW(downsample_mask(torch::ones({4, 4}), {5, 4}), ShapeError);
}

TEST(ReducedGrid, Schedule) {
  EXPECT_EQ(reduced_grid({13, 13}, SupportReduction::halve), (Grid{7, 7}));
  EXPECT_EQ(reduced_grid({25, 25}, SupportReduction::halve), (Grid{13, 13}));
  EXPECT_EQ(reduced_grid({7, 7}, SupportReduction::keep), (Grid{7, 7}));
  EXPECT_EQ(reduced_grid({7, 7}, SupportReduction::global), (Grid{1, 1}));
}

TEST(TargetTransformerLayer, ZeroMaskGivesZeroAttention) {
  torch::manual_seed(0);
  TargetTransformerLayer ttl(TTLOptions{3, 4, 4, SupportReduction::halve, 0.0});
  auto x = torch::rand({2, 5, 9, 3});
  auto out = ttl(x, Grid{3, 3}, torch::zeros({2, 6, 6}), Branch::cross);
  EXPECT_EQ(out.attended.abs().max().item<float>(), 0.0f);
  EXPECT_EQ(out.out.sizes(), (std::vector<int64_t>{2, 5, 4, 4}));
}

TEST(TargetTransformerLayer, SoftmaxRowsSumToOne) {
  // With constant values and a full mask, the attention output equals that
  // constant exactly when the weights of every row sum to one.
  torch::manual_seed(1);
  TargetTransformerLayer ttl(TTLOptions{2, 3, 3, SupportReduction::keep, 0.0});
  randomize(*ttl);
  {
    torch::NoGradGuard guard;
    ttl->conv_v->weight.zero_();
    ttl->conv_v->bias.copy_(torch::tensor({0.25f, -1.5f, 2.0f}));
  }
  auto out = ttl(torch::rand({1, 4, 16, 2}) * 5, Grid{4, 4}, torch::ones({1, 4, 4}), Branch::cross);
  auto expected = torch::tensor({0.25f, -1.5f, 2.0f}).view({1, 1, 1, 3}).expand_as(out.attended);
  EXPECT_LT((out.attended - expected).abs().max().item<float>(), 1e-5);
}

TEST(TargetTransformerLayer, MaskedOutValuesDoNotMatter) {
  torch::manual_seed(2);
  TargetTransformerLayer ttl(TTLOptions{2, 4, 4, SupportReduction::halve, 0.0});
  randomize(*ttl);
  auto rows = torch::rand({6, 2, 4, 4});
  auto mask = (torch::rand({6, 16, 1}) > 0.5).to(torch::kFloat32);
  auto p = ttl->project(rows);
  auto perturbed = p.value + (1 - mask) * torch::randn_like(p.value) * 100;
  auto a = ttl->residual(masked_attention(p.query, p.key, p.value, mask), p.shortcut);
  auto b = ttl->residual(masked_attention(p.query, p.key, perturbed, mask), p.shortcut);
  EXPECT_LT((a - b).abs().max().item<float>(), 1e-6);
}

TEST(TargetTransformerLayer, QueryAxisPermutationEquivariance) {
  torch::manual_seed(3);
  TargetTransformerLayer ttl(TTLOptions{3, 4, 4, SupportReduction::halve, 0.0});
  auto x = torch::rand({1, 6, 16, 3});
  auto mask = random_mask(1, 8, 8);
  auto perm = torch::tensor({4, 0, 5, 2, 1, 3}, torch::kLong);
  auto a = ttl(x, Grid{4, 4}, mask, Branch::cross).out;
  auto b = ttl(x.index_select(1, perm), Grid{4, 4}, mask, Branch::cross).out;
  EXPECT_LT((a.index_select(1, perm) - b).abs().max().item<float>(), 1e-6);
}

TEST(TargetTransformerLayer, MatchesPerPositionOracle) {
  torch::manual_seed(4);
  for (auto reduction : {SupportReduction::keep, SupportReduction::halve, SupportReduction::global}) {
    TargetTransformerLayer ttl(TTLOptions{2, 2, 2, reduction, 0.0});
    randomize(*ttl);
    ttl->eval();
    auto x = torch::rand({1, 2, 4, 2});
    auto mask = torch::tensor({1.0f, 0.0f, 0.0f, 0.0f, 1.0f, 1.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f,
                               0.0f, 1.0f})
                    .view({1, 4, 4});
    auto out = ttl(x, Grid{2, 2}, mask, Branch::cross);
    for (int p = 0; p < 2; ++p) {
      auto ref = oracle::ttl_single_position(*ttl, oracle::to_vec(x[0][p]), 2, 2, oracle::to_vec(mask[0]), 4, 4);
      auto got = oracle::to_vec(out.out[0][p]);
      auto got_att = oracle::to_vec(out.attended[0][p]);
      ASSERT_EQ(got.size(), ref.out.size());
      for (size_t i = 0; i < got.size(); ++i) {
        EXPECT_NEAR(got[i], ref.out[i], 1e-5);
        EXPECT_NEAR(got_att[i], ref.attended[i], 1e-5);
      }
    }
  }
}

TEST(TargetTransformerLayer, ChunkedInferenceMatchesSinglePass) {
  torch::manual_seed(5);
  TargetTransformerLayer ttl(TTLOptions{2, 4, 4, SupportReduction::halve, 0.0});
  ttl->eval();
  // 64x64 support grid, 32x32 output grid: 2^22 attention elements per row, so
  // eight query positions need several chunks.
  auto x = torch::rand({1, 8, 64 * 64, 2});
  auto mask = random_mask(1, 64, 64);
  auto with_grad = ttl(x, Grid{64, 64}, mask, Branch::cross).out.detach();
  torch::NoGradGuard guard;
  auto chunked = ttl(x, Grid{64, 64}, mask, Branch::cross).out;
  EXPECT_LT((with_grad - chunked).abs().max().item<float>(), 1e-5);
}

TEST(TargetTransformerLayer, DropOnlyOnSelfBranchInTraining) {
  torch::manual_seed(6);
  TargetTransformerLayer ttl(TTLOptions{2, 4, 4, SupportReduction::keep, 0.5});
  auto x = torch::rand({1, 3, 9, 2});
  auto mask = torch::ones({1, 3, 3});
  ttl->train();
  auto gen_a = at::make_generator<at::CPUGeneratorImpl>(1);
  auto cross1 = ttl(x, Grid{3, 3}, mask, Branch::cross, gen_a).out;
  auto cross2 = ttl(x, Grid{3, 3}, mask, Branch::cross, gen_a).out;
  EXPECT_TRUE(torch::equal(cross1, cross2));
  auto self1 = ttl(x, Grid{3, 3}, mask, Branch::self, at::make_generator<at::CPUGeneratorImpl>(1)).out;
  auto self2 = ttl(x, Grid{3, 3}, mask, Branch::self, at::make_generator<at::CPUGeneratorImpl>(2)).out;
  EXPECT_FALSE(torch::equal(self1, self2));
  ttl->eval();
  auto self_eval = ttl(x, Grid{3, 3}, mask, Branch::self, gen_a).out;
  EXPECT_TRUE(torch::equal(self_eval, cross1));
}

TEST(TargetTransformerLayer, ShapeErrors) {
  TargetTransformerLayer ttl(TTLOptions{2, 4, 4, SupportReduction::keep, 0.0});
  EXPECT_THROW(ttl(torch::rand({1, 3, 8, 2}), Grid{3, 3}, torch::ones({1, 3, 3}), Branch::cross), ShapeError);
  EXPECT_THROW(ttl(torch::rand({1, 3, 9, 3}), Grid{3, 3}, torch::ones({1, 3, 3}), Branch::cross), ShapeError);
  EXPECT_THROW(ttl(torch::rand({1, 3, 9, 2}), Grid{3, 3}, torch::ones({1, 2, 2}), Branch::cross), ShapeError);
}

TEST(TargetTransformerLayer, ParameterCountMatchesClosedForm) {
  for (auto reduction : {SupportReduction::keep, SupportReduction::halve, SupportReduction::global}) {
    for (auto [din, dh, dout] : std::vector<std::tuple<int64_t, int64_t, int64_t>>{{2, 3, 4}, {23, 20, 20}, {4, 4, 4}}) {
      TTLOptions o{din, dh, dout, reduction, 0.0};
      TargetTransformerLayer ttl(o);
      EXPECT_EQ(count(*ttl), TargetTransformerLayerImpl::parameter_count(o));
    }
  }
}

TEST(TargetTransformerLayer, FiniteDifferenceGradients) {
  torch::manual_seed(7);
  for (auto reduction : {SupportReduction::halve, SupportReduction::global}) {
    TargetTransformerLayer ttl(TTLOptions{3, 4, 4, reduction, 0.0});
    randomize(*ttl);
    ttl->to(torch::kFloat64);
    ttl->eval();
    auto x = torch::rand({1, 2, 4, 3}, torch::kFloat64);
    auto mask = torch::tensor({1.0, 0.0, 1.0, 1.0}, torch::kFloat64).view({1, 2, 2});
    auto weights = torch::randn({1, 2, 1, 4}, torch::kFloat64);  // 2x2 grid reduces to 1x1 either way
    auto loss = [&] { return (ttl(x, Grid{2, 2}, mask, Branch::cross).out * weights).sum(); };
    auto entries = gradcheck::check(loss, ttl->parameters(), 0);
    EXPECT_LT(gradcheck::max_relative_error(entries), 1e-3);
  }
}

TEST(TargetTransformerModule, StageGridSchedule) {
  torch::manual_seed(8);
  TargetTransformerModule first(TTMOptions{3, 4, TTMStage::first, 0.0});
  TargetTransformerModule second(TTMOptions{4, 4, TTMStage::second, 0.0});
  first->eval();
  second->eval();
  torch::NoGradGuard guard;
  auto mask = torch::ones({1, 13, 13});
  auto a = first(torch::rand({1, 2, 169, 3}), Grid{13, 13}, mask, Branch::cross);
  EXPECT_EQ(a.grid, (Grid{7, 7}));
  EXPECT_EQ(a.out.size(2), 49);
  for (Grid g : {Grid{7, 7}, Grid{13, 13}, Grid{2, 2}, Grid{1, 1}}) {
    auto b = second(torch::rand({1, 2, g.size(), 4}), g, mask, Branch::cross);
    EXPECT_EQ(b.out.size(2), 1) << to_string(g);
  }
}

TEST(TargetTransformerModule, ZeroInputWithZeroBiasesGivesZero) {
  TargetTransformerModule ttm(TTMOptions{3, 4, TTMStage::first, 0.0});
  {
    torch::NoGradGuard guard;
    for (auto& p : ttm->named_parameters()) {
      if (p.key().find("bias") != std::string::npos) p.value().zero_();
    }
  }
  auto out = ttm(torch::zeros({1, 2, 16, 3}), Grid{4, 4}, torch::ones({1, 4, 4}), Branch::cross);
  EXPECT_EQ(out.out.abs().max().item<float>(), 0.0f);
}

TEST(TargetTransformerModule, ParameterCountMatchesClosedForm) {
  for (auto stage : {TTMStage::first, TTMStage::second}) {
    TTMOptions o{23, 20, stage, 0.05};
    TargetTransformerModule ttm(o);
    EXPECT_EQ(count(*ttm), TargetTransformerModuleImpl::parameter_count(o));
  }
}
