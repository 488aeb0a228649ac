#include <gtest/gtest.h>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>

#include "tbtnet/backbone.hpp"

using namespace tbtnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "tbtnet_test_backbone";
  fs::create_directories(dir);
  return dir / name;
}

// Independent block count: walk the module tree and count modules that own a
// `conv3` child (bottlenecks) under layer2/layer3/layer4.
std::array<int64_t, 3> count_bottlenecks(const Backbone& b) {
  std::array<int64_t, 3> counts{0, 0, 0};
  for (const auto& item : b.encoder()->named_modules("", false)) {
    const auto& name = item.key();
    for (int l = 2; l <= 4; ++l) {
      const std::string prefix = "layer" + std::to_string(l) + ".";
      if (name.rfind(prefix, 0) == 0 && name.find('.', prefix.size()) == std::string::npos &&
          item.value()->named_children().contains("conv3")) {
        ++counts[static_cast<size_t>(l - 2)];
      }
    }
  }
  return counts;
}

}  // namespace

TEST(ToyBackbone, DeterministicFromSeed) {
  BackboneSpec spec;
  spec.seed = 0;
  auto a = load_backbone(spec);
  auto b = load_backbone(spec);
  auto img = torch::rand({3, 32, 32});
  auto pa = a.extract(img);
  auto pb = b.extract(img);
  for (int l = 2; l <= 4; ++l)
    for (size_t d = 0; d < pa.layer(l).size(); ++d) EXPECT_TRUE(torch::equal(pa.layer(l)[d], pb.layer(l)[d]));

  spec.seed = 1;
  auto c = load_backbone(spec);
  EXPECT_FALSE(torch::equal(c.extract(img).layer(2)[0], pa.layer(2)[0]));
}

TEST(ToyBackbone, StrideSchedule) {
  auto b = load_backbone(BackboneSpec{});
  auto p = b.extract(torch::rand({3, 32, 32}));
  EXPECT_EQ(p.grid(2), (Grid{4, 4}));
  EXPECT_EQ(p.grid(3), (Grid{2, 2}));
  EXPECT_EQ(p.grid(4), (Grid{1, 1}));
  for (int l = 2; l <= 4; ++l) {
    EXPECT_EQ(p.blocks(l), 2);
    EXPECT_EQ(p.layer(l)[0].size(1), 8);
  }
  auto q = b.extract(torch::rand({2, 3, 64, 64}));
  EXPECT_EQ(q.grid(2), (Grid{8, 8}));
  EXPECT_EQ(q.grid(4), (Grid{2, 2}));
  EXPECT_EQ(q.layer(3)[1].size(0), 2);
}

TEST(ToyBackbone, FrozenAndGradientFree) {
  auto b = load_backbone(BackboneSpec{});
  EXPECT_EQ(b.trainable_parameter_count(), 0);
  EXPECT_GT(b.parameter_count(), 0);
  auto img = torch::rand({3, 32, 32}, torch::requires_grad());
  auto p = b.extract(img);
  EXPECT_FALSE(p.layer(2)[0].requires_grad());
}

TEST(ToyBackbone, ShapeErrors) {
  auto b = load_backbone(BackboneSpec{});
  EXPECT_THROW(b.extract(torch::rand({1, 32, 32})), ShapeError);
  EXPECT_THROW(b.extract(torch::rand({3, 30, 32})), ShapeError);
}

TEST(ResNetBackbone, BlockCountsMatchArchitecture) {
  for (auto [variant, expected] : std::vector<std::pair<BackboneVariant, std::array<int64_t, 3>>>{
           {BackboneVariant::resnet50, {4, 6, 3}}, {BackboneVariant::resnet101, {4, 23, 3}}}) {
    BackboneSpec spec;
    spec.variant = variant;
    auto b = make_random_backbone(spec, 0);
    EXPECT_EQ(count_bottlenecks(b), expected);
    EXPECT_EQ(b.blocks_per_layer(), expected);
    EXPECT_EQ(b.trainable_parameter_count(), 0);
  }
}

TEST(ResNetBackbone, MissingWeightsNamePath) {
  BackboneSpec spec;
  spec.variant = BackboneVariant::resnet50;
  spec.weights = "/nonexistent/dir/resnet50.pt";
  try {
    load_backbone(spec);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/resnet50.pt"), std::string::npos);
  }
  spec.weights.clear();
  EXPECT_THROW(load_backbone(spec), LoadError);
}

TEST(ResNetBackbone, CorruptWeightsNamePath) {
  auto path = temp_path("corrupt.pt");
  std::ofstream(path) << "definitely not a weights archive";
  BackboneSpec spec;
  spec.variant = BackboneVariant::resnet50;
  spec.weights = path;
  try {
    load_backbone(spec);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find(path.string()), std::string::npos);
  }
}

TEST(ResNetBackbone, SaveLoadRoundTripAnd400Schedule) {
  BackboneSpec spec;
  spec.variant = BackboneVariant::resnet50;
  auto random = make_random_backbone(spec, 3);
  auto path = temp_path("resnet50.pt");
  random.save(path);
  spec.weights = path;
  auto loaded = load_backbone(spec);

  auto img = torch::rand({3, 400, 400});
  auto a = random.extract(img);
  auto b = loaded.extract(img);
  EXPECT_EQ(b.grid(2), (Grid{50, 50}));
  EXPECT_EQ(b.grid(3), (Grid{25, 25}));
  EXPECT_EQ(b.grid(4), (Grid{13, 13}));
  EXPECT_EQ(b.blocks(3), 6);
  for (int l = 2; l <= 4; ++l) {
    const auto& maps = b.layer(l);
    for (const auto& m : maps) EXPECT_EQ(m.sizes(), maps.front().sizes());
  }
  EXPECT_TRUE(torch::equal(a.layer(4).back(), b.layer(4).back()));
}
