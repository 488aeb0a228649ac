#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "tbtnet/common.hpp"

namespace tbtnet {

enum class BackboneVariant { resnet50, resnet101, toy };

std::string to_string(BackboneVariant v);
BackboneVariant parse_backbone_variant(const std::string& name);

struct BackboneSpec {
  BackboneVariant variant = BackboneVariant::toy;
  // Serialized weights for the resnet variants (see README, "Backbone weights").
  std::filesystem::path weights;
  // Initialization seed for the toy variant.
  uint64_t seed = 0;
  int64_t toy_channels = 8;
  // Always true.
  bool frozen = true;
};

/// Per-layer block outputs for layers 2, 3 and 4. Every map is [B, C_l, H_l, W_l].
struct FeaturePyramid {
  std::array<std::vector<torch::Tensor>, 3> layers;

  /// l in {2, 3, 4}.
  const std::vector<torch::Tensor>& layer(int l) const;
  std::vector<torch::Tensor>& layer(int l);
  Grid grid(int l) const;
  int64_t blocks(int l) const { return static_cast<int64_t>(layer(l).size()); }
};

/// Module that returns the outputs of every block in layers 2..4.
class PyramidEncoder : public torch::nn::Module {
 public:
  virtual std::array<std::vector<torch::Tensor>, 3> forward_pyramid(torch::Tensor x) = 0;
};

/// Bottleneck residual block with the torchvision parameter layout.
class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(int64_t in_channels, int64_t planes, int64_t stride);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

/// ResNet-50/101 trunk (no classifier). Parameter names match torchvision's
/// `resnet50` / `resnet101` so exported torchvision weights load directly.
class ResNetEncoder : public PyramidEncoder {
 public:
  explicit ResNetEncoder(std::array<int64_t, 4> blocks);
  std::array<std::vector<torch::Tensor>, 3> forward_pyramid(torch::Tensor x) override;

 private:
  torch::nn::Sequential make_layer(int64_t& in_channels, int64_t planes, int64_t blocks,
                                   int64_t stride);

  torch::nn::Conv2d conv1{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr};
  torch::nn::MaxPool2d maxpool{nullptr};
  torch::nn::Sequential layer1{nullptr}, layer2{nullptr}, layer3{nullptr}, layer4{nullptr};
};

/// Three conv stages (cumulative strides 8/16/32), two conv+ReLU blocks each,
/// weights drawn from a seeded generator.
class ToyEncoder : public PyramidEncoder {
 public:
  ToyEncoder(int64_t channels, uint64_t seed);
  std::array<std::vector<torch::Tensor>, 3> forward_pyramid(torch::Tensor x) override;

 private:
  // stage * 2 + block
  std::vector<torch::nn::Conv2d> convs_;
};

/// Frozen feature extractor. Copies share the underlying weights.
class Backbone {
 public:
  Backbone(BackboneSpec spec, std::shared_ptr<PyramidEncoder> encoder);

  /// images: [3,H,W] or [B,3,H,W], RGB in [0,1]. H and W must be multiples of
  /// stride_granularity(); 400x400 gives 50/25/13 grids.
  FeaturePyramid extract(const torch::Tensor& images) const;

  const BackboneSpec& spec() const { return spec_; }
  /// {D_2, D_3, D_4}.
  std::array<int64_t, 3> blocks_per_layer() const;
  int64_t stride_granularity() const { return 8; }
  int64_t trainable_parameter_count() const;
  int64_t parameter_count() const;

  void to(torch::Dtype dtype);
  torch::Dtype dtype() const { return dtype_; }
  void save(const std::filesystem::path& path) const;
  std::shared_ptr<PyramidEncoder> encoder() const { return encoder_; }

 private:
  BackboneSpec spec_;
  std::shared_ptr<PyramidEncoder> encoder_;
  torch::Dtype dtype_ = torch::kFloat32;
};

/// Builds the backbone and loads its weights. Resnet variants require
/// `spec.weights` to name a readable weights file (LoadError otherwise).
Backbone load_backbone(const BackboneSpec& spec);

/// Randomly initialized resnet-like backbone; used to produce weight files
/// for tests and for shape-only experiments.
Backbone make_random_backbone(const BackboneSpec& spec, uint64_t seed);

/// Free-function form of Backbone::extract.
FeaturePyramid extract_pyramid(const Backbone& backbone, const torch::Tensor& image);

/// Block counts per stage {layer1..layer4} of the two resnet definitions.
std::array<int64_t, 4> resnet_stage_blocks(BackboneVariant v);

}  // namespace tbtnet
