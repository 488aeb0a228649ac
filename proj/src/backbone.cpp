#include "tbtnet/backbone.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

namespace tbtnet {

namespace nn = torch::nn;

std::string to_string(BackboneVariant v) {
  switch (v) {
    case BackboneVariant::resnet50: return "resnet50";
    case BackboneVariant::resnet101: return "resnet101";
    case BackboneVariant::toy: return "toy";
  }
  return "unknown";
}

BackboneVariant parse_backbone_variant(const std::string& name) {
  if (name == "resnet50" || name == "resnet50-like") return BackboneVariant::resnet50;
  if (name == "resnet101" || name == "resnet101-like") return BackboneVariant::resnet101;
  if (name == "toy") return BackboneVariant::toy;
  throw ConfigError("unknown backbone variant '" + name + "' (expected resnet50, resnet101 or toy)");
}

std::array<int64_t, 4> resnet_stage_blocks(BackboneVariant v) {
  switch (v) {
    case BackboneVariant::resnet50: return {3, 4, 6, 3};
    case BackboneVariant::resnet101: return {3, 4, 23, 3};
    case BackboneVariant::toy: break;
  }
  throw ConfigError("toy backbone has no resnet stage definition");
}

const std::vector<torch::Tensor>& FeaturePyramid::layer(int l) const {
  if (l < 2 || l > 4) throw ShapeError("pyramid layer must be 2, 3 or 4, got " + std::to_string(l));
  return layers[static_cast<size_t>(l - 2)];
}

std::vector<torch::Tensor>& FeaturePyramid::layer(int l) {
  if (l < 2 || l > 4) throw ShapeError("pyramid layer must be 2, 3 or 4, got " + std::to_string(l));
  return layers[static_cast<size_t>(l - 2)];
}

Grid FeaturePyramid::grid(int l) const {
  const auto& maps = layer(l);
  if (maps.empty()) throw ShapeError("pyramid layer " + std::to_string(l) + " is empty");
  return {maps.front().size(-2), maps.front().size(-1)};
}

namespace {

torch::Tensor imagenet_normalize(const torch::Tensor& x) {
  auto opts = x.options();
  auto mean = torch::tensor({0.485, 0.456, 0.406}, opts).view({1, 3, 1, 1});
  auto std = torch::tensor({0.229, 0.224, 0.225}, opts).view({1, 3, 1, 1});
  return (x - mean) / std;
}

void freeze(nn::Module& m) {
  for (auto& p : m.parameters()) p.set_requires_grad(false);
  m.eval();
}

}  // namespace

BottleneckImpl::BottleneckImpl(int64_t in_channels, int64_t planes, int64_t stride) {
  const int64_t out_channels = planes * 4;
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, planes, 1).bias(false)));
  bn1 = register_module("bn1", nn::BatchNorm2d(planes));
  conv2 = register_module(
      "conv2", nn::Conv2d(nn::Conv2dOptions(planes, planes, 3).stride(stride).padding(1).bias(false)));
  bn2 = register_module("bn2", nn::BatchNorm2d(planes));
  conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(planes, out_channels, 1).bias(false)));
  bn3 = register_module("bn3", nn::BatchNorm2d(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    downsample = register_module(
        "downsample",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1).stride(stride).bias(false)),
                       nn::BatchNorm2d(out_channels)));
  }
}

torch::Tensor BottleneckImpl::forward(torch::Tensor x) {
  auto identity = downsample ? downsample->forward(x) : x;
  auto out = torch::relu(bn1(conv1(x)));
  out = torch::relu(bn2(conv2(out)));
  out = bn3(conv3(out));
  return torch::relu(out + identity);
}

ResNetEncoder::ResNetEncoder(std::array<int64_t, 4> blocks) {
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
  bn1 = register_module("bn1", nn::BatchNorm2d(64));
  maxpool = register_module("maxpool", nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
  int64_t in_channels = 64;
  layer1 = register_module("layer1", make_layer(in_channels, 64, blocks[0], 1));
  layer2 = register_module("layer2", make_layer(in_channels, 128, blocks[1], 2));
  layer3 = register_module("layer3", make_layer(in_channels, 256, blocks[2], 2));
  layer4 = register_module("layer4", make_layer(in_channels, 512, blocks[3], 2));
}

nn::Sequential ResNetEncoder::make_layer(int64_t& in_channels, int64_t planes, int64_t blocks,
                                         int64_t stride) {
  nn::Sequential layer;
  for (int64_t i = 0; i < blocks; ++i) {
    layer->push_back(Bottleneck(in_channels, planes, i == 0 ? stride : 1));
    in_channels = planes * 4;
  }
  return layer;
}

std::array<std::vector<torch::Tensor>, 3> ResNetEncoder::forward_pyramid(torch::Tensor x) {
  x = maxpool(torch::relu(bn1(conv1(imagenet_normalize(x)))));
  x = layer1->forward(x);
  std::array<std::vector<torch::Tensor>, 3> out;
  const std::array<nn::Sequential*, 3> layers{&layer2, &layer3, &layer4};
  for (size_t l = 0; l < layers.size(); ++l) {
    auto& seq = *layers[l];
    for (size_t i = 0; i < seq->size(); ++i) {
      x = seq->ptr<BottleneckImpl>(i)->forward(x);
      out[l].push_back(x);
    }
  }
  return out;
}

ToyEncoder::ToyEncoder(int64_t channels, uint64_t seed) {
  if (channels <= 0) throw ConfigError("toy backbone needs a positive channel count");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (int stage = 0; stage < 3; ++stage) {
    for (int block = 0; block < 2; ++block) {
      nn::Conv2dOptions opts = (stage == 0 && block == 0)   ? nn::Conv2dOptions(3, channels, 8).stride(8)
                               : (stage > 0 && block == 0) ? nn::Conv2dOptions(channels, channels, 3).stride(2).padding(1)
                                                           : nn::Conv2dOptions(channels, channels, 3).padding(1);
      auto conv = nn::Conv2d(opts);
      {
        torch::NoGradGuard guard;
        auto& w = conv->weight;
        const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
        w.copy_(torch::randn(w.sizes(), gen, w.options()) * std::sqrt(2.0 / fan_in));
        conv->bias.zero_();
      }
      convs_.push_back(register_module("stage" + std::to_string(stage + 1) + "_" + std::to_string(block), conv));
    }
  }
}

std::array<std::vector<torch::Tensor>, 3> ToyEncoder::forward_pyramid(torch::Tensor x) {
  x = imagenet_normalize(x);
  std::array<std::vector<torch::Tensor>, 3> out;
  for (size_t stage = 0; stage < 3; ++stage) {
    for (size_t block = 0; block < 2; ++block) {
      x = torch::relu(convs_[stage * 2 + block](x));
      out[stage].push_back(x);
    }
  }
  return out;
}

Backbone::Backbone(BackboneSpec spec, std::shared_ptr<PyramidEncoder> encoder)
    : spec_(std::move(spec)), encoder_(std::move(encoder)) {
  if (!encoder_) throw ConfigError("backbone encoder is null");
  spec_.frozen = true;
  freeze(*encoder_);
}

FeaturePyramid Backbone::extract(const torch::Tensor& images) const {
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (x.dim() != 4 || x.size(1) != 3) {
    throw ShapeError("backbone expects [3,H,W] or [B,3,H,W] RGB input, got " + std::to_string(x.dim()) +
                     "-d tensor with " + std::to_string(x.dim() >= 2 ? x.size(x.dim() - 3) : 0) + " channels");
  }
  const int64_t g = stride_granularity();
  if (x.size(2) % g != 0 || x.size(3) % g != 0) {
    throw ShapeError("image size " + std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)) +
                     " is not a multiple of " + std::to_string(g));
  }
  torch::NoGradGuard no_grad;
  FeaturePyramid pyramid;
  pyramid.layers = encoder_->forward_pyramid(x.to(dtype_));
  return pyramid;
}

std::array<int64_t, 3> Backbone::blocks_per_layer() const {
  if (spec_.variant == BackboneVariant::toy) return {2, 2, 2};
  auto b = resnet_stage_blocks(spec_.variant);
  return {b[1], b[2], b[3]};
}

int64_t Backbone::trainable_parameter_count() const {
  int64_t n = 0;
  for (const auto& p : encoder_->parameters()) {
    if (p.requires_grad()) n += p.numel();
  }
  return n;
}

int64_t Backbone::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : encoder_->parameters()) n += p.numel();
  return n;
}

void Backbone::to(torch::Dtype dtype) {
  encoder_->to(dtype);
  dtype_ = dtype;
}

void Backbone::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive archive;
  encoder_->save(archive);
  archive.save_to(path.string());
}

namespace {

std::shared_ptr<PyramidEncoder> make_encoder(const BackboneSpec& spec) {
  if (spec.variant == BackboneVariant::toy) return std::make_shared<ToyEncoder>(spec.toy_channels, spec.seed);
  return std::make_shared<ResNetEncoder>(resnet_stage_blocks(spec.variant));
}

}  // namespace

Backbone load_backbone(const BackboneSpec& spec) {
  auto encoder = make_encoder(spec);
  const bool needs_file = spec.variant != BackboneVariant::toy;
  if (needs_file || !spec.weights.empty()) {
    if (spec.weights.empty()) {
      throw LoadError("backbone '" + to_string(spec.variant) + "' requires a weights file");
    }
    if (!std::filesystem::is_regular_file(spec.weights)) {
      throw LoadError("backbone weights not found: " + spec.weights.string());
    }
    try {
      torch::serialize::InputArchive archive;
      archive.load_from(spec.weights.string());
      encoder->load(archive);
    } catch (const c10::Error& e) {
      throw LoadError("cannot load backbone weights from " + spec.weights.string() + ": " + e.what_without_backtrace());
    }
  }
  return Backbone(spec, std::move(encoder));
}

Backbone make_random_backbone(const BackboneSpec& spec, uint64_t seed) {
  if (spec.variant == BackboneVariant::toy) {
    BackboneSpec toy = spec;
    toy.seed = seed;
    return Backbone(toy, make_encoder(toy));
  }
  torch::manual_seed(seed);
  return Backbone(spec, make_encoder(spec));
}

FeaturePyramid extract_pyramid(const Backbone& backbone, const torch::Tensor& image) {
  return backbone.extract(image);
}

}  // namespace tbtnet
