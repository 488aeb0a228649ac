#include "tbtnet/model.hpp"

namespace tbtnet {

namespace F = torch::nn::functional;

HeadConfig head_config_for(const Backbone& backbone, const ModelOptions& options) {
  HeadConfig config;
  config.blocks = backbone.blocks_per_layer();
  config.channels = options.channels;
  config.bi_transformer = options.bi_transformer;
  config.drop_rate = options.drop_rate;
  return config;
}

FewShotModel::FewShotModel(Backbone backbone, const ModelOptions& options)
    : backbone_(std::move(backbone)), options_(options) {
  torch::manual_seed(options.seed);
  head_ = TBTNet(head_config_for(backbone_, options));
  if (backbone_.dtype() != torch::kFloat32) head_->to(backbone_.dtype());
}

NetworkOutput FewShotModel::forward(const torch::Tensor& query_images, const torch::Tensor& support_images,
                                    const torch::Tensor& support_masks, std::optional<at::Generator> rng) {
  auto query = backbone_.extract(query_images);
  auto support = backbone_.extract(support_images);
  auto masks = support_masks.dim() == 2 ? support_masks.unsqueeze(0) : support_masks;
  return head_->forward(query, support, masks, rng);
}

torch::Tensor FewShotModel::final_logits(const NetworkOutput& out, int64_t height, int64_t width) const {
  return F::interpolate(out.logits[0], F::InterpolateFuncOptions()
                                           .size(std::vector<int64_t>{height, width})
                                           .mode(torch::kBilinear)
                                           .align_corners(true));
}

void FewShotModel::to(torch::Dtype dtype) {
  backbone_.to(dtype);
  head_->to(dtype);
}

FewShotModel make_model(const ModelOptions& options) {
  return FewShotModel(load_backbone(options.backbone), options);
}

int64_t count_learnable_params(const FewShotModel& model) {
  int64_t n = model.backbone().trainable_parameter_count();
  for (const auto& p : model.head()->parameters()) {
    if (p.requires_grad()) n += p.numel();
  }
  return n;
}

}  // namespace tbtnet
