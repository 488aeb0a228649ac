#pragma once

#include <torch/torch.h>

#include <optional>

#include "tbtnet/backbone.hpp"
#include "tbtnet/bitransformer.hpp"

namespace tbtnet {

struct ModelOptions {
  BackboneSpec backbone;
  int64_t channels = 20;
  bool bi_transformer = true;
  double drop_rate = 0.05;
  uint64_t seed = 0;  // head initialization
};

/// Frozen backbone plus the learnable head. Copies share parameters.
class FewShotModel {
 public:
  FewShotModel(Backbone backbone, const ModelOptions& options);

  /// query/support images: [B,3,H,W] (or unbatched); support_mask: [B,H,W].
  NetworkOutput forward(const torch::Tensor& query_images, const torch::Tensor& support_images,
                        const torch::Tensor& support_masks, std::optional<at::Generator> rng = std::nullopt);

  /// Foreground/background logits of the final prediction resized bilinearly
  /// to the query image resolution, [B,2,H,W].
  torch::Tensor final_logits(const NetworkOutput& out, int64_t height, int64_t width) const;

  void train(bool on = true) { head_->train(on); }
  void eval() { head_->eval(); }
  void to(torch::Dtype dtype);

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  TBTNet& head() { return head_; }
  const TBTNet& head() const { return head_; }
  const ModelOptions& options() const { return options_; }

 private:
  Backbone backbone_;
  TBTNet head_{nullptr};
  ModelOptions options_;
};

/// Loads the backbone described by `options.backbone` and builds a seeded head.
FewShotModel make_model(const ModelOptions& options);

/// Head configuration implied by a backbone's block counts.
HeadConfig head_config_for(const Backbone& backbone, const ModelOptions& options);

/// Parameters with requires_grad over backbone and head.
int64_t count_learnable_params(const FewShotModel& model);

}  // namespace tbtnet
