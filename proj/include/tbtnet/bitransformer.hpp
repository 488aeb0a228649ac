#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>

#include "tbtnet/backbone.hpp"
#include "tbtnet/correlation.hpp"
#include "tbtnet/target_transformer.hpp"

namespace tbtnet {

/// Weight of each intermediate loss; the final prediction gets 1 - 3 * alpha.
inline constexpr double kDefaultLossAlpha = 0.1;

/// Conv(3x3) -> ReLU -> Conv(3x3) -> ReLU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in_channels, int64_t mid_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  static int64_t parameter_count(int64_t in_channels, int64_t mid_channels, int64_t out_channels);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Pixel is background (0) iff channel 0 > channel 1, foreground (1) otherwise.
/// logits: [2,H,W] or [B,2,H,W]; result drops the channel axis, dtype matches.
torch::Tensor binarize_logits(const torch::Tensor& logits);

/// Bilinear (align_corners) resize of a [B, H*W, 1, D] token field.
torch::Tensor upsample_token(const torch::Tensor& token, Grid from, Grid to);

struct TBTMOptions {
  int64_t blocks = 0;    // D_l, depth of the incoming hypercorrelations
  int64_t channels = 0;  // D, width of the MixToken
  bool bi_transformer = true;
  double drop_rate = 0.0;
};

struct TBTMOutput {
  torch::Tensor mix_token;    // T_l, [B, N_q, 1, D]
  torch::Tensor logits;       // [B, 2, H_q, W_q]
  torch::Tensor pseudo_mask;  // [B, H_q, W_q], no gradient
  torch::Tensor cross_out;    // squeezed cross branch, [B, N_q, 1, D]
  torch::Tensor self_out;     // squeezed self branch, undefined without bi-transformer
};

/// One pyramid level: cross branch -> intermediate prediction -> self branch
/// guided by the binarized prediction -> residual MixToken update.
class BiTransformerModuleImpl : public torch::nn::Module {
 public:
  explicit BiTransformerModuleImpl(const TBTMOptions& options);

  /// `self_corr` is ignored (and may be empty) when the self branch is disabled.
  /// `prev_token` must already be at this level's query grid.
  TBTMOutput forward(const Hypercorrelation& cross_corr, const Hypercorrelation& self_corr,
                     const torch::Tensor& support_mask, const torch::Tensor& prev_token,
                     std::optional<at::Generator> rng = std::nullopt);

  const TBTMOptions& options() const { return options_; }
  static int64_t parameter_count(const TBTMOptions& options);

  TargetTransformerModule ttm_qs_1{nullptr}, ttm_qs_2{nullptr}, ttm_qq_1{nullptr}, ttm_qq_2{nullptr};
  ConvBlock conv_block{nullptr};

 private:
  TBTMOptions options_;
};
TORCH_MODULE(BiTransformerModule);

struct HeadConfig {
  std::array<int64_t, 3> blocks{2, 2, 2};  // D_2, D_3, D_4
  int64_t channels = 20;
  bool bi_transformer = true;
  double drop_rate = 0.05;
};

/// Logit maps, index 0 = final (M_1), then layers 2, 3, 4.
struct NetworkOutput {
  std::array<torch::Tensor, 4> logits;
  std::array<torch::Tensor, 3> pseudo_masks;  // layers 2, 3, 4
  std::array<torch::Tensor, 3> mix_tokens;    // layers 2, 3, 4
  std::array<TBTMOutput, 3> levels;           // layers 2, 3, 4
  std::array<Grid, 4> grids;                  // final, 2, 3, 4
};

/// Learnable part of the network: three bi-transformer levels (4 -> 3 -> 2) and
/// two convolution-block decoders operating at twice the layer-2 resolution.
class TBTNetImpl : public torch::nn::Module {
 public:
  explicit TBTNetImpl(const HeadConfig& config);

  /// Pyramids must come from the same backbone; support_mask is [B,H,W].
  NetworkOutput forward(const FeaturePyramid& query, const FeaturePyramid& support,
                        const torch::Tensor& support_mask, std::optional<at::Generator> rng = std::nullopt);

  const HeadConfig& config() const { return config_; }
  static int64_t parameter_count(const HeadConfig& config);

  BiTransformerModule level4{nullptr}, level3{nullptr}, level2{nullptr};
  ConvBlock decoder_a{nullptr}, decoder_b{nullptr};

 private:
  HeadConfig config_;
};
TORCH_MODULE(TBTNet);

/// Support-axis grid used at layer l: layer 2 support features are matched at
/// the layer-3 resolution.
Grid support_grid_for_layer(const FeaturePyramid& support, int l);

/// Per-pixel two-class cross entropy (mean) after bilinear upsampling of
/// `logits` [B,2,h,w] to the size of `target` [B,H,W].
torch::Tensor segmentation_cross_entropy(const torch::Tensor& logits, const torch::Tensor& target);

/// (1 - 3 alpha) L_1 + alpha (L_2 + L_3 + L_4) on tensors, keeping autograd.
torch::Tensor total_loss(const std::array<torch::Tensor, 4>& logits, const torch::Tensor& target,
                         double alpha = kDefaultLossAlpha);

/// Same weighting on scalar losses {L_1, L_2, L_3, L_4}, evaluated with
/// compensated arithmetic so the result is the correctly rounded weighted sum
/// in the cases that matter (equal losses give L_1 back, L_1 alone gives
/// (1 - 3 alpha) * L_1).
double combine_level_losses(const std::array<double, 4>& losses, double alpha = kDefaultLossAlpha);

}  // namespace tbtnet
