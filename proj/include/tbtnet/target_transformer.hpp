#pragma once

#include <torch/torch.h>

#include <optional>

#include "tbtnet/common.hpp"

namespace tbtnet {

enum class Branch { cross, self };

/// How Conv_Q and Conv_SC shrink the support grid.
///   keep:   3x3, stride 1, padding 1
///   halve:  3x3, stride 2, padding 1
///   global: mean over the grid, then 1x1 (output grid 1x1)
enum class SupportReduction { keep, halve, global };

Grid reduced_grid(Grid in, SupportReduction r);

/// Zeroes each element independently with probability `rate` when training.
/// No rescaling of the kept elements. rate must lie in [0, 1).
torch::Tensor drop_elements(const torch::Tensor& x, double rate, bool training,
                            std::optional<at::Generator> rng = std::nullopt);

/// Area-average pooling to `target`, then foreground wherever the average is
/// positive. mask: [H,W] or [B,H,W]; result has the same rank and dtype.
torch::Tensor downsample_mask(const torch::Tensor& mask, Grid target);

struct TTLOptions {
  int64_t in_channels = 0;
  int64_t hidden_channels = 0;
  int64_t out_channels = 0;
  SupportReduction reduction = SupportReduction::halve;
  double drop_rate = 0.0;
};

/// Softmax(Q K^T) (V * mask), softmax over the key axis, no temperature.
/// q: [R, S', D_hid]; k: [R, S, D_hid]; v: [R, S, D_out]; mask: [R, S, 1].
torch::Tensor masked_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                               const torch::Tensor& mask);

/// Convolutional projections of a batch of support grids, flattened to
/// [R, positions, channels].
struct TTLProjections {
  torch::Tensor query, key, value, shortcut;
};

struct TTLOutput {
  torch::Tensor out;       // [B, N_q, S', D_out]
  torch::Tensor attended;  // masked attention result before the MLP/norm residuals
  Grid grid;               // support grid of `out`
};

/// Target-aware transformer layer. The support axis of a hypercorrelation is
/// treated as a small image (one per query position) and projected by
/// convolutions into queries/shortcut (reduced grid) and keys/values (input
/// grid). Values at masked-out support positions are zeroed before attention.
class TargetTransformerLayerImpl : public torch::nn::Module {
 public:
  explicit TargetTransformerLayerImpl(const TTLOptions& options);

  /// x: [B, N_q, H_s*W_s, D_in]; mask: [B, H, W] binary with H >= H_s, W >= W_s.
  /// Dropout only happens on the self branch in training mode.
  TTLOutput forward(const torch::Tensor& x, Grid support, const torch::Tensor& mask, Branch branch,
                    std::optional<at::Generator> rng = std::nullopt);

  const TTLOptions& options() const { return options_; }

  /// rows: [R, D_in, H_s, W_s].
  TTLProjections project(const torch::Tensor& rows);
  /// Norm(MLP(a) + a + shortcut), then Norm(MLP(.) + .).
  torch::Tensor residual(const torch::Tensor& attended, const torch::Tensor& shortcut);

  /// Closed-form size of the parameter set.
  static int64_t parameter_count(const TTLOptions& options);

  torch::nn::Conv2d conv_q{nullptr}, conv_k{nullptr}, conv_v{nullptr}, conv_sc{nullptr};
  torch::nn::Sequential mlp1{nullptr}, mlp2{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};

 private:
  TTLOutput attend_rows(const torch::Tensor& rows, const torch::Tensor& row_mask, Grid support);

  TTLOptions options_;
};
TORCH_MODULE(TargetTransformerLayer);

/// Position of a transformer module inside a branch: the first one halves the
/// support grid, the second squeezes it to a single position.
enum class TTMStage { first, second };

struct TTMOptions {
  int64_t in_channels = 0;
  int64_t channels = 0;
  TTMStage stage = TTMStage::first;
  double drop_rate = 0.0;
};

/// Two chained target-aware transformer layers.
class TargetTransformerModuleImpl : public torch::nn::Module {
 public:
  explicit TargetTransformerModuleImpl(const TTMOptions& options);

  TTLOutput forward(const torch::Tensor& x, Grid support, const torch::Tensor& mask, Branch branch,
                    std::optional<at::Generator> rng = std::nullopt);

  static int64_t parameter_count(const TTMOptions& options);
  static std::pair<TTLOptions, TTLOptions> layer_options(const TTMOptions& options);

  TargetTransformerLayer ttl_a{nullptr}, ttl_b{nullptr};
};
TORCH_MODULE(TargetTransformerModule);

}  // namespace tbtnet
