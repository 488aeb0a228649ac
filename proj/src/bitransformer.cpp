#include "tbtnet/bitransformer.hpp"

#include <cmath>

namespace tbtnet {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

ConvBlockImpl::ConvBlockImpl(int64_t in_channels, int64_t mid_channels, int64_t out_channels) {
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, mid_channels, 3).padding(1)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(mid_channels, out_channels, 3).padding(1)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  return torch::relu(conv2(torch::relu(conv1(x))));
}

int64_t ConvBlockImpl::parameter_count(int64_t in_channels, int64_t mid_channels, int64_t out_channels) {
  return in_channels * mid_channels * 9 + mid_channels + mid_channels * out_channels * 9 + out_channels;
}

torch::Tensor binarize_logits(const torch::Tensor& logits) {
  const int64_t channel_dim = logits.dim() - 3;
  if (channel_dim < 0 || logits.size(channel_dim) != 2) throw ShapeError("binarize_logits expects 2-channel logits");
  auto background = logits.select(channel_dim, 0);
  auto foreground = logits.select(channel_dim, 1);
  return torch::logical_not(background > foreground).to(logits.dtype()).detach();
}

torch::Tensor upsample_token(const torch::Tensor& token, Grid from, Grid to) {
  if (token.dim() != 4 || token.size(1) != from.size() || token.size(2) != 1) {
    throw ShapeError("token must be [B, H*W, 1, D] over grid " + to_string(from));
  }
  if (to.h < from.h || to.w < from.w) {
    throw ShapeError("upsample_token cannot shrink " + to_string(from) + " to " + to_string(to));
  }
  if (to == from) return token;
  const int64_t batch = token.size(0);
  const int64_t channels = token.size(3);
  auto field = token.reshape({batch, from.h, from.w, channels}).permute({0, 3, 1, 2});
  auto up = F::interpolate(field, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{to.h, to.w})
                                      .mode(torch::kBilinear)
                                      .align_corners(true));
  return up.permute({0, 2, 3, 1}).reshape({batch, to.size(), 1, channels});
}

namespace {

torch::Tensor token_to_map(const torch::Tensor& token, Grid grid) {
  return token.reshape({token.size(0), grid.h, grid.w, token.size(3)}).permute({0, 3, 1, 2});
}

TTMOptions ttm_options(const TBTMOptions& o, TTMStage stage) {
  return {stage == TTMStage::first ? o.blocks : o.channels, o.channels, stage, o.drop_rate};
}

}  // namespace

BiTransformerModuleImpl::BiTransformerModuleImpl(const TBTMOptions& options) : options_(options) {
  if (options.blocks <= 0 || options.channels <= 0) throw ConfigError("bi-transformer widths must be positive");
  ttm_qs_1 = register_module("ttm_qs_1", TargetTransformerModule(ttm_options(options, TTMStage::first)));
  ttm_qs_2 = register_module("ttm_qs_2", TargetTransformerModule(ttm_options(options, TTMStage::second)));
  if (options.bi_transformer) {
    ttm_qq_1 = register_module("ttm_qq_1", TargetTransformerModule(ttm_options(options, TTMStage::first)));
    ttm_qq_2 = register_module("ttm_qq_2", TargetTransformerModule(ttm_options(options, TTMStage::second)));
  }
  conv_block = register_module("conv_block", ConvBlock(options.channels, options.channels, 2));
}

int64_t BiTransformerModuleImpl::parameter_count(const TBTMOptions& o) {
  const int64_t branch = TargetTransformerModuleImpl::parameter_count(ttm_options(o, TTMStage::first)) +
                         TargetTransformerModuleImpl::parameter_count(ttm_options(o, TTMStage::second));
  return (o.bi_transformer ? 2 : 1) * branch + ConvBlockImpl::parameter_count(o.channels, o.channels, 2);
}

TBTMOutput BiTransformerModuleImpl::forward(const Hypercorrelation& cross_corr, const Hypercorrelation& self_corr,
                                            const torch::Tensor& support_mask, const torch::Tensor& prev_token,
                                            std::optional<at::Generator> rng) {
  const Grid query_grid = cross_corr.query_grid;
  if (prev_token.dim() != 4 || prev_token.size(1) != query_grid.size() || prev_token.size(2) != 1) {
    throw ShapeError("MixToken does not match query grid " + to_string(query_grid));
  }

  TBTMOutput out;
  auto cross = ttm_qs_1(cross_corr.values, cross_corr.support_grid, support_mask, Branch::cross, rng);
  out.cross_out = ttm_qs_2(cross.out + prev_token, cross.grid, support_mask, Branch::cross, rng).out;
  out.logits = conv_block(token_to_map(out.cross_out, query_grid));
  out.pseudo_mask = binarize_logits(out.logits);

  out.mix_token = prev_token + out.cross_out;
  if (options_.bi_transformer) {
    if (!self_corr.values.defined() || self_corr.query_grid != query_grid) {
      throw ShapeError("self hypercorrelation does not match the cross branch query grid");
    }
    auto self = ttm_qq_1(self_corr.values, self_corr.support_grid, out.pseudo_mask, Branch::self, rng);
    out.self_out = ttm_qq_2(self.out + prev_token, self.grid, out.pseudo_mask, Branch::self, rng).out;
    out.mix_token = out.mix_token + out.self_out;
  }
  return out;
}

TBTNetImpl::TBTNetImpl(const HeadConfig& config) : config_(config) {
  if (config.channels <= 0) throw ConfigError("MixToken width must be positive");
  if (!(config.drop_rate >= 0.0 && config.drop_rate < 1.0)) throw ConfigError("drop rate must lie in [0, 1)");
  auto level = [&](int l) {
    return BiTransformerModule(TBTMOptions{config.blocks[static_cast<size_t>(l - 2)], config.channels,
                                           config.bi_transformer, config.drop_rate});
  };
  level4 = register_module("level4", level(4));
  level3 = register_module("level3", level(3));
  level2 = register_module("level2", level(2));
  decoder_a = register_module("decoder_a", ConvBlock(config.channels, config.channels, config.channels));
  decoder_b = register_module("decoder_b", ConvBlock(config.channels, config.channels, 2));
}

int64_t TBTNetImpl::parameter_count(const HeadConfig& c) {
  int64_t n = 0;
  for (auto blocks : c.blocks) n += BiTransformerModuleImpl::parameter_count({blocks, c.channels, c.bi_transformer, c.drop_rate});
  return n + ConvBlockImpl::parameter_count(c.channels, c.channels, c.channels) +
         ConvBlockImpl::parameter_count(c.channels, c.channels, 2);
}

Grid support_grid_for_layer(const FeaturePyramid& support, int l) {
  return l == 2 ? support.grid(3) : support.grid(l);
}

NetworkOutput TBTNetImpl::forward(const FeaturePyramid& query, const FeaturePyramid& support,
                                  const torch::Tensor& support_mask, std::optional<at::Generator> rng) {
  for (int l = 2; l <= 4; ++l) {
    const auto expected = config_.blocks[static_cast<size_t>(l - 2)];
    if (query.blocks(l) != expected || support.blocks(l) != expected) {
      throw ShapeError("layer " + std::to_string(l) + " has " + std::to_string(query.blocks(l)) +
                       " blocks but the head was built for " + std::to_string(expected));
    }
  }
  auto mask = support_mask.dim() == 2 ? support_mask.unsqueeze(0) : support_mask;
  const auto reference = query.layer(4).front();
  mask = mask.to(reference.dtype());
  const int64_t batch = reference.size(0);
  if (mask.size(0) != batch) throw ShapeError("support mask batch does not match the feature batch");

  NetworkOutput result;
  const std::array<BiTransformerModule*, 3> levels{&level2, &level3, &level4};
  torch::Tensor token =
      torch::zeros({batch, query.grid(4).size(), 1, config_.channels}, reference.options());
  Grid token_grid = query.grid(4);
  for (int l = 4; l >= 2; --l) {
    const Grid query_grid = query.grid(l);
    token = upsample_token(token, token_grid, query_grid);
    auto cross = build_hypercorrelation(query.layer(l), support.layer(l), CorrelationKind::cross,
                                        support_grid_for_layer(support, l));
    Hypercorrelation self;
    if (config_.bi_transformer) {
      self = build_hypercorrelation(query.layer(l), query.layer(l), CorrelationKind::self,
                                    support_grid_for_layer(query, l));
    }
    auto out = (*levels[static_cast<size_t>(l - 2)])->forward(cross, self, mask, token, rng);
    token = out.mix_token;
    token_grid = query_grid;
    const auto idx = static_cast<size_t>(l - 2);
    result.logits[idx + 1] = out.logits;
    result.pseudo_masks[idx] = out.pseudo_mask;
    result.mix_tokens[idx] = out.mix_token;
    result.grids[idx + 1] = query_grid;
    result.levels[idx] = std::move(out);
  }
  const Grid final_grid{token_grid.h * 2, token_grid.w * 2};
  token = upsample_token(token, token_grid, final_grid);
  result.logits[0] = decoder_b(decoder_a(token_to_map(token, final_grid)));
  result.grids[0] = final_grid;
  return result;
}

torch::Tensor segmentation_cross_entropy(const torch::Tensor& logits, const torch::Tensor& target) {
  if (logits.dim() != 4 || logits.size(1) != 2) throw ShapeError("logits must be [B,2,h,w]");
  if (target.dim() != 3 || target.size(0) != logits.size(0)) throw ShapeError("target must be [B,H,W]");
  auto up = logits;
  if (logits.size(2) != target.size(1) || logits.size(3) != target.size(2)) {
    up = F::interpolate(logits, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{target.size(1), target.size(2)})
                                    .mode(torch::kBilinear)
                                    .align_corners(true));
  }
  return F::cross_entropy(up, target.to(torch::kLong));
}

torch::Tensor total_loss(const std::array<torch::Tensor, 4>& logits, const torch::Tensor& target, double alpha) {
  for (const auto& l : logits) {
    if (!l.defined()) throw std::invalid_argument("total_loss needs all four logit maps");
  }
  auto target3 = target.dim() == 2 ? target.unsqueeze(0) : target;
  auto intermediate = segmentation_cross_entropy(logits[1], target3) +
                      segmentation_cross_entropy(logits[2], target3) +
                      segmentation_cross_entropy(logits[3], target3);
  return (1.0 - 3.0 * alpha) * segmentation_cross_entropy(logits[0], target3) + alpha * intermediate;
}

namespace {

void two_sum(double a, double b, double& sum, double& err) {
  sum = a + b;
  const double z = sum - a;
  err = (a - (sum - z)) + (b - z);
}

}  // namespace

double combine_level_losses(const std::array<double, 4>& losses, double alpha) {
  const double final_weight = 1.0 - 3.0 * alpha;
  double partial = 0.0, partial_err = 0.0, intermediate = 0.0, intermediate_err = 0.0;
  two_sum(losses[1], losses[2], partial, partial_err);
  two_sum(partial, losses[3], intermediate, intermediate_err);

  const double p = final_weight * losses[0];
  const double p_err = std::fma(final_weight, losses[0], -p);
  const double q = alpha * intermediate;
  const double q_err = std::fma(alpha, intermediate, -q);
  double head = 0.0, head_err = 0.0;
  two_sum(p, q, head, head_err);
  return head + (head_err + p_err + q_err + alpha * (partial_err + intermediate_err));
}

}  // namespace tbtnet
