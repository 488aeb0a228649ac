#include "tbtnet/target_transformer.hpp"

#include <algorithm>

namespace tbtnet {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

// Upper bound on attention-matrix elements per chunk when gradients are off.
constexpr int64_t kInferenceChunkElements = int64_t{1} << 24;

int64_t conv_params(int64_t in, int64_t out, int64_t k) { return in * out * k * k + out; }

int64_t qk_kernel(SupportReduction r) { return r == SupportReduction::global ? 1 : 3; }

nn::Conv2dOptions reduction_conv(int64_t in, int64_t out, SupportReduction r) {
  switch (r) {
    case SupportReduction::keep: return nn::Conv2dOptions(in, out, 3).stride(1).padding(1);
    case SupportReduction::halve: return nn::Conv2dOptions(in, out, 3).stride(2).padding(1);
    case SupportReduction::global: return nn::Conv2dOptions(in, out, 1);
  }
  throw ConfigError("unknown support reduction");
}

nn::Sequential make_mlp(int64_t channels) {
  return nn::Sequential(nn::Linear(channels, channels), nn::ReLU(), nn::Linear(channels, channels));
}

}  // namespace

Grid reduced_grid(Grid in, SupportReduction r) {
  switch (r) {
    case SupportReduction::keep: return in;
    case SupportReduction::halve: return {(in.h - 1) / 2 + 1, (in.w - 1) / 2 + 1};
    case SupportReduction::global: return {1, 1};
  }
  throw ConfigError("unknown support reduction");
}

torch::Tensor drop_elements(const torch::Tensor& x, double rate, bool training, std::optional<at::Generator> rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("drop rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  auto keep = torch::bernoulli(torch::full_like(x, 1.0 - rate), rng);
  return x * keep;
}

torch::Tensor downsample_mask(const torch::Tensor& mask, Grid target) {
  if (mask.dim() != 2 && mask.dim() != 3) throw ShapeError("mask must be [H,W] or [B,H,W]");
  const int64_t h = mask.size(-2);
  const int64_t w = mask.size(-1);
  if (target.h <= 0 || target.w <= 0 || target.h > h || target.w > w) {
    throw ShapeError("cannot downsample a " + std::to_string(h) + "x" + std::to_string(w) + " mask to " +
                     to_string(target));
  }
  auto m = mask.dim() == 2 ? mask.unsqueeze(0) : mask;
  auto pooled = F::adaptive_avg_pool2d(m.unsqueeze(1).to(torch::kFloat64),
                                       F::AdaptiveAvgPool2dFuncOptions({target.h, target.w}));
  auto out = (pooled.squeeze(1) > 0).to(mask.dtype());
  return mask.dim() == 2 ? out.squeeze(0) : out;
}

TargetTransformerLayerImpl::TargetTransformerLayerImpl(const TTLOptions& options) : options_(options) {
  if (options.in_channels <= 0 || options.hidden_channels <= 0 || options.out_channels <= 0) {
    throw ConfigError("transformer layer channel counts must be positive");
  }
  if (!(options.drop_rate >= 0.0 && options.drop_rate < 1.0)) throw ConfigError("drop rate must lie in [0, 1)");
  const auto in = options.in_channels;
  conv_q = register_module("conv_q", nn::Conv2d(reduction_conv(in, options.hidden_channels, options.reduction)));
  conv_k = register_module("conv_k", nn::Conv2d(nn::Conv2dOptions(in, options.hidden_channels, 3).padding(1)));
  conv_v = register_module("conv_v", nn::Conv2d(nn::Conv2dOptions(in, options.out_channels, 3).padding(1)));
  conv_sc = register_module("conv_sc", nn::Conv2d(reduction_conv(in, options.out_channels, options.reduction)));
  mlp1 = register_module("mlp1", make_mlp(options.out_channels));
  mlp2 = register_module("mlp2", make_mlp(options.out_channels));
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({options.out_channels})));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({options.out_channels})));
}

int64_t TargetTransformerLayerImpl::parameter_count(const TTLOptions& o) {
  const int64_t k = qk_kernel(o.reduction);
  const int64_t d = o.out_channels;
  return conv_params(o.in_channels, o.hidden_channels, k) + conv_params(o.in_channels, o.hidden_channels, 3) +
         conv_params(o.in_channels, d, 3) + conv_params(o.in_channels, d, k) + 2 * 2 * (d * d + d) + 2 * 2 * d;
}

torch::Tensor masked_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                               const torch::Tensor& mask) {
  auto weights = torch::softmax(torch::bmm(q, k.transpose(1, 2)), -1);
  return torch::bmm(weights, v * mask);
}

TTLProjections TargetTransformerLayerImpl::project(const torch::Tensor& rows) {
  auto qk_input = options_.reduction == SupportReduction::global ? rows.mean({2, 3}, true) : rows;
  return {conv_q(qk_input).flatten(2).transpose(1, 2), conv_k(rows).flatten(2).transpose(1, 2),
          conv_v(rows).flatten(2).transpose(1, 2), conv_sc(qk_input).flatten(2).transpose(1, 2)};
}

torch::Tensor TargetTransformerLayerImpl::residual(const torch::Tensor& attended, const torch::Tensor& shortcut) {
  auto mixed = norm1(mlp1->forward(attended) + attended + shortcut);
  return norm2(mlp2->forward(mixed) + mixed);
}

TTLOutput TargetTransformerLayerImpl::attend_rows(const torch::Tensor& rows, const torch::Tensor& row_mask,
                                                  Grid support) {
  auto p = project(rows);
  auto attended = masked_attention(p.query, p.key, p.value, row_mask);
  return {residual(attended, p.shortcut), attended, reduced_grid(support, options_.reduction)};
}

TTLOutput TargetTransformerLayerImpl::forward(const torch::Tensor& x, Grid support, const torch::Tensor& mask,
                                              Branch branch, std::optional<at::Generator> rng) {
  if (x.dim() != 4) throw ShapeError("transformer layer input must be [B, N_q, S, D]");
  const int64_t batch = x.size(0);
  const int64_t nq = x.size(1);
  if (x.size(2) != support.size()) {
    throw ShapeError("support axis of size " + std::to_string(x.size(2)) + " does not match grid " +
                     to_string(support));
  }
  if (x.size(3) != options_.in_channels) {
    throw ShapeError("transformer layer expects " + std::to_string(options_.in_channels) + " channels, got " +
                     std::to_string(x.size(3)));
  }
  if (mask.dim() != 3 || mask.size(0) != batch) throw ShapeError("mask must be [B,H,W] matching the input batch");

  const bool drop = branch == Branch::self && is_training();
  auto input = drop_elements(x, options_.drop_rate, drop, rng);

  auto m = downsample_mask(mask, support).to(x.dtype()).flatten(1);  // [B, S]
  auto row_mask = m.unsqueeze(1).expand({batch, nq, support.size()}).reshape({batch * nq, support.size(), 1});
  auto rows = input.reshape({batch * nq, support.h, support.w, options_.in_channels}).permute({0, 3, 1, 2});

  const Grid out_grid = reduced_grid(support, options_.reduction);
  TTLOutput result;
  const int64_t per_row = std::max<int64_t>(1, out_grid.size() * support.size());
  const int64_t chunk = std::max<int64_t>(1, kInferenceChunkElements / per_row);
  if (torch::GradMode::is_enabled() || rows.size(0) <= chunk) {
    result = attend_rows(rows, row_mask, support);
  } else {
    std::vector<torch::Tensor> outs, atts;
    for (int64_t start = 0; start < rows.size(0); start += chunk) {
      const int64_t len = std::min(chunk, rows.size(0) - start);
      auto part = attend_rows(rows.narrow(0, start, len), row_mask.narrow(0, start, len), support);
      outs.push_back(part.out);
      atts.push_back(part.attended);
    }
    result = {torch::cat(outs), torch::cat(atts), out_grid};
  }
  result.out = result.out.reshape({batch, nq, out_grid.size(), options_.out_channels});
  result.attended = result.attended.reshape({batch, nq, out_grid.size(), options_.out_channels});
  return result;
}

std::pair<TTLOptions, TTLOptions> TargetTransformerModuleImpl::layer_options(const TTMOptions& o) {
  TTLOptions a{o.in_channels, o.channels, o.channels, SupportReduction::halve, o.drop_rate};
  TTLOptions b{o.channels, o.channels, o.channels,
               o.stage == TTMStage::first ? SupportReduction::keep : SupportReduction::global, o.drop_rate};
  return {a, b};
}

TargetTransformerModuleImpl::TargetTransformerModuleImpl(const TTMOptions& options) {
  auto [a, b] = layer_options(options);
  ttl_a = register_module("ttl_a", TargetTransformerLayer(a));
  ttl_b = register_module("ttl_b", TargetTransformerLayer(b));
}

int64_t TargetTransformerModuleImpl::parameter_count(const TTMOptions& options) {
  auto [a, b] = layer_options(options);
  return TargetTransformerLayerImpl::parameter_count(a) + TargetTransformerLayerImpl::parameter_count(b);
}

TTLOutput TargetTransformerModuleImpl::forward(const torch::Tensor& x, Grid support, const torch::Tensor& mask,
                                               Branch branch, std::optional<at::Generator> rng) {
  auto first = ttl_a(x, support, mask, branch, rng);
  return ttl_b(first.out, first.grid, mask, branch, rng);
}

}  // namespace tbtnet
