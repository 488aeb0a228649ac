#pragma once

#include <torch/torch.h>

#include <vector>

#include "tbtnet/common.hpp"

namespace tbtnet {

/// Denominator guard of the cosine affinity; a zero feature vector gets affinity 0.
inline constexpr double kAffinityEpsilon = 1e-8;

enum class CorrelationKind { cross, self };

/// Stacked affinities of one pyramid layer: values are [N_q, N_s, D] or
/// [B, N_q, N_s, D], with positions flattened row-major over their grids.
struct Hypercorrelation {
  torch::Tensor values;
  CorrelationKind kind = CorrelationKind::cross;
  Grid query_grid;
  Grid support_grid;

  int64_t depth() const { return values.size(-1); }
};

/// ReLU(<q, s> / (|q| |s| + eps)) for every query/support position pair.
/// Accepts [C,H,W] (returns [N_q, N_s]) or [B,C,H,W] (returns [B, N_q, N_s]).
torch::Tensor cosine_affinity(const torch::Tensor& query, const torch::Tensor& support);

torch::Tensor self_affinity(const torch::Tensor& query);

/// Stacks D affinities of identical shape along a new trailing axis.
torch::Tensor stack_hypercorrelation(const std::vector<torch::Tensor>& affinities);

/// Inverse of stack_hypercorrelation.
std::vector<torch::Tensor> unstack_hypercorrelation(const torch::Tensor& stacked);

/// Affinities between matching blocks of two feature lists, stacked. `support`
/// maps are resized bilinearly to `support_grid` first when their grid differs.
Hypercorrelation build_hypercorrelation(const std::vector<torch::Tensor>& query,
                                        const std::vector<torch::Tensor>& support, CorrelationKind kind,
                                        Grid support_grid);

}  // namespace tbtnet
