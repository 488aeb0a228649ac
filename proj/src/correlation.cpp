#include "tbtnet/correlation.hpp"

namespace tbtnet {

namespace F = torch::nn::functional;

torch::Tensor cosine_affinity(const torch::Tensor& query, const torch::Tensor& support) {
  if (query.dim() != support.dim() || (query.dim() != 3 && query.dim() != 4)) {
    throw ShapeError("cosine_affinity expects two [C,H,W] or two [B,C,H,W] feature maps");
  }
  const bool batched = query.dim() == 4;
  auto q = batched ? query : query.unsqueeze(0);
  auto s = batched ? support : support.unsqueeze(0);
  if (q.size(1) != s.size(1)) {
    throw ShapeError("channel mismatch in cosine_affinity: " + std::to_string(q.size(1)) + " vs " +
                     std::to_string(s.size(1)));
  }
  if (q.size(0) != s.size(0)) throw ShapeError("batch mismatch in cosine_affinity");

  q = q.flatten(2);  // [B, C, Nq]
  s = s.flatten(2);  // [B, C, Ns]
  auto dot = torch::bmm(q.transpose(1, 2), s);
  auto norms = torch::bmm(q.norm(2, 1, true).transpose(1, 2), s.norm(2, 1, true));
  auto affinity = torch::relu(dot / (norms + kAffinityEpsilon));
  return batched ? affinity : affinity.squeeze(0);
}

torch::Tensor self_affinity(const torch::Tensor& query) { return cosine_affinity(query, query); }

torch::Tensor stack_hypercorrelation(const std::vector<torch::Tensor>& affinities) {
  if (affinities.empty()) throw ShapeError("cannot stack an empty list of affinities");
  for (const auto& a : affinities) {
    if (a.sizes() != affinities.front().sizes()) throw ShapeError("ragged affinity shapes in stack");
  }
  return torch::stack(affinities, -1);
}

std::vector<torch::Tensor> unstack_hypercorrelation(const torch::Tensor& stacked) {
  return stacked.unbind(-1);
}

Hypercorrelation build_hypercorrelation(const std::vector<torch::Tensor>& query,
                                        const std::vector<torch::Tensor>& support, CorrelationKind kind,
                                        Grid support_grid) {
  if (query.size() != support.size() || query.empty()) {
    throw ShapeError("hypercorrelation needs the same nonzero number of query and support blocks");
  }
  std::vector<torch::Tensor> affinities;
  affinities.reserve(query.size());
  for (size_t d = 0; d < query.size(); ++d) {
    auto s = support[d];
    if (s.size(-2) != support_grid.h || s.size(-1) != support_grid.w) {
      s = F::interpolate(s, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{support_grid.h, support_grid.w})
                                .mode(torch::kBilinear)
                                .align_corners(true));
    }
    affinities.push_back(cosine_affinity(query[d], s));
  }
  Hypercorrelation h;
  h.values = stack_hypercorrelation(affinities);
  h.kind = kind;
  h.query_grid = {query.front().size(-2), query.front().size(-1)};
  h.support_grid = support_grid;
  return h;
}

}  // namespace tbtnet
