#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <vector>

#include "tbtnet/episodes.hpp"
#include "tbtnet/model.hpp"

namespace tbtnet {

struct IoUCounts {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;

  /// TP / (TP + FP + FN); 1 when the union is empty.
  double iou() const;
  IoUCounts& operator+=(const IoUCounts& o);
};

/// Pixel counts pooled over episodes, per class and for foreground/background.
class IoUAccumulator {
 public:
  /// Binary [H,W] masks (any dtype, nonzero = foreground).
  void update(const torch::Tensor& predicted, const torch::Tensor& truth, int class_id);
  void merge(const IoUAccumulator& other);

  const std::map<int, IoUCounts>& per_class() const { return classes_; }
  const IoUCounts& foreground() const { return foreground_; }
  const IoUCounts& background() const { return background_; }
  int64_t episodes() const { return episodes_; }

  double class_iou(int class_id) const;
  /// Unweighted mean over the classes seen so far.
  double mean_iou() const;
  double fb_iou() const;

 private:
  std::map<int, IoUCounts> classes_;
  IoUCounts foreground_;
  IoUCounts background_;
  int64_t episodes_ = 0;
};

struct MetricsReport {
  std::map<int, double> class_iou;
  double mean_iou = 0;
  double fb_iou = 0;
  double foreground_iou = 0;
  double background_iou = 0;
  int64_t episodes = 0;
  int shots = 1;
};

MetricsReport make_report(const IoUAccumulator& acc, int shots);

/// key=value lines with full double precision.
void write_report(const std::filesystem::path& path, const MetricsReport& report);
std::map<std::string, std::string> read_report(const std::filesystem::path& path);

/// Averages the softmax foreground probability of K [2,H,W] logit maps;
/// a pixel is foreground when the mean is at least 0.5. K = 1 reduces to
/// binarize_logits. Returns [H,W] float 0/1.
torch::Tensor kshot_merge(const std::vector<torch::Tensor>& logits);

/// Produces one [2,H,W] logit map per support of an episode, at the query
/// mask resolution.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::vector<torch::Tensor> predict(const Episode& episode) = 0;
};

/// Runs the network with the K supports batched against copies of the query.
class ModelPredictor : public Predictor {
 public:
  explicit ModelPredictor(FewShotModel model);
  std::vector<torch::Tensor> predict(const Episode& episode) override;

 private:
  FewShotModel model_;
};

/// Returns the ground truth as confident logits.
class OraclePredictor : public Predictor {
 public:
  std::vector<torch::Tensor> predict(const Episode& episode) override;
};

/// Predicts the same label everywhere.
class ConstantPredictor : public Predictor {
 public:
  explicit ConstantPredictor(bool foreground) : foreground_(foreground) {}
  std::vector<torch::Tensor> predict(const Episode& episode) override;

 private:
  bool foreground_;
};

struct EvalOptions {
  int shots = 1;
  std::filesystem::path mask_dir;  // per-episode PNGs when non-empty
};

struct EpisodePrediction {
  torch::Tensor predicted;  // [H,W] 0/1
  torch::Tensor truth;      // [H,W] 0/1
  int class_id = 0;
};

/// Uses the first `shots` supports of every entry. Load failures name the
/// manifest line. `predictions`, when given, receives every merged mask.
MetricsReport evaluate(Predictor& predictor, const EpisodeSampler& sampler,
                       const std::vector<EpisodeDescriptor>& entries, const EvalOptions& options,
                       std::vector<EpisodePrediction>* predictions = nullptr);

}  // namespace tbtnet
