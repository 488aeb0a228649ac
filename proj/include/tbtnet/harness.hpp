#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tbtnet/backbone.hpp"
#include "tbtnet/episodes.hpp"
#include "tbtnet/evaluation.hpp"
#include "tbtnet/model.hpp"

namespace tbtnet {

struct RunConfig {
  BackboneVariant backbone = BackboneVariant::resnet101;
  std::string weights;
  int64_t toy_channels = 8;
  DatasetKind dataset = DatasetKind::pascal;
  int fold = 0;
  int shots = 1;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int epochs = 0;           // 0 selects the dataset default
  int steps_per_epoch = 0;  // 0 selects ceil(train images / batch size)
  double alpha = kDefaultLossAlpha;
  double drop_rate = 0.05;
  bool bi_transformer = true;
  int64_t channels = 20;
  uint64_t seed = 0;
  int64_t image_size = 400;
  int val_episodes = 100;
  int val_every = 1;  // epochs between validations, 0 disables
  int test_pairs = 1000;
  std::string train_manifest;  // fixed training episodes instead of random sampling
  std::string data_root;
  std::string output_dir = "runs/default";

  /// 50 for pascal and synthetic, 20 for coco, unless set explicitly.
  int effective_epochs() const;
};

/// Field names accepted by set_config_value, in a stable order.
const std::vector<std::string>& config_keys();
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

/// key=value lines; '#' starts a comment. Unknown keys are errors.
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
/// Every field as key=value, one per line, in config_keys() order.
std::string dump_config(const RunConfig& config);
RunConfig parse_config(const std::string& text);
/// Throws ConfigError describing the first invalid field.
void validate_config(const RunConfig& config);

/// Model described by the config; resnet variants read `weights`.
FewShotModel build_model(const RunConfig& config);

/// Refuses (ConfigError) when two configs describe incompatible networks:
/// backbone variant, toy width, MixToken width or the bi-transformer switch.
void check_model_compatible(const RunConfig& checkpoint, const RunConfig& requested);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepResult {
  int64_t step = 0;
  int epoch = 0;
  double loss = 0;
  std::array<double, 4> level_losses{};  // final, layers 2, 3, 4
};

struct EpochResult {
  int epoch = 0;
  double mean_loss = 0;
  double seconds = 0;
  std::optional<double> val_miou;
};

/// Episodic Adam training of the head. The backbone stays frozen.
class Trainer {
 public:
  /// `val_sampler` may be null to disable validation.
  Trainer(RunConfig config, FewShotModel model, std::shared_ptr<const EpisodeSampler> train_sampler,
          std::shared_ptr<const EpisodeSampler> val_sampler = nullptr);

  /// One optimizer step on a batch of episodes.
  StepResult step();
  /// Runs `steps_per_epoch` steps and the end-of-epoch bookkeeping
  /// (checkpoint, validation, logs).
  EpochResult run_epoch();
  /// Runs the remaining epochs up to effective_epochs().
  void train();

  double validate();

  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer state, counters and RNG streams.
  void load_checkpoint(const std::filesystem::path& path);

  const RunConfig& config() const { return config_; }
  FewShotModel& model() { return model_; }
  int64_t global_step() const { return step_; }
  int epoch() const { return epoch_; }
  int steps_per_epoch() const { return steps_per_epoch_; }
  const std::vector<EpisodeDescriptor>& validation_manifest() const { return val_entries_; }

  /// Called after every step and epoch; defaults print nothing.
  std::function<void(const StepResult&)> on_step;
  std::function<void(const EpochResult&)> on_epoch;

 private:
  std::vector<Episode> next_batch();
  void log_line(const std::string& text) const;

  RunConfig config_;
  FewShotModel model_;
  std::shared_ptr<const EpisodeSampler> train_sampler_;
  std::shared_ptr<const EpisodeSampler> val_sampler_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  std::mt19937_64 episode_rng_;
  at::Generator drop_rng_;
  std::vector<Episode> fixed_episodes_;
  std::vector<EpisodeDescriptor> val_entries_;
  int64_t step_ = 0;
  int epoch_ = 0;
  int steps_per_epoch_ = 1;
  double best_val_ = -1;
};

struct LoadedCheckpoint {
  RunConfig config;
  int epoch = 0;
  int64_t step = 0;
};

/// Reads the config snapshot and counters without building a trainer.
LoadedCheckpoint read_checkpoint_header(const std::filesystem::path& path);
/// Model with the checkpoint's head parameters; `requested` is checked for
/// compatibility and supplies the weights path.
FewShotModel load_model_for_eval(const std::filesystem::path& checkpoint, const RunConfig& requested);

/// Dataset index plus sampler for one partition of the configured fold.
std::shared_ptr<const EpisodeSampler> make_sampler(const RunConfig& config, Partition partition, int shots);

/// Fixed test episodes of the configured fold, shot count and seed, with the
/// settings recorded in the header.
Manifest make_test_manifest(const RunConfig& config);

/// Loads a checkpoint and scores it on a manifest with `config.shots` supports.
/// Predicted masks go to `mask_dir` unless it is empty.
MetricsReport evaluate_checkpoint(const RunConfig& config, const std::filesystem::path& checkpoint,
                                  const std::filesystem::path& manifest, const std::filesystem::path& mask_dir = {});

struct PredictResult {
  torch::Tensor mask;                        // [H,W] at the query's native size
  std::array<torch::Tensor, 3> intermediates;  // layers 4, 3, 2 at the same size
};

/// Single episode from image files. Support masks are read as label maps,
/// nonzero meaning foreground.
PredictResult predict_files(FewShotModel& model, const std::filesystem::path& query,
                            const std::vector<std::filesystem::path>& supports,
                            const std::vector<std::filesystem::path>& support_masks, int64_t image_size);

/// Same on decoded images: RGB CV_8UC3 images and CV_8UC1 masks (nonzero is
/// foreground), each at its own size.
PredictResult predict_images(FewShotModel& model, const cv::Mat& query, const std::vector<cv::Mat>& supports,
                             const std::vector<cv::Mat>& support_masks, int64_t image_size);

}  // namespace tbtnet
