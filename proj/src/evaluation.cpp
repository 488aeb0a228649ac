#include "tbtnet/evaluation.hpp"

#include <cstdio>
#include <fstream>

#include "tbtnet/bitransformer.hpp"
#include "tbtnet/image_io.hpp"

namespace tbtnet {

namespace fs = std::filesystem;

double IoUCounts::iou() const {
  const int64_t uni = tp + fp + fn;
  return uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
}

IoUCounts& IoUCounts::operator+=(const IoUCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

void IoUAccumulator::update(const torch::Tensor& predicted, const torch::Tensor& truth, int class_id) {
  if (predicted.sizes() != truth.sizes()) {
    throw ShapeError("prediction and ground truth differ in shape");
  }
  auto p = predicted.ne(0);
  auto t = truth.ne(0);
  const int64_t both = (p & t).sum().item<int64_t>();
  const int64_t pred = p.sum().item<int64_t>();
  const int64_t real = t.sum().item<int64_t>();
  const int64_t total = p.numel();

  IoUCounts fg{both, pred - both, real - both};
  // Background is the complement; its false positives are foreground misses.
  IoUCounts bg{total - pred - real + both, fg.fn, fg.fp};
  classes_[class_id] += fg;
  foreground_ += fg;
  background_ += bg;
  ++episodes_;
}

void IoUAccumulator::merge(const IoUAccumulator& other) {
  for (const auto& [c, counts] : other.classes_) classes_[c] += counts;
  foreground_ += other.foreground_;
  background_ += other.background_;
  episodes_ += other.episodes_;
}

double IoUAccumulator::class_iou(int class_id) const {
  auto it = classes_.find(class_id);
  if (it == classes_.end()) throw ConfigError("class " + std::to_string(class_id) + " was never evaluated");
  return it->second.iou();
}

double IoUAccumulator::mean_iou() const {
  if (classes_.empty()) return 0.0;
  double sum = 0;
  for (const auto& [c, counts] : classes_) sum += counts.iou();
  return sum / static_cast<double>(classes_.size());
}

double IoUAccumulator::fb_iou() const { return (foreground_.iou() + background_.iou()) / 2.0; }

MetricsReport make_report(const IoUAccumulator& acc, int shots) {
  MetricsReport r;
  for (const auto& [c, counts] : acc.per_class()) r.class_iou[c] = counts.iou();
  r.mean_iou = acc.mean_iou();
  r.fb_iou = acc.fb_iou();
  r.foreground_iou = acc.foreground().iou();
  r.background_iou = acc.background().iou();
  r.episodes = acc.episodes();
  r.shots = shots;
  return r;
}

void write_report(const fs::path& path, const MetricsReport& r) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write report " + path.string());
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  out << "episodes=" << r.episodes << '\n';
  out << "shots=" << r.shots << '\n';
  out << "mean_iou=" << num(r.mean_iou) << '\n';
  out << "fb_iou=" << num(r.fb_iou) << '\n';
  out << "foreground_iou=" << num(r.foreground_iou) << '\n';
  out << "background_iou=" << num(r.background_iou) << '\n';
  for (const auto& [c, v] : r.class_iou) out << "class_iou." << c << '=' << num(v) << '\n';
  if (!out) throw LoadError("failed writing report " + path.string());
}

std::map<std::string, std::string> read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read report " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

torch::Tensor kshot_merge(const std::vector<torch::Tensor>& logits) {
  if (logits.empty()) throw ConfigError("kshot_merge needs at least one prediction");
  for (const auto& l : logits) {
    if (l.dim() != 3 || l.size(0) != 2) throw ShapeError("each prediction must be [2,H,W]");
    if (l.sizes() != logits.front().sizes()) throw ShapeError("K-shot predictions differ in shape");
  }
  if (logits.size() == 1) return binarize_logits(logits.front()).to(torch::kFloat32);
  auto mean = torch::zeros_like(logits.front()[1], torch::kFloat64);
  for (const auto& l : logits) mean += torch::softmax(l.to(torch::kFloat64), 0)[1];
  mean /= static_cast<double>(logits.size());
  return mean.ge(0.5).to(torch::kFloat32);
}

ModelPredictor::ModelPredictor(FewShotModel model) : model_(std::move(model)) { model_.eval(); }

std::vector<torch::Tensor> ModelPredictor::predict(const Episode& e) {
  torch::NoGradGuard guard;
  model_.eval();
  const auto k = static_cast<int64_t>(e.support_images.size());
  auto query = e.query_image.unsqueeze(0).expand({k, -1, -1, -1}).contiguous();
  auto supports = torch::stack(e.support_images);
  auto masks = torch::stack(e.support_masks);
  auto out = model_.forward(query, supports, masks);
  auto logits = model_.final_logits(out, e.query_mask.size(0), e.query_mask.size(1)).to(torch::kFloat32);
  std::vector<torch::Tensor> result;
  for (int64_t i = 0; i < k; ++i) result.push_back(logits[i]);
  return result;
}

std::vector<torch::Tensor> OraclePredictor::predict(const Episode& e) {
  auto fg = e.query_mask.to(torch::kFloat32);
  auto logits = torch::stack({1.0 - fg, fg}) * 10.0;
  return std::vector<torch::Tensor>(e.support_images.size(), logits);
}

std::vector<torch::Tensor> ConstantPredictor::predict(const Episode& e) {
  auto logits = torch::zeros({2, e.query_mask.size(0), e.query_mask.size(1)});
  logits[foreground_ ? 1 : 0].fill_(1.0);
  return std::vector<torch::Tensor>(e.support_images.size(), logits);
}

MetricsReport evaluate(Predictor& predictor, const EpisodeSampler& sampler,
                       const std::vector<EpisodeDescriptor>& entries, const EvalOptions& options,
                       std::vector<EpisodePrediction>* predictions) {
  if (options.shots < 1) throw ConfigError("shots must be at least 1");
  if (!options.mask_dir.empty()) fs::create_directories(options.mask_dir);
  IoUAccumulator acc;
  for (size_t i = 0; i < entries.size(); ++i) {
    auto d = entries[i];
    if (d.supports.size() < static_cast<size_t>(options.shots)) {
      throw ConfigError("manifest line " + std::to_string(d.line) + ": " + std::to_string(d.supports.size()) +
                        " supports listed, " + std::to_string(options.shots) + "-shot evaluation requested");
    }
    d.supports.resize(static_cast<size_t>(options.shots));
    auto episode = sampler.load(d);
    auto merged = kshot_merge(predictor.predict(episode));
    acc.update(merged, episode.query_mask, episode.class_id);
    if (!options.mask_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "episode_%05zu.png", i);
      write_mask_png(options.mask_dir / name, merged);
    }
    if (predictions) predictions->push_back({merged, episode.query_mask, episode.class_id});
  }
  return make_report(acc, options.shots);
}

}  // namespace tbtnet
