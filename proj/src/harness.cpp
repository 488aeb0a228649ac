#include "tbtnet/harness.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <json.hpp>
#include <opencv2/core.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "tbtnet/image_io.hpp"

namespace tbtnet {

namespace fs = std::filesystem;

int RunConfig::effective_epochs() const {
  if (epochs > 0) return epochs;
  return dataset == DatasetKind::coco ? 20 : 50;
}

// ---------------------------------------------------------------------------
// Config fields

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size()) {
    throw ConfigError("invalid value '" + value + "' for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError("invalid boolean '" + value + "' for " + key);
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field number_field(T RunConfig::*member) {
  return {[member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          },
          [member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); }};
}

Field string_field(std::string RunConfig::*member) {
  return {[member](const RunConfig& c) { return c.*member; },
          [member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"backbone",
       {[](const RunConfig& c) { return to_string(c.backbone); },
        [](RunConfig& c, const std::string&, const std::string& v) { c.backbone = parse_backbone_variant(v); }}},
      {"weights", string_field(&RunConfig::weights)},
      {"toy_channels", number_field(&RunConfig::toy_channels)},
      {"dataset",
       {[](const RunConfig& c) { return to_string(c.dataset); },
        [](RunConfig& c, const std::string&, const std::string& v) { c.dataset = parse_dataset_kind(v); }}},
      {"fold", number_field(&RunConfig::fold)},
      {"shots", number_field(&RunConfig::shots)},
      {"batch_size", number_field(&RunConfig::batch_size)},
      {"learning_rate", number_field(&RunConfig::learning_rate)},
      {"epochs", number_field(&RunConfig::epochs)},
      {"steps_per_epoch", number_field(&RunConfig::steps_per_epoch)},
      {"alpha", number_field(&RunConfig::alpha)},
      {"drop_rate", number_field(&RunConfig::drop_rate)},
      {"bi_transformer",
       {[](const RunConfig& c) { return std::string(c.bi_transformer ? "true" : "false"); },
        [](RunConfig& c, const std::string& k, const std::string& v) { c.bi_transformer = parse_bool(k, v); }}},
      {"channels", number_field(&RunConfig::channels)},
      {"seed", number_field(&RunConfig::seed)},
      {"image_size", number_field(&RunConfig::image_size)},
      {"val_episodes", number_field(&RunConfig::val_episodes)},
      {"val_every", number_field(&RunConfig::val_every)},
      {"test_pairs", number_field(&RunConfig::test_pairs)},
      {"train_manifest", string_field(&RunConfig::train_manifest)},
      {"data_root", string_field(&RunConfig::data_root)},
      {"output_dir", string_field(&RunConfig::output_dir)},
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields()) {
    if (name == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void apply_lines(RunConfig& config, std::istream& in, const std::string& origin) {
  std::string line;
  size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(number) + ": expected key=value");
    try {
      set_config_value(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  field(key).set(config, key, value);
}

std::string get_config_value(const RunConfig& config, const std::string& key) { return field(key).get(config); }

void apply_config_file(RunConfig& config, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read config " + path.string());
  apply_lines(config, in, path.string());
}

std::string dump_config(const RunConfig& config) {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + "=" + f.get(config) + "\n";
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  apply_lines(c, in, "config");
  return c;
}

void validate_config(const RunConfig& c) {
  if (c.fold < 0 || c.fold > 3) throw ConfigError("fold must be in 0..3");
  if (c.shots < 1) throw ConfigError("shots must be at least 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(c.learning_rate > 0) || !std::isfinite(c.learning_rate)) throw ConfigError("learning_rate must be positive");
  if (c.epochs < 0) throw ConfigError("epochs must be non-negative (0 selects the dataset default)");
  if (c.steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be non-negative");
  if (!(c.alpha >= 0 && c.alpha <= 1.0 / 3.0)) throw ConfigError("alpha must lie in [0, 1/3]");
  if (!(c.drop_rate >= 0 && c.drop_rate < 1)) throw ConfigError("drop_rate must lie in [0, 1)");
  if (c.channels < 1) throw ConfigError("channels must be positive");
  if (c.toy_channels < 1) throw ConfigError("toy_channels must be positive");
  if (c.image_size < 8 || c.image_size % 8 != 0) throw ConfigError("image_size must be a positive multiple of 8");
  if (c.val_episodes < 0 || c.val_every < 0) throw ConfigError("validation settings must be non-negative");
  if (c.test_pairs < 1) throw ConfigError("test_pairs must be positive");
  if (c.backbone != BackboneVariant::toy && c.weights.empty()) {
    throw ConfigError("backbone " + to_string(c.backbone) + " needs a weights file (key 'weights')");
  }
}

FewShotModel build_model(const RunConfig& c) {
  ModelOptions o;
  o.backbone.variant = c.backbone;
  o.backbone.weights = c.weights;
  o.backbone.toy_channels = c.toy_channels;
  o.backbone.seed = c.seed;
  o.channels = c.channels;
  o.bi_transformer = c.bi_transformer;
  o.drop_rate = c.drop_rate;
  o.seed = c.seed;
  return make_model(o);
}

void check_model_compatible(const RunConfig& stored, const RunConfig& requested) {
  std::vector<std::string> problems;
  auto compare = [&](const std::string& key) {
    const auto a = get_config_value(stored, key);
    const auto b = get_config_value(requested, key);
    if (a != b) problems.push_back(key + " is " + a + " in the checkpoint but " + b + " was requested");
  };
  compare("backbone");
  compare("channels");
  compare("bi_transformer");
  if (stored.backbone == BackboneVariant::toy) {
    compare("toy_channels");
    compare("seed");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the requested model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

// ---------------------------------------------------------------------------
// Training

Trainer::Trainer(RunConfig config, FewShotModel model, std::shared_ptr<const EpisodeSampler> train_sampler,
                 std::shared_ptr<const EpisodeSampler> val_sampler)
    : config_(std::move(config)),
      model_(std::move(model)),
      train_sampler_(std::move(train_sampler)),
      val_sampler_(std::move(val_sampler)),
      episode_rng_(config_.seed),
      drop_rng_(at::make_generator<at::CPUGeneratorImpl>(config_.seed + 1)) {
  validate_config(config_);
  if (!train_sampler_) throw ConfigError("trainer needs a training sampler");
  if (!config_.train_manifest.empty()) {
    for (const auto& d : read_manifest(config_.train_manifest).entries) fixed_episodes_.push_back(train_sampler_->load(d));
    if (fixed_episodes_.empty()) throw ConfigError("training manifest " + config_.train_manifest + " is empty");
  }
  const auto pool = fixed_episodes_.empty() ? train_sampler_->index().records().size() : fixed_episodes_.size();
  steps_per_epoch_ = config_.steps_per_epoch > 0
                         ? config_.steps_per_epoch
                         : std::max(1, static_cast<int>((pool + static_cast<size_t>(config_.batch_size) - 1) /
                                                        static_cast<size_t>(config_.batch_size)));

  std::vector<torch::Tensor> params;
  for (const auto& p : model_.head()->parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  optimizer_ = std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(config_.learning_rate));
  if (val_sampler_ && config_.val_episodes > 0) {
    val_entries_ = test_pair_list(*val_sampler_, config_.seed + 1000003, config_.val_episodes);
  }
}

std::vector<Episode> Trainer::next_batch() {
  std::vector<Episode> batch;
  const auto b = static_cast<size_t>(config_.batch_size);
  for (size_t i = 0; i < b; ++i) {
    if (fixed_episodes_.empty()) {
      batch.push_back(train_sampler_->sample(episode_rng_));
    } else {
      batch.push_back(fixed_episodes_[(static_cast<size_t>(step_) * b + i) % fixed_episodes_.size()]);
    }
  }
  return batch;
}

StepResult Trainer::step() {
  model_.train();
  auto batch = next_batch();
  std::vector<torch::Tensor> q, s, sm, qm;
  for (const auto& e : batch) {
    q.push_back(e.query_image);
    s.push_back(e.support_images.front());
    sm.push_back(e.support_masks.front());
    qm.push_back(e.query_mask);
  }
  const auto dtype = model_.backbone().dtype();
  auto target = torch::stack(qm);
  optimizer_->zero_grad();
  auto out = model_.forward(torch::stack(q).to(dtype), torch::stack(s).to(dtype), torch::stack(sm).to(dtype),
                            drop_rng_);

  StepResult r;
  r.step = step_;
  r.epoch = epoch_;
  std::array<torch::Tensor, 4> levels;
  for (size_t i = 0; i < 4; ++i) {
    levels[i] = segmentation_cross_entropy(out.logits[i], target);
    r.level_losses[i] = levels[i].item<double>();
  }
  auto loss = (1.0 - 3.0 * config_.alpha) * levels[0] + config_.alpha * (levels[1] + levels[2] + levels[3]);
  r.loss = loss.item<double>();
  if (!std::isfinite(r.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step_ << " (epoch " << epoch_ << "): final=" << r.level_losses[0]
        << " layer2=" << r.level_losses[1] << " layer3=" << r.level_losses[2] << " layer4=" << r.level_losses[3]
        << " lr=" << config_.learning_rate << "; first query " << batch.front().descriptor.query;
    throw TrainingError(msg.str());
  }
  loss.backward();
  optimizer_->step();
  ++step_;
  if (on_step) on_step(r);
  return r;
}

void Trainer::log_line(const std::string& text) const {
  if (config_.output_dir.empty()) return;
  fs::create_directories(config_.output_dir);
  std::ofstream(fs::path(config_.output_dir) / "train.log", std::ios::app) << text << '\n';
}

double Trainer::validate() {
  if (!val_sampler_ || val_entries_.empty()) throw ConfigError("validation is not configured");
  ModelPredictor predictor(model_);
  EvalOptions o;
  o.shots = 1;
  auto report = evaluate(predictor, *val_sampler_, val_entries_, o);
  model_.train();
  return report.mean_iou;
}

EpochResult Trainer::run_epoch() {
  const auto start = std::chrono::steady_clock::now();
  const fs::path dir = config_.output_dir;
  std::ofstream metrics;
  if (!dir.empty()) {
    fs::create_directories(dir);
    metrics.open(dir / "metrics.jsonl", std::ios::app);
  }
  double sum = 0;
  for (int i = 0; i < steps_per_epoch_; ++i) {
    auto r = step();
    sum += r.loss;
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log_line("epoch " + std::to_string(epoch_) + " step " + std::to_string(r.step) + " loss " +
             format_double(r.loss) + " elapsed " + format_double(t) + "s");
    if (metrics) {
      metrics << nlohmann::json{{"kind", "step"}, {"epoch", epoch_}, {"step", r.step}, {"loss", r.loss},
                                {"levels", r.level_losses}, {"seconds", t}}
                     .dump()
              << '\n';
    }
  }
  EpochResult e;
  e.epoch = epoch_;
  e.mean_loss = sum / steps_per_epoch_;
  ++epoch_;
  if (val_sampler_ && !val_entries_.empty() && config_.val_every > 0 && epoch_ % config_.val_every == 0) {
    e.val_miou = validate();
  }
  e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!dir.empty()) {
    const bool best = e.val_miou && *e.val_miou > best_val_;
    if (best) best_val_ = *e.val_miou;
    save_checkpoint(dir / "last.pt");
    if (best) fs::copy_file(dir / "last.pt", dir / "best.pt", fs::copy_options::overwrite_existing);
    std::string line = "epoch " + std::to_string(e.epoch) + " mean_loss " + format_double(e.mean_loss) + " time " +
                       format_double(e.seconds) + "s";
    if (e.val_miou) line += " val_miou " + format_double(*e.val_miou);
    log_line(line);
    nlohmann::json j{{"kind", "epoch"}, {"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"seconds", e.seconds}};
    if (e.val_miou) j["val_miou"] = *e.val_miou;
    if (metrics) metrics << j.dump() << '\n';
  }
  if (on_epoch) on_epoch(e);
  return e;
}

void Trainer::train() {
  while (epoch_ < config_.effective_epochs()) run_epoch();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string read_string(torch::serialize::InputArchive& in, const std::string& key) {
  c10::IValue v;
  in.read(key, v);
  return v.toStringRef();
}

torch::Tensor read_tensor(torch::serialize::InputArchive& in, const std::string& key) {
  torch::Tensor t;
  in.read(key, t);
  return t;
}

torch::serialize::InputArchive open_archive(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive in;
  try {
    in.load_from(path.string());
  } catch (const c10::Error& e) {
    throw LoadError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return in;
}

}  // namespace

void Trainer::save_checkpoint(const fs::path& path) const {
  torch::serialize::OutputArchive out;
  out.write("config", c10::IValue(dump_config(config_)));
  out.write("epoch", torch::tensor(static_cast<int64_t>(epoch_)));
  out.write("step", torch::tensor(step_));
  out.write("best_val", torch::tensor(best_val_, torch::kFloat64));
  torch::serialize::OutputArchive head;
  model_.head()->save(head);
  out.write("head", head);
  torch::serialize::OutputArchive opt;
  optimizer_->save(opt);
  out.write("optimizer", opt);
  std::ostringstream rng;
  rng << episode_rng_;
  out.write("episode_rng", c10::IValue(rng.str()));
  out.write("drop_rng", drop_rng_.get_state());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  out.save_to(tmp.string());
  fs::rename(tmp, path);
}

void Trainer::load_checkpoint(const fs::path& path) {
  auto in = open_archive(path);
  try {
    auto stored = parse_config(read_string(in, "config"));
    check_model_compatible(stored, config_);
    epoch_ = static_cast<int>(read_tensor(in, "epoch").item<int64_t>());
    step_ = read_tensor(in, "step").item<int64_t>();
    best_val_ = read_tensor(in, "best_val").item<double>();
    torch::serialize::InputArchive head;
    in.read("head", head);
    model_.head()->load(head);
    torch::serialize::InputArchive opt;
    in.read("optimizer", opt);
    optimizer_->load(opt);
    std::istringstream rng(read_string(in, "episode_rng"));
    rng >> episode_rng_;
    drop_rng_.set_state(read_tensor(in, "drop_rng"));
  } catch (const c10::Error& e) {
    throw LoadError("corrupt checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

LoadedCheckpoint read_checkpoint_header(const fs::path& path) {
  auto in = open_archive(path);
  LoadedCheckpoint h;
  try {
    h.config = parse_config(read_string(in, "config"));
    h.epoch = static_cast<int>(read_tensor(in, "epoch").item<int64_t>());
    h.step = read_tensor(in, "step").item<int64_t>();
  } catch (const c10::Error& e) {
    throw LoadError("corrupt checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return h;
}

FewShotModel load_model_for_eval(const fs::path& checkpoint, const RunConfig& requested) {
  auto in = open_archive(checkpoint);
  RunConfig stored;
  try {
    stored = parse_config(read_string(in, "config"));
  } catch (const c10::Error& e) {
    throw LoadError("corrupt checkpoint " + checkpoint.string() + ": " + e.what_without_backtrace());
  }
  check_model_compatible(stored, requested);
  auto model = build_model(requested);
  try {
    torch::serialize::InputArchive head;
    in.read("head", head);
    model.head()->load(head);
  } catch (const c10::Error& e) {
    throw LoadError("corrupt checkpoint " + checkpoint.string() + ": " + e.what_without_backtrace());
  }
  model.eval();
  return model;
}

std::shared_ptr<const EpisodeSampler> make_sampler(const RunConfig& c, Partition partition, int shots) {
  if (c.data_root.empty()) throw ConfigError("data_root is not set");
  auto index = std::make_shared<const DatasetIndex>(DatasetIndex::open(c.dataset, c.data_root, partition));
  SamplerOptions o;
  o.shots = shots;
  o.image_size = c.image_size;
  return std::make_shared<const EpisodeSampler>(index, build_fold_split(c.dataset, c.fold), partition, o);
}

// ---------------------------------------------------------------------------
// Prediction

Manifest make_test_manifest(const RunConfig& config) {
  auto sampler = make_sampler(config, Partition::test, config.shots);
  Manifest m;
  m.meta = {{"dataset", to_string(config.dataset)},
            {"fold", std::to_string(config.fold)},
            {"shots", std::to_string(config.shots)},
            {"seed", std::to_string(config.seed)},
            {"image_size", std::to_string(config.image_size)}};
  m.entries = test_pair_list(*sampler, config.seed, config.test_pairs);
  return m;
}

MetricsReport evaluate_checkpoint(const RunConfig& config, const fs::path& checkpoint, const fs::path& manifest,
                                  const fs::path& mask_dir) {
  validate_config(config);
  ModelPredictor predictor(load_model_for_eval(checkpoint, config));
  const auto entries = read_manifest(manifest).entries;
  auto sampler = make_sampler(config, Partition::test, 1);
  EvalOptions o;
  o.shots = config.shots;
  o.mask_dir = mask_dir;
  return evaluate(predictor, *sampler, entries, o);
}

PredictResult predict_files(FewShotModel& model, const fs::path& query, const std::vector<fs::path>& supports,
                            const std::vector<fs::path>& support_masks, int64_t image_size) {
  if (supports.empty()) throw ConfigError("at least one support image is required");
  if (supports.size() != support_masks.size()) throw ConfigError("every support image needs a mask");
  std::vector<cv::Mat> images, masks;
  for (size_t i = 0; i < supports.size(); ++i) {
    images.push_back(read_rgb(supports[i]));
    masks.push_back(read_label_map(support_masks[i]) != 0);
  }
  return predict_images(model, read_rgb(query), images, masks, image_size);
}

PredictResult predict_images(FewShotModel& model, const cv::Mat& q, const std::vector<cv::Mat>& supports,
                             const std::vector<cv::Mat>& support_masks, int64_t image_size) {
  if (supports.empty()) throw ConfigError("at least one support image is required");
  if (supports.size() != support_masks.size()) throw ConfigError("every support image needs a mask");
  std::vector<torch::Tensor> s_img, s_mask;
  for (size_t i = 0; i < supports.size(); ++i) {
    s_img.push_back(image_to_tensor(supports[i], image_size));
    cv::Mat fg = support_masks[i] != 0;
    s_mask.push_back(label_to_mask(fg, 255, image_size));
  }
  torch::NoGradGuard guard;
  model.eval();
  const auto k = static_cast<int64_t>(supports.size());
  const auto dtype = model.backbone().dtype();
  auto qt = image_to_tensor(q, image_size).unsqueeze(0).expand({k, -1, -1, -1}).contiguous().to(dtype);
  auto out = model.forward(qt, torch::stack(s_img).to(dtype), torch::stack(s_mask).to(dtype));

  auto merge = [&](const torch::Tensor& logits) {
    auto up = torch::nn::functional::interpolate(
        logits, torch::nn::functional::InterpolateFuncOptions()
                    .size(std::vector<int64_t>{q.rows, q.cols})
                    .mode(torch::kBilinear)
                    .align_corners(true));
    std::vector<torch::Tensor> maps;
    for (int64_t i = 0; i < k; ++i) maps.push_back(up[i].to(torch::kFloat32));
    return kshot_merge(maps);
  };
  PredictResult r;
  r.mask = merge(out.logits[0]);
  for (int l = 4; l >= 2; --l) r.intermediates[static_cast<size_t>(4 - l)] = merge(out.logits[static_cast<size_t>(l - 1)]);
  return r;
}

}  // namespace tbtnet
