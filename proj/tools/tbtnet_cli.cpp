// Command-line front end: train, manifest, eval, predict, params, synthetic.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "tbtnet/harness.hpp"
#include "tbtnet/image_io.hpp"

using namespace tbtnet;
namespace fs = std::filesystem;

namespace {

constexpr const char* kDataRootEnv = "TBTNET_DATA_ROOT";

struct ConfigOptions {
  std::string file;
  std::vector<std::string> overrides;
  std::map<std::string, std::string> flags;
};

void add_config_options(CLI::App* cmd, ConfigOptions& o) {
  cmd->add_option("--config", o.file, "key=value config file");
  cmd->add_option("--set", o.overrides, "extra key=value override (repeatable)");
  for (const auto& key : config_keys()) {
    std::string dashed = key;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    std::string names = "--" + key;
    if (dashed != key) names += ",--" + dashed;
    cmd->add_option(names, o.flags[key], "config: " + key);
  }
}

// defaults < config file < environment < command line
RunConfig resolve_config(const ConfigOptions& o, CLI::App* cmd) {
  RunConfig c;
  if (!o.file.empty()) apply_config_file(c, o.file);
  if (const char* root = std::getenv(kDataRootEnv); root && *root) c.data_root = root;
  for (const auto& key : config_keys()) {
    if (cmd->count("--" + key) > 0) set_config_value(c, key, o.flags.at(key));
  }
  for (const auto& kv : o.overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return c;
}

void print_config(const RunConfig& c) {
  std::cout << "# configuration\n" << dump_config(c) << "# effective_epochs=" << c.effective_epochs() << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
}

int run_train(const RunConfig& c, const std::string& resume) {
  validate_config(c);
  print_config(c);
  write_text(fs::path(c.output_dir) / "config.txt", dump_config(c));
  Trainer trainer(c, build_model(c), make_sampler(c, Partition::train, 1),
                  c.val_episodes > 0 ? make_sampler(c, Partition::test, 1) : nullptr);
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    std::cout << "resumed from " << resume << " at epoch " << trainer.epoch() << ", step " << trainer.global_step()
              << "\n";
  }
  std::cout << "learnable parameters: " << count_learnable_params(trainer.model()) << "\n"
            << "steps per epoch: " << trainer.steps_per_epoch() << "\n";
  trainer.on_epoch = [](const EpochResult& e) {
    std::cout << "epoch " << e.epoch << " mean_loss " << e.mean_loss << " time " << e.seconds << "s";
    if (e.val_miou) std::cout << " val_miou " << *e.val_miou;
    std::cout << std::endl;
  };
  trainer.train();
  return 0;
}

int run_manifest(const RunConfig& c, const std::string& out) {
  auto m = make_test_manifest(c);
  write_manifest(out, m);
  std::cout << "wrote " << m.entries.size() << " episodes to " << out << "\n";
  return 0;
}

int run_eval(const RunConfig& c, const std::string& checkpoint, const std::string& manifest_path,
             const std::string& report_path, const std::string& mask_dir) {
  validate_config(c);
  print_config(c);
  auto report = evaluate_checkpoint(c, checkpoint, manifest_path, mask_dir);
  const fs::path out = report_path.empty() ? fs::path(c.output_dir) / ("report_" + std::to_string(c.shots) + "shot.txt")
                                           : fs::path(report_path);
  write_report(out, report);
  std::cout << "episodes " << report.episodes << " shots " << report.shots << " mean_iou " << report.mean_iou
            << " fb_iou " << report.fb_iou << "\nreport written to " << out << "\n";
  return 0;
}

int run_predict(const RunConfig& c, const std::string& checkpoint, const std::string& query,
                const std::vector<std::string>& supports, const std::vector<std::string>& masks,
                const std::string& out_dir, bool intermediates) {
  validate_config(c);
  auto model = load_model_for_eval(checkpoint, c);
  std::vector<fs::path> s(supports.begin(), supports.end()), m(masks.begin(), masks.end());
  auto r = predict_files(model, query, s, m, c.image_size);
  fs::create_directories(out_dir);
  write_mask_png(fs::path(out_dir) / "mask.png", r.mask);
  std::cout << fs::path(out_dir) / "mask.png" << "\n";
  if (intermediates) {
    for (int l = 4; l >= 2; --l) {
      const auto path = fs::path(out_dir) / ("mask_layer" + std::to_string(l) + ".png");
      write_mask_png(path, r.intermediates[static_cast<size_t>(4 - l)]);
      std::cout << path << "\n";
    }
  }
  return 0;
}

int run_params(const RunConfig& c) {
  BackboneSpec spec;
  spec.variant = c.backbone;
  spec.toy_channels = c.toy_channels;
  spec.seed = c.seed;
  auto backbone = c.backbone == BackboneVariant::toy ? load_backbone(spec) : make_random_backbone(spec, c.seed);
  ModelOptions o;
  o.channels = c.channels;
  o.bi_transformer = c.bi_transformer;
  o.drop_rate = c.drop_rate;
  FewShotModel model(backbone, o);
  const auto head = model.head()->config();
  std::cout << "backbone " << to_string(c.backbone) << " blocks " << head.blocks[0] << "/" << head.blocks[1] << "/"
            << head.blocks[2] << "\n"
            << "backbone_parameters " << model.backbone().parameter_count() << " (frozen)\n"
            << "learnable_parameters " << count_learnable_params(model) << "\n";
  return 0;
}

int run_synthetic(const std::string& out, const SyntheticOptions& o) {
  generate_synthetic_dataset(out, o);
  std::cout << "wrote " << o.classes * o.images_per_class << " images to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot semantic segmentation"};
  app.require_subcommand(1);

  ConfigOptions train_cfg, manifest_cfg, eval_cfg, predict_cfg, params_cfg;
  std::string resume, manifest_out, checkpoint, manifest_in, report, masks, query, out_dir;
  std::vector<std::string> supports, support_masks;
  bool intermediates = false;

  auto* train = app.add_subcommand("train", "episodic training");
  add_config_options(train, train_cfg);
  train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  auto* manifest = app.add_subcommand("manifest", "write the fixed test episode list");
  add_config_options(manifest, manifest_cfg);
  manifest->add_option("--out", manifest_out, "manifest path")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  add_config_options(eval, eval_cfg);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--manifest", manifest_in, "episode manifest")->required();
  eval->add_option("--report", report, "report path");
  eval->add_option("--masks", masks, "directory for predicted masks");

  auto* predict = app.add_subcommand("predict", "segment one query image");
  add_config_options(predict, predict_cfg);
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  predict->add_option("--query", query, "query image")->required();
  predict->add_option("--support", supports, "support image (repeatable)")->required();
  predict->add_option("--support-mask", support_masks, "support mask (repeatable)")->required();
  predict->add_option("--out", out_dir, "output directory")->required();
  predict->add_flag("--intermediates", intermediates, "also write the layer 4/3/2 masks");

  auto* params = app.add_subcommand("params", "count learnable parameters");
  add_config_options(params, params_cfg);

  SyntheticOptions synth;
  std::string synth_out;
  auto* synthetic = app.add_subcommand("synthetic", "write a small VOC-layout dataset of shapes on noise");
  synthetic->add_option("--out", synth_out, "dataset root")->required();
  synthetic->add_option("--classes", synth.classes, "number of classes")->capture_default_str();
  synthetic->add_option("--images-per-class", synth.images_per_class, "images per class")->capture_default_str();
  synthetic->add_option("--size", synth.image_size, "image side length")->capture_default_str();
  synthetic->add_option("--seed", synth.seed, "generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) return run_train(resolve_config(train_cfg, train), resume);
    if (*manifest) return run_manifest(resolve_config(manifest_cfg, manifest), manifest_out);
    if (*eval) return run_eval(resolve_config(eval_cfg, eval), checkpoint, manifest_in, report, masks);
    if (*predict) {
      return run_predict(resolve_config(predict_cfg, predict), checkpoint, query, supports, support_masks, out_dir,
                         intermediates);
    }
    if (*params) return run_params(resolve_config(params_cfg, params));
    if (*synthetic) return run_synthetic(synth_out, synth);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
