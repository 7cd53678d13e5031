#include <CLI11.hpp>

#include <iostream>
#include <string>

#include <json.hpp>

#include "sdet/error.hpp"
#include "sdet/pipeline.hpp"

namespace {

using sdet::pipeline::RunConfig;

int fail_json(const std::string& code, const std::string& message,
              const std::string& context) {
  nlohmann::json env = {{"code", code}, {"message", message}, {"context", context}};
  std::cerr << env.dump() << "\n";
  return 1;
}

void add_shared(CLI::App* cmd, RunConfig& cfg, std::string& config_path) {
  cmd->add_option("--config", config_path,
                  "flat key=value file; flags given here override it");
  cmd->add_option("--seed", cfg.seed, "RNG seed")->capture_default_str();
  cmd->add_option("--out", cfg.out, "output directory (gets run-config.txt)");
}

void add_detection(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--score-thresh", cfg.score_thresh, "detection score cut")
      ->capture_default_str();
  cmd->add_option("--nms-iou", cfg.nms_iou, "suppression overlap")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  std::string config_path;

  // Config file first, flags second: load before the options capture their
  // defaults so explicit flags override file values.
  try {
    for (int i = 1; i + 1 < argc; ++i)
      if (std::string(argv[i]) == "--config")
        sdet::pipeline::load_config_file(cfg, argv[i + 1]);
  } catch (const sdet::Error& e) {
    return fail_json(e.code(), e.message(), e.context());
  }

  CLI::App app{"side-scan-sonar wall detector pipeline"};
  app.require_subcommand(1);

  CLI::App* mk = app.add_subcommand("make-dataset", "synthesize or import, augment, split");
  add_shared(mk, cfg, config_path);
  mk->add_option("--images", cfg.images, "synthetic sample count")->capture_default_str();
  mk->add_option("--side", cfg.side, "square image size")->capture_default_str();
  mk->add_option("--sigma", cfg.sigma, "augmentation noise sigma")->capture_default_str();
  mk->add_option("--wall-ratio", cfg.wall_ratio, "share of images with a wall")
      ->capture_default_str();
  mk->add_option("--import", cfg.import_dir, "augment an existing dataset directory");
  mk->add_flag("--no-aug", cfg.no_aug, "store originals only");

  CLI::App* tr = app.add_subcommand("train", "train a detector");
  add_shared(tr, cfg, config_path);
  tr->add_option("--dataset", cfg.dataset, "dataset directory");
  tr->add_option("--preset", cfg.preset, "model size")
      ->check(CLI::IsMember({"nano", "l"}))
      ->capture_default_str();
  tr->add_flag("--vit", cfg.vit, "transformer block on the deepest map");
  tr->add_flag("--no-aug", cfg.no_aug, "train on original samples only");
  tr->add_flag("--kd", cfg.kd, "distill from stored teacher logits");
  tr->add_option("--teacher-logits", cfg.teacher_logits, "logit store directory");
  tr->add_option("--iters", cfg.iters, "SGD steps")->capture_default_str();
  tr->add_option("--lr", cfg.lr, "learning rate")->capture_default_str();
  tr->add_option("--batch", cfg.batch, "batch size")->capture_default_str();
  tr->add_option("--calib", cfg.calib, "statistics batch size")->capture_default_str();
  tr->add_option("--width", cfg.width, "custom width multiplier");
  tr->add_option("--depth", cfg.depth, "custom depth multiplier");

  CLI::App* dl = app.add_subcommand("dump-logits", "store teacher outputs per sample");
  add_shared(dl, cfg, config_path);
  dl->add_option("--checkpoint", cfg.checkpoint, "teacher checkpoint");
  dl->add_option("--dataset", cfg.dataset, "dataset directory");

  CLI::App* ev = app.add_subcommand("eval", "detection metrics on a dataset split");
  add_shared(ev, cfg, config_path);
  ev->add_option("--checkpoint", cfg.checkpoint, "detector checkpoint");
  ev->add_option("--preds", cfg.preds, "saved prediction files instead of a checkpoint");
  ev->add_option("--dataset", cfg.dataset, "dataset directory");
  ev->add_option("--split", cfg.split, "train | val | test | all")->capture_default_str();
  ev->add_option("--iou", cfg.iou_thresh, "match threshold")->capture_default_str();
  add_detection(ev, cfg);

  CLI::App* evv = app.add_subcommand("eval-video", "frame-sequence metrics");
  add_shared(evv, cfg, config_path);
  evv->add_option("--checkpoint", cfg.checkpoint, "detector checkpoint");
  evv->add_option("--frames", cfg.frames, "frame dataset directory, manifest order");
  evv->add_option("--gt-timeline", cfg.gt_timeline, "0/1 per line: target in view");
  evv->add_option("--iou", cfg.iou_thresh, "match threshold")->capture_default_str();
  add_detection(evv, cfg);

  CLI::App* in = app.add_subcommand("infer", "detect on a single image");
  add_shared(in, cfg, config_path);
  in->add_option("--checkpoint", cfg.checkpoint, "detector checkpoint");
  in->add_option("--image", cfg.image, "input image (.pgm or .png)");
  in->add_flag("--annotate", cfg.annotate, "also write an overlay PNG");
  add_detection(in, cfg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints the right help text, exits 0
  } catch (const CLI::ParseError& e) {
    return fail_json("usage", e.what(), "");
  }

  std::string sub = app.get_subcommands().at(0)->get_name();
  if (!cfg.command.empty() && cfg.command != sub)
    return fail_json("config", "config file is for command '" + cfg.command + "'", sub);
  cfg.command = sub;

  try {
    sdet::pipeline::run(cfg);
  } catch (const sdet::Error& e) {
    return fail_json(e.code(), e.message(), e.context());
  } catch (const std::exception& e) {
    return fail_json("internal", e.what(), "");
  }
  return 0;
}
