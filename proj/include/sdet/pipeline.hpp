#pragma once

#include <string>
#include <vector>

#include "sdet/metrics.hpp"

namespace sdet::pipeline {

// Every knob of every subcommand. Values resolve in three layers: struct
// defaults, then an optional flat key=value config file, then command-line
// overrides. Each run writes the fully resolved snapshot next to its outputs
// as run-config.txt, and that snapshot replays the run verbatim.
struct RunConfig {
  std::string command;  // make-dataset | train | dump-logits | eval | eval-video | infer

  // shared
  uint64_t seed = 0;
  std::string out;

  // make-dataset
  size_t images = 200;
  size_t side = 64;
  double sigma = 127.5;      // augmentation noise sigma (pixel units)
  double wall_ratio = 0.6;
  std::string import_dir;    // import existing samples instead of synthesizing
  bool no_aug = false;       // make-dataset: skip variants; train: originals only

  // model selection
  std::string preset = "nano";  // nano | l
  bool vit = false;
  double width = 0.0, depth = 0.0;  // both > 0: custom multipliers over the preset

  // train
  std::string dataset;
  size_t iters = 200;
  double lr = 0.01;
  size_t batch = 2;
  size_t calib = 8;
  bool kd = false;
  std::string teacher_logits;

  // dump-logits / eval / eval-video / infer
  std::string checkpoint;
  std::string split = "val";    // eval: train | val | test | all
  double iou_thresh = 0.5;
  double score_thresh = 0.3;
  double nms_iou = 0.45;
  std::string preds;            // eval from saved prediction files instead
  std::string frames;           // eval-video: frame dataset directory
  std::string gt_timeline;      // optional 0/1-per-line presence file
  std::string image;            // infer input
  bool annotate = false;        // infer: also write an overlay PNG
};

// Flat "key = value" rendering of every field; load merges a file of the
// same shape into cfg (later flags may still override). Unknown keys and a
// command mismatch are errors.
std::string render_config(const RunConfig& cfg);
void load_config_file(RunConfig& cfg, const std::string& path);

// Checks cross-field rules (e.g. kd requires teacher-logits) and creates
// cfg.out with the run-config.txt snapshot.
void prepare_run(const RunConfig& cfg);

void make_dataset(const RunConfig& cfg);
void train_cmd(const RunConfig& cfg);
void dump_logits_cmd(const RunConfig& cfg);
metrics::EvalReport eval_cmd(const RunConfig& cfg);
metrics::EvalReport eval_video_cmd(const RunConfig& cfg);
std::vector<DetBox> infer_cmd(const RunConfig& cfg);

// prepare_run + dispatch on cfg.command.
void run(const RunConfig& cfg);

}  // namespace sdet::pipeline
