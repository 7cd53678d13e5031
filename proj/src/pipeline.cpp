#include "sdet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "sdet/dataset.hpp"
#include "sdet/decode.hpp"
#include "sdet/distill.hpp"
#include "sdet/error.hpp"
#include "sdet/image.hpp"
#include "sdet/model.hpp"
#include "sdet/serialize.hpp"

namespace sdet::pipeline {

namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct KvWriter {
  std::ostringstream os;
  void add(const std::string& k, const std::string& v) { os << k << " = " << v << "\n"; }
  void add(const std::string& k, uint64_t v) { add(k, std::to_string(v)); }
  void add(const std::string& k, double v) { add(k, fmt_double(v)); }
  void add(const std::string& k, bool v) { add(k, std::string(v ? "true" : "false")); }
};

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail("config", "boolean expected for key '" + key + "'", v);
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos == v.size()) return r;
  } catch (const std::exception&) {
  }
  fail("config", "integer expected for key '" + key + "'", v);
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos == v.size()) return r;
  } catch (const std::exception&) {
  }
  fail("config", "number expected for key '" + key + "'", v);
}

void apply_kv(RunConfig& cfg, const std::string& key, const std::string& val) {
  if (key == "command") {
    if (!cfg.command.empty() && cfg.command != val)
      fail("config", "config file is for command '" + val + "'", cfg.command);
    cfg.command = val;
  } else if (key == "seed") {
    cfg.seed = parse_u64(val, key);
  } else if (key == "out") {
    cfg.out = val;
  } else if (key == "images") {
    cfg.images = parse_u64(val, key);
  } else if (key == "side") {
    cfg.side = parse_u64(val, key);
  } else if (key == "sigma") {
    cfg.sigma = parse_double(val, key);
  } else if (key == "wall-ratio") {
    cfg.wall_ratio = parse_double(val, key);
  } else if (key == "import") {
    cfg.import_dir = val;
  } else if (key == "no-aug") {
    cfg.no_aug = parse_bool(val, key);
  } else if (key == "preset") {
    cfg.preset = val;
  } else if (key == "vit") {
    cfg.vit = parse_bool(val, key);
  } else if (key == "width") {
    cfg.width = parse_double(val, key);
  } else if (key == "depth") {
    cfg.depth = parse_double(val, key);
  } else if (key == "dataset") {
    cfg.dataset = val;
  } else if (key == "iters") {
    cfg.iters = parse_u64(val, key);
  } else if (key == "lr") {
    cfg.lr = parse_double(val, key);
  } else if (key == "batch") {
    cfg.batch = parse_u64(val, key);
  } else if (key == "calib") {
    cfg.calib = parse_u64(val, key);
  } else if (key == "kd") {
    cfg.kd = parse_bool(val, key);
  } else if (key == "teacher-logits") {
    cfg.teacher_logits = val;
  } else if (key == "checkpoint") {
    cfg.checkpoint = val;
  } else if (key == "split") {
    cfg.split = val;
  } else if (key == "iou") {
    cfg.iou_thresh = parse_double(val, key);
  } else if (key == "score-thresh") {
    cfg.score_thresh = parse_double(val, key);
  } else if (key == "nms-iou") {
    cfg.nms_iou = parse_double(val, key);
  } else if (key == "preds") {
    cfg.preds = val;
  } else if (key == "frames") {
    cfg.frames = val;
  } else if (key == "gt-timeline") {
    cfg.gt_timeline = val;
  } else if (key == "image") {
    cfg.image = val;
  } else if (key == "annotate") {
    cfg.annotate = parse_bool(val, key);
  } else {
    fail("config", "unknown configuration key", key);
  }
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Model spec from the config: preset first, optional custom multipliers.
model::ModelSpec resolve_spec(const RunConfig& cfg, size_t input_size, size_t classes) {
  model::ModelSpec spec = model::spec_preset(cfg.preset);
  if (cfg.width > 0.0 || cfg.depth > 0.0) {
    if (!(cfg.width > 0.0) || !(cfg.depth > 0.0))
      fail("bad_argument", "custom models need both width and depth");
    spec.preset = "custom";
    spec.width = cfg.width;
    spec.depth = cfg.depth;
  }
  spec.use_vit = cfg.vit;
  spec.input_size = input_size;
  spec.num_classes = classes;
  return spec;
}

std::vector<data::Sample> load_split(const std::string& dir, const std::string& split,
                                     bool originals_only) {
  std::vector<data::Sample> all = data::load_dataset(dir);
  std::vector<data::Sample> kept;
  for (data::Sample& s : all) {
    if (split != "all" && s.split != split) continue;
    if (originals_only && s.provenance != "original") continue;
    kept.push_back(std::move(s));
  }
  if (kept.empty())
    fail("bad_argument", "no samples for split '" + split + "'", dir);
  size_t side = kept[0].image.width;
  for (const data::Sample& s : kept)
    if (s.image.width != side || s.image.height != side)
      fail("bad_argument", "dataset images disagree on size", s.id);
  return kept;
}

size_t dataset_classes(const std::vector<data::Sample>& samples) {
  size_t classes = 1;
  for (const data::Sample& s : samples)
    for (const GtBox& b : s.boxes) classes = std::max(classes, b.class_id + 1);
  return classes;
}

// NoGrad single-image detection through a calibrated checkpoint.
std::vector<DetBox> detect_one(model::Model& m, const img::Image8& im, double score_thresh,
                               double nms_iou) {
  NoGradGuard ng;
  model::FpnLogits logits = model::forward(m, img::to_tensor(im));
  auto batches = model::detect(logits, m.spec.num_classes, score_thresh, nms_iou);
  return batches.at(0);
}

void write_report_files(const std::string& dir, const std::string& name,
                        const metrics::EvalReport& r) {
  std::vector<std::pair<std::string, metrics::EvalReport>> rows = {{name, r}};
  io::write_text_file((fs::path(dir) / "report.csv").string(), metrics::format_csv(rows));
  io::write_text_file((fs::path(dir) / "report.txt").string(), metrics::format_text(rows));
  io::write_text_file((fs::path(dir) / "report.json").string(), metrics::format_json(rows));
}

std::vector<bool> load_timeline(const std::string& path, size_t frames) {
  std::istringstream is(io::read_text_file(path));
  std::vector<bool> present;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    if (line != "0" && line != "1")
      fail("format", "timeline expects 0 or 1 at line " + std::to_string(lineno), path);
    present.push_back(line == "1");
  }
  if (present.size() != frames)
    fail("bad_argument",
         "timeline covers " + std::to_string(present.size()) + " frames, dataset has " +
             std::to_string(frames),
         path);
  return present;
}

void draw_box(img::Image8& im, const DetBox& b) {
  long x1 = std::lround(b.cx - b.w / 2), x2 = std::lround(b.cx + b.w / 2);
  long y1 = std::lround(b.cy - b.h / 2), y2 = std::lround(b.cy + b.h / 2);
  auto put = [&](long x, long y) {
    if (x < 0 || y < 0 || size_t(x) >= im.width || size_t(y) >= im.height) return;
    im.at(size_t(y), size_t(x), 0) = 255;
    im.at(size_t(y), size_t(x), 1) = 32;
    im.at(size_t(y), size_t(x), 2) = 32;
  };
  for (long x = x1; x <= x2; ++x) {
    put(x, y1);
    put(x, y2);
  }
  for (long y = y1; y <= y2; ++y) {
    put(x1, y);
    put(x2, y);
  }
}

}  // namespace

std::string render_config(const RunConfig& cfg) {
  KvWriter w;
  w.add("command", cfg.command);
  w.add("seed", cfg.seed);
  w.add("out", cfg.out);
  w.add("images", uint64_t(cfg.images));
  w.add("side", uint64_t(cfg.side));
  w.add("sigma", cfg.sigma);
  w.add("wall-ratio", cfg.wall_ratio);
  w.add("import", cfg.import_dir);
  w.add("no-aug", cfg.no_aug);
  w.add("preset", cfg.preset);
  w.add("vit", cfg.vit);
  w.add("width", cfg.width);
  w.add("depth", cfg.depth);
  w.add("dataset", cfg.dataset);
  w.add("iters", uint64_t(cfg.iters));
  w.add("lr", cfg.lr);
  w.add("batch", uint64_t(cfg.batch));
  w.add("calib", uint64_t(cfg.calib));
  w.add("kd", cfg.kd);
  w.add("teacher-logits", cfg.teacher_logits);
  w.add("checkpoint", cfg.checkpoint);
  w.add("split", cfg.split);
  w.add("iou", cfg.iou_thresh);
  w.add("score-thresh", cfg.score_thresh);
  w.add("nms-iou", cfg.nms_iou);
  w.add("preds", cfg.preds);
  w.add("frames", cfg.frames);
  w.add("gt-timeline", cfg.gt_timeline);
  w.add("image", cfg.image);
  w.add("annotate", cfg.annotate);
  return w.os.str();
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::istringstream is(io::read_text_file(path));
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      fail("config", "expected 'key = value' at line " + std::to_string(lineno), path);
    apply_kv(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

void prepare_run(const RunConfig& cfg) {
  if (cfg.command.empty()) fail("bad_argument", "no command selected");
  if (cfg.out.empty()) fail("bad_argument", cfg.command + ": --out is required");
  if (cfg.kd && cfg.teacher_logits.empty())
    fail("bad_argument", "train: --kd requires --teacher-logits");
  fs::create_directories(cfg.out);
  io::write_text_file((fs::path(cfg.out) / "run-config.txt").string(), render_config(cfg));
}

void make_dataset(const RunConfig& cfg) {
  std::vector<data::Sample> samples;
  if (!cfg.import_dir.empty()) {
    for (data::Sample& s : data::load_dataset(cfg.import_dir))
      if (s.provenance == "original") samples.push_back(std::move(s));
    if (samples.empty())
      fail("bad_argument", "import directory has no original samples", cfg.import_dir);
  } else {
    samples = data::synth_sonar(cfg.seed, cfg.images, cfg.side, cfg.wall_ratio);
  }
  if (!cfg.no_aug) samples = data::augment(samples, cfg.sigma, cfg.seed + 1);
  data::split_dataset(samples, cfg.seed + 2);
  data::save_dataset(cfg.out, samples);
}

void train_cmd(const RunConfig& cfg) {
  if (cfg.dataset.empty()) fail("bad_argument", "train: --dataset is required");
  std::vector<data::Sample> samples = load_split(cfg.dataset, "train", cfg.no_aug);
  size_t side = samples[0].image.width;

  model::ModelSpec spec = resolve_spec(cfg, side, dataset_classes(samples));
  model::Model m = model::build_model(spec, cfg.seed);

  distill::TrainConfig tc;
  tc.iters = cfg.iters;
  tc.lr = cfg.lr;
  tc.batch_size = cfg.batch;
  tc.seed = cfg.seed;
  tc.calib_samples = cfg.calib;

  distill::KdSource kd;
  distill::LogitStore store;
  std::vector<distill::IterLog> curve;
  if (cfg.kd) {
    store = distill::open_logit_store(cfg.teacher_logits);
    kd.store = &store;
    curve = distill::train(m, samples, tc, &kd);
  } else {
    curve = distill::train(m, samples, tc);
  }

  model::save_model((fs::path(cfg.out) / "model.ckpt").string(), m);
  std::ostringstream log;
  log << "iter,hard,kd_bbox,kd_obj,kd_cls,soft,total\n";
  for (const distill::IterLog& it : curve) {
    char line[256];
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", it.iter,
                  it.hard, it.kd_bbox, it.kd_obj, it.kd_cls, it.soft, it.total);
    log << line;
  }
  io::write_text_file((fs::path(cfg.out) / "train-log.csv").string(), log.str());
}

void dump_logits_cmd(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) fail("bad_argument", "dump-logits: --checkpoint is required");
  if (cfg.dataset.empty()) fail("bad_argument", "dump-logits: --dataset is required");
  model::Model m = model::load_model(cfg.checkpoint);
  std::vector<data::Sample> samples = load_split(cfg.dataset, "all", false);
  distill::dump_teacher_logits(m, samples, cfg.out);
}

metrics::EvalReport eval_cmd(const RunConfig& cfg) {
  if (cfg.dataset.empty()) fail("bad_argument", "eval: --dataset is required");
  if (cfg.checkpoint.empty() == cfg.preds.empty())
    fail("bad_argument", "eval: provide exactly one of --checkpoint or --preds");
  std::vector<data::Sample> samples = load_split(cfg.dataset, cfg.split, false);

  std::vector<metrics::FrameEval> frames;
  if (!cfg.checkpoint.empty()) {
    model::Model m = model::load_model(cfg.checkpoint);
    for (size_t f = 0; f < samples.size(); ++f) {
      std::vector<DetBox> preds =
          detect_one(m, samples[f].image, cfg.score_thresh, cfg.nms_iou);
      frames.push_back(metrics::match(preds, samples[f].boxes, cfg.iou_thresh, f));
    }
  } else {
    for (size_t f = 0; f < samples.size(); ++f) {
      std::string path = (fs::path(cfg.preds) / (samples[f].id + ".txt")).string();
      std::vector<DetBox> preds = metrics::parse_predictions(
          io::read_text_file(path), samples[f].image.width, samples[f].image.height,
          samples[f].id);
      frames.push_back(metrics::match(preds, samples[f].boxes, cfg.iou_thresh, f));
    }
  }
  metrics::EvalReport r = metrics::report(frames);
  write_report_files(cfg.out, cfg.split, r);
  return r;
}

metrics::EvalReport eval_video_cmd(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) fail("bad_argument", "eval-video: --checkpoint is required");
  if (cfg.frames.empty()) fail("bad_argument", "eval-video: --frames is required");
  std::vector<data::Sample> samples = load_split(cfg.frames, "all", false);
  model::Model m = model::load_model(cfg.checkpoint);

  std::vector<metrics::FrameEval> frames;
  for (size_t f = 0; f < samples.size(); ++f) {
    std::vector<DetBox> preds =
        detect_one(m, samples[f].image, cfg.score_thresh, cfg.nms_iou);
    frames.push_back(metrics::match(preds, samples[f].boxes, cfg.iou_thresh, f));
  }
  std::vector<bool> timeline;
  const std::vector<bool>* presence = nullptr;
  if (!cfg.gt_timeline.empty()) {
    timeline = load_timeline(cfg.gt_timeline, frames.size());
    presence = &timeline;
  }
  metrics::EvalReport r = metrics::report(frames, presence);
  write_report_files(cfg.out, "video", r);
  return r;
}

std::vector<DetBox> infer_cmd(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) fail("bad_argument", "infer: --checkpoint is required");
  if (cfg.image.empty()) fail("bad_argument", "infer: --image is required");
  model::Model m = model::load_model(cfg.checkpoint);
  img::Image8 original = img::read_image(cfg.image);

  size_t in = m.spec.input_size;
  img::Image8 sized =
      (original.width == in && original.height == in)
          ? original
          : img::resize_bilinear(original, in, in);
  std::vector<DetBox> preds = detect_one(m, sized, cfg.score_thresh, cfg.nms_iou);
  // back to the source frame
  double sx = double(original.width) / double(in), sy = double(original.height) / double(in);
  for (DetBox& b : preds) {
    b.cx *= sx;
    b.w *= sx;
    b.cy *= sy;
    b.h *= sy;
  }

  std::string stem = fs::path(cfg.image).stem().string();
  io::write_text_file((fs::path(cfg.out) / (stem + ".txt")).string(),
                      metrics::format_predictions(preds, original.width, original.height));
  if (cfg.annotate) {
    img::Image8 overlay(original.width, original.height, 3);
    for (size_t y = 0; y < original.height; ++y)
      for (size_t x = 0; x < original.width; ++x)
        for (size_t c = 0; c < 3; ++c)
          overlay.at(y, x, c) = original.at(y, x, original.channels == 3 ? c : 0);
    for (const DetBox& b : preds) draw_box(overlay, b);
    img::write_png((fs::path(cfg.out) / (stem + ".png")).string(), overlay);
  }
  return preds;
}

void run(const RunConfig& cfg) {
  prepare_run(cfg);
  if (cfg.command == "make-dataset")
    make_dataset(cfg);
  else if (cfg.command == "train")
    train_cmd(cfg);
  else if (cfg.command == "dump-logits")
    dump_logits_cmd(cfg);
  else if (cfg.command == "eval")
    eval_cmd(cfg);
  else if (cfg.command == "eval-video")
    eval_video_cmd(cfg);
  else if (cfg.command == "infer")
    infer_cmd(cfg);
  else
    fail("bad_argument", "unknown command", cfg.command);
}

}  // namespace sdet::pipeline
