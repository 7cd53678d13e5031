#include "sdet/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "sdet/error.hpp"

namespace sdet::metrics {

std::vector<double> ap_thresholds() {
  std::vector<double> t(10);
  for (size_t i = 0; i < 10; ++i) t[i] = 0.50 + 0.05 * double(i);
  return t;
}

size_t FrameEval::tp() const {
  return size_t(std::count(pred_matched.begin(), pred_matched.end(), true));
}

size_t FrameEval::fp() const { return preds.size() - tp(); }

size_t FrameEval::fn() const {
  return size_t(std::count(gt_matched.begin(), gt_matched.end(), false));
}

FrameEval match(std::vector<DetBox> preds, const std::vector<GtBox>& gts, double iou_thresh,
                size_t frame) {
  if (!(iou_thresh > 0.0) || iou_thresh > 1.0)
    fail("bad_argument", "match: IoU threshold must lie in (0, 1]",
         std::to_string(iou_thresh));
  std::stable_sort(preds.begin(), preds.end(),
                   [](const DetBox& a, const DetBox& b) { return a.score > b.score; });

  FrameEval ev;
  ev.frame = frame;
  ev.gts = gts;
  ev.iou_thresh = iou_thresh;
  ev.pred_matched.assign(preds.size(), false);
  ev.gt_matched.assign(gts.size(), false);
  for (size_t p = 0; p < preds.size(); ++p) {
    size_t best = gts.size();
    double best_iou = 0.0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (ev.gt_matched[g] || gts[g].class_id != preds[p].class_id) continue;
      double v = iou(preds[p], gts[g]);
      if (v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best < gts.size() && best_iou >= iou_thresh) {
      ev.pred_matched[p] = true;
      ev.gt_matched[best] = true;
    }
  }
  ev.preds = std::move(preds);
  return ev;
}

double precision(double tp, double fp) {
  if (tp < 0 || fp < 0) fail("bad_argument", "precision: negative count");
  if (tp + fp == 0.0) return 1.0;  // no predictions: vacuously precise
  return tp / (tp + fp);
}

double ap_at(const std::vector<FrameEval>& frames, double iou_thresh) {
  struct Ranked {
    double score;
    size_t frame, idx;
    bool tp;
  };
  std::vector<Ranked> ranked;
  size_t total_gt = 0;
  for (size_t f = 0; f < frames.size(); ++f) {
    total_gt += frames[f].gts.size();
    FrameEval ev = match(frames[f].preds, frames[f].gts, iou_thresh, frames[f].frame);
    for (size_t p = 0; p < ev.preds.size(); ++p)
      ranked.push_back({ev.preds[p].score, f, p, bool(ev.pred_matched[p])});
  }
  if (total_gt == 0 || ranked.empty()) return 0.0;

  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.idx < b.idx;
  });

  size_t n = ranked.size();
  std::vector<double> rec(n), pre(n);
  size_t tp_cum = 0;
  for (size_t i = 0; i < n; ++i) {
    tp_cum += ranked[i].tp ? 1 : 0;
    rec[i] = double(tp_cum) / double(total_gt);
    pre[i] = double(tp_cum) / double(i + 1);
  }
  // All-points interpolation: carry the running maximum precision backwards,
  // then integrate over the recall increments.
  for (size_t i = n - 1; i-- > 0;) pre[i] = std::max(pre[i], pre[i + 1]);
  double area = 0.0, prev = 0.0;
  for (size_t i = 0; i < n; ++i) {
    area += (rec[i] - prev) * pre[i];
    prev = rec[i];
  }
  return area;
}

double ap50(const std::vector<FrameEval>& frames) { return ap_at(frames, 0.5); }

double ap(const std::vector<FrameEval>& frames) {
  double sum = 0.0;
  std::vector<double> ts = ap_thresholds();
  for (double t : ts) sum += ap_at(frames, t);
  return sum / double(ts.size());
}

VideoMetrics video_metrics(const std::vector<FrameEval>& frames,
                           const std::vector<bool>* wall_present) {
  if (wall_present && wall_present->size() != frames.size())
    fail("bad_argument", "video_metrics: presence timeline length mismatch",
         std::to_string(wall_present->size()) + " flags for " +
             std::to_string(frames.size()) + " frames");
  size_t wall = 0, detected = 0, fp_frames = 0;
  for (size_t f = 0; f < frames.size(); ++f) {
    bool present = wall_present ? (*wall_present)[f] : !frames[f].gts.empty();
    if (present) {
      ++wall;
      if (frames[f].tp() > 0) ++detected;
    }
    if (frames[f].fp() > 0) ++fp_frames;
  }
  VideoMetrics vm;
  if (wall > 0) vm.detection_duration_pct = 100.0 * double(detected) / double(wall);
  if (!frames.empty()) vm.video_fp_pct = 100.0 * double(fp_frames) / double(frames.size());
  return vm;
}

EvalReport report(const std::vector<FrameEval>& frames,
                  const std::vector<bool>* wall_present) {
  EvalReport r;
  if (frames.empty()) return r;
  r.frames = frames.size();
  size_t tp_frames = 0, fp_frames = 0;
  for (const FrameEval& f : frames) {
    size_t tp = f.tp();
    r.tp += tp;
    r.fp += f.fp();
    r.fn += f.fn();
    if (tp > 0) ++tp_frames;
    if (f.fp() > 0) ++fp_frames;
  }
  r.tp_pct = 100.0 * double(tp_frames) / double(r.frames);
  r.fp_pct = 100.0 * double(fp_frames) / double(r.frames);
  r.pr = precision(double(r.tp), double(r.fp));
  r.ap50 = ap50(frames);
  r.ap = ap(frames);
  VideoMetrics vm = video_metrics(frames, wall_present);
  r.detection_duration_pct = vm.detection_duration_pct;
  r.video_fp_pct = vm.video_fp_pct;
  return r;
}

std::string format_csv(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::ostringstream os;
  os << "model,tp_pct,fp_pct,pr_pct,ap50,ap,detection_pct,video_fp_pct\n";
  for (const auto& [name, r] : rows) {
    char line[256];
    std::snprintf(line, sizeof line, "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  name.c_str(), r.tp_pct, r.fp_pct, 100.0 * r.pr, r.ap50, r.ap,
                  r.detection_duration_pct, r.video_fp_pct);
    os << line;
  }
  return os.str();
}

std::string format_text(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  size_t name_w = 5;
  for (const auto& [name, r] : rows) name_w = std::max(name_w, name.size());
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s %8s %8s %8s %8s %8s %10s %8s\n", int(name_w),
                "Model", "TP", "FP", "Pr", "AP50", "AP", "Detection", "FP");
  os << line;
  for (const auto& [name, r] : rows) {
    std::snprintf(line, sizeof line, "%-*s %8.2f %8.2f %8.2f %8.3f %8.3f %10.2f %8.2f\n",
                  int(name_w), name.c_str(), r.tp_pct, r.fp_pct, 100.0 * r.pr, r.ap50, r.ap,
                  r.detection_duration_pct, r.video_fp_pct);
    os << line;
  }
  return os.str();
}

std::string format_json(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [name, r] : rows)
    out.push_back({{"model", name},
                   {"frames", r.frames},
                   {"tp", r.tp},
                   {"fp", r.fp},
                   {"fn", r.fn},
                   {"tp_pct", r.tp_pct},
                   {"fp_pct", r.fp_pct},
                   {"pr", r.pr},
                   {"ap50", r.ap50},
                   {"ap", r.ap},
                   {"detection_duration_pct", r.detection_duration_pct},
                   {"video_fp_pct", r.video_fp_pct}});
  return out.dump(2) + "\n";
}

std::string format_predictions(const std::vector<DetBox>& preds, size_t width,
                               size_t height) {
  std::ostringstream os;
  double w = double(width), h = double(height);
  for (const DetBox& b : preds) {
    char line[200];
    std::snprintf(line, sizeof line, "%zu %.17g %.17g %.17g %.17g %.17g\n", b.class_id,
                  b.score, b.cx / w, b.cy / h, b.w / w, b.h / h);
    os << line;
  }
  return os.str();
}

std::vector<DetBox> parse_predictions(const std::string& text, size_t width, size_t height,
                                      const std::string& context) {
  std::vector<DetBox> preds;
  std::istringstream is(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    long cls;
    double score, cx, cy, w, h;
    if (!(ls >> cls >> score >> cx >> cy >> w >> h) || cls < 0)
      fail("format", "malformed prediction line " + std::to_string(lineno), context);
    if (score < 0 || score > 1)
      fail("format", "prediction score outside [0,1] at line " + std::to_string(lineno),
           context);
    if (cx < 0 || cx > 1 || cy < 0 || cy > 1 || w < 0 || w > 1 || h < 0 || h > 1)
      fail("format", "prediction outside [0,1] at line " + std::to_string(lineno), context);
    preds.push_back({size_t(cls), score, cx * double(width), cy * double(height),
                     w * double(width), h * double(height)});
  }
  return preds;
}

}  // namespace sdet::metrics
