#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "sdet/boxes.hpp"

namespace sdet::metrics {

// The ten IoU thresholds averaged by ap(): 0.50, 0.55, ..., 0.95.
std::vector<double> ap_thresholds();

// One evaluated frame: predictions against ground truth with match flags at
// a fixed IoU threshold.
struct FrameEval {
  size_t frame = 0;
  std::vector<DetBox> preds;       // descending score (stable on ties)
  std::vector<GtBox> gts;
  std::vector<bool> pred_matched;  // parallel to preds: true = counted a TP
  std::vector<bool> gt_matched;    // parallel to gts: each GT claimed once
  double iou_thresh = 0.5;

  size_t tp() const;  // matched predictions
  size_t fp() const;  // preds.size() - tp()
  size_t fn() const;  // unclaimed ground truth
};

// Greedy matching: predictions in descending score order (stable on ties)
// each claim the highest-IoU still-unclaimed ground-truth box of their
// class, provided that IoU reaches iou_thresh; every other prediction is a
// false positive and every unclaimed ground truth a false negative.
FrameEval match(std::vector<DetBox> preds, const std::vector<GtBox>& gts,
                double iou_thresh = 0.5, size_t frame = 0);

// TP/(TP+FP); with no predictions at all the rate is vacuously 1.
double precision(double tp, double fp);

// Area under the all-points-interpolated precision-recall curve, with the
// predictions of every frame ranked globally by score and re-matched per
// frame at iou_thresh. No ground truth anywhere -> 0.
double ap_at(const std::vector<FrameEval>& frames, double iou_thresh);

double ap50(const std::vector<FrameEval>& frames);  // ap_at(frames, 0.5)
double ap(const std::vector<FrameEval>& frames);    // mean over ap_thresholds()

struct VideoMetrics {
  double detection_duration_pct = 0.0;  // % of wall-present frames with a TP
  double video_fp_pct = 0.0;            // % of all frames with a false positive
};

// wall_present marks the frames where the target is actually in view (one
// flag per frame); by default a frame counts as wall-present when it carries
// ground-truth boxes.
VideoMetrics video_metrics(const std::vector<FrameEval>& frames,
                           const std::vector<bool>* wall_present = nullptr);

struct EvalReport {
  size_t frames = 0;
  size_t tp = 0, fp = 0, fn = 0;  // box-level counts over all frames
  double tp_pct = 0.0;            // % of frames containing >= 1 TP
  double fp_pct = 0.0;            // % of frames containing >= 1 FP
  double pr = 0.0;                // precision over the box-level counts
  double ap50 = 0.0;
  double ap = 0.0;
  double detection_duration_pct = 0.0;
  double video_fp_pct = 0.0;
};

// Aggregates matched frames: counts and percentages use the stored flags,
// AP re-matches at its own thresholds. Empty input -> all-zero report.
EvalReport report(const std::vector<FrameEval>& frames,
                  const std::vector<bool>* wall_present = nullptr);

// Renderings with the column order TP, FP, Pr, AP50, AP, Detection, FP;
// percentage columns run 0-100 (Pr included), the AP columns 0-1.
std::string format_csv(const std::vector<std::pair<std::string, EvalReport>>& rows);
std::string format_text(const std::vector<std::pair<std::string, EvalReport>>& rows);
std::string format_json(const std::vector<std::pair<std::string, EvalReport>>& rows);

// Prediction interchange: one "class score cx cy w h" line per box,
// coordinates normalized by the image size.
std::string format_predictions(const std::vector<DetBox>& preds, size_t width,
                               size_t height);
std::vector<DetBox> parse_predictions(const std::string& text, size_t width, size_t height,
                                      const std::string& context);

}  // namespace sdet::metrics
