#include "sdet/decode.hpp"

#include <algorithm>
#include <cmath>

namespace sdet {

double iou(double acx, double acy, double aw, double ah, double bcx, double bcy, double bw,
           double bh) {
  double ax1 = acx - aw / 2, ax2 = acx + aw / 2, ay1 = acy - ah / 2, ay2 = acy + ah / 2;
  double bx1 = bcx - bw / 2, bx2 = bcx + bw / 2, by1 = bcy - bh / 2, by2 = bcy + bh / 2;
  double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  double ih = std::min(ay2, by2) - std::max(ay1, by1);
  double inter = iw > 0 && ih > 0 ? iw * ih : 0.0;
  double uni = aw * ah + bw * bh - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace sdet

namespace sdet::model {

namespace {

double sig(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

bool ranks_before(const DetBox& a, const DetBox& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.cx != b.cx) return a.cx < b.cx;
  if (a.cy != b.cy) return a.cy < b.cy;
  return a.class_id < b.class_id;
}

}  // namespace

std::vector<std::vector<DetBox>> decode(const FpnLogits& logits, size_t num_classes,
                                        double score_thresh) {
  size_t batch = logits[0].cls.dim(0);
  std::vector<std::vector<DetBox>> out(batch);
  for (const LevelLogits& lv : logits) {
    size_t n = lv.cls.dim(0), c = lv.cls.dim(1), h = lv.cls.dim(2), w = lv.cls.dim(3);
    if (c != num_classes || n != batch)
      fail("shape_mismatch", "logits do not match the class count");
    double s = double(lv.stride);
    const double* pc = lv.cls.data();
    const double* pr = lv.reg.data();
    const double* po = lv.obj.data();
    size_t area = h * w;
    for (size_t b = 0; b < n; ++b) {
      for (size_t gy = 0; gy < h; ++gy) {
        for (size_t gx = 0; gx < w; ++gx) {
          size_t cell = gy * w + gx;
          double obj = sig(po[b * area + cell]);
          const double* reg = pr + b * 4 * area;
          double cx = (reg[0 * area + cell] + double(gx)) * s;
          double cy = (reg[1 * area + cell] + double(gy)) * s;
          double bw = std::exp(reg[2 * area + cell]) * s;
          double bh = std::exp(reg[3 * area + cell]) * s;
          for (size_t cid = 0; cid < c; ++cid) {
            double score = obj * sig(pc[(b * c + cid) * area + cell]);
            if (score > score_thresh)
              out[b].push_back({cid, score, cx, cy, bw, bh});
          }
        }
      }
    }
  }
  return out;
}

std::vector<DetBox> nms(std::vector<DetBox> boxes, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
    fail("bad_argument", "nms threshold must lie in (0, 1)");
  std::sort(boxes.begin(), boxes.end(), ranks_before);
  std::vector<DetBox> kept;
  for (const DetBox& b : boxes) {
    bool suppressed = false;
    for (const DetBox& k : kept) {
      if (k.class_id == b.class_id && iou(k, b) >= iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(b);
  }
  return kept;
}

std::vector<std::vector<DetBox>> detect(const FpnLogits& logits, size_t num_classes,
                                        double score_thresh, double iou_thresh) {
  std::vector<std::vector<DetBox>> out = decode(logits, num_classes, score_thresh);
  for (auto& per_image : out) per_image = nms(std::move(per_image), iou_thresh);
  return out;
}

}  // namespace sdet::model
