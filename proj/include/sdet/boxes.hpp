#pragma once

#include <cstddef>
#include <vector>

namespace sdet {

// Axis-aligned box in input-image pixel coordinates, center + size.
struct DetBox {
  size_t class_id = 0;
  double score = 0.0;
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

struct GtBox {
  size_t class_id = 0;
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

// Intersection over union of two center+size boxes; degenerate pairs
// (empty union) give 0.
double iou(double acx, double acy, double aw, double ah, double bcx, double bcy, double bw,
           double bh);

inline double iou(const DetBox& a, const DetBox& b) {
  return iou(a.cx, a.cy, a.w, a.h, b.cx, b.cy, b.w, b.h);
}

inline double iou(const DetBox& a, const GtBox& b) {
  return iou(a.cx, a.cy, a.w, a.h, b.cx, b.cy, b.w, b.h);
}

}  // namespace sdet
