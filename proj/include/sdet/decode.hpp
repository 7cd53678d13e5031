#pragma once

#include <vector>

#include "sdet/boxes.hpp"
#include "sdet/model.hpp"

namespace sdet::model {

inline constexpr double kDefaultScoreThresh = 0.3;
inline constexpr double kDefaultNmsIou = 0.45;

// Per cell (gx, gy) at stride s: cx=(tx+gx)·s, cy=(ty+gy)·s, w=exp(tw)·s,
// h=exp(th)·s; one candidate per (cell, class) with score =
// sigmoid(obj)·sigmoid(cls_c), kept when score > score_thresh. Candidates are
// emitted scale-major, then row-major cells, then ascending class.
std::vector<std::vector<DetBox>> decode(const FpnLogits& logits, size_t num_classes,
                                        double score_thresh = kDefaultScoreThresh);

// Greedy per-class suppression ordered by (score desc, cx asc, cy asc);
// output sorted the same way with class id as the final tie-break, so the
// result is independent of input order.
std::vector<DetBox> nms(std::vector<DetBox> boxes, double iou_thresh = kDefaultNmsIou);

// decode + nms for one forward pass, per batch element.
std::vector<std::vector<DetBox>> detect(const FpnLogits& logits, size_t num_classes,
                                        double score_thresh = kDefaultScoreThresh,
                                        double iou_thresh = kDefaultNmsIou);

}  // namespace sdet::model
