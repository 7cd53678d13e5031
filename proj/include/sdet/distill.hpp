#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdet/dataset.hpp"
#include "sdet/model.hpp"
#include "sdet/serialize.hpp"
#include "sdet/tensor.hpp"

namespace sdet::distill {

// Teacher-to-student transfer losses over the three FPN scales, the hard
// detection loss, the on-disk teacher-logit exchange and the training loop.

// Two batch-normalization conventions for the transfer losses:
//   scale_sum    — each scale contributes its elementwise sum; the total is
//                  divided by batch_size * 3. Default.
//   element_mean — each scale contributes a per-element mean (per-cell mean
//                  for the class KL); the three scales are averaged.
enum class KdNorm { scale_sum, element_mean };

enum class TotalMode { additive, blend };

struct KDWeights {
  double bbox = 0.5;
  double obj = 0.5;
  double cls = 0.5;
  TotalMode mode = TotalMode::additive;
  double blend_lambda = 0.5;  // blend mode: total = λ·hard + (1-λ)·soft
  KdNorm norm = KdNorm::scale_sum;
};

// Squared error between student and teacher box-regression maps.
Tensor kd_bbox_loss(const model::FpnLogits& student, const model::FpnLogits& teacher,
                    KdNorm norm = KdNorm::scale_sum);
// Binary cross-entropy between sigmoid objectness maps; the teacher side is
// the soft target.
Tensor kd_obj_loss(const model::FpnLogits& student, const model::FpnLogits& teacher,
                   KdNorm norm = KdNorm::scale_sum);
// KL(teacher softmax ‖ student softmax) over the class channel per cell.
Tensor kd_cls_loss(const model::FpnLogits& student, const model::FpnLogits& teacher,
                   KdNorm norm = KdNorm::scale_sum);
// w.bbox·bbox + w.obj·obj + w.cls·cls. The teacher side never receives
// gradient; all three components treat it as a constant.
Tensor soft_loss(const model::FpnLogits& student, const model::FpnLogits& teacher,
                 const KDWeights& w);
// additive: hard + soft; blend: λ·hard + (1-λ)·soft.
Tensor total_loss(const Tensor& hard, const Tensor& soft, const KDWeights& w);

// Stride from {8, 16, 32} whose nominal box size 4·stride is closest to
// sqrt(w·h) in log space; ties pick the smaller stride.
size_t best_stride(double w, double h);

// Simplified anchor-free assignment: the cell containing each box center at
// best_stride(w, h) is positive (first box wins a contested cell). Loss =
// mean BCE on objectness over every cell of every scale
// + mean BCE on class probabilities at positive cells
// + mean (1 - IoU) between decoded and ground-truth boxes at positive cells.
// Boxes are in pixels and must lie inside the input square.
Tensor hard_loss(const model::FpnLogits& logits,
                 const std::vector<std::vector<GtBox>>& targets, size_t num_classes,
                 size_t input_size);

// ---- offline teacher-logit store ----
//
// One file per image: "KDL1", version, a 32-byte contract hash, the image id
// and nine tensor records (cls, reg, obj per scale). index.json maps image
// ids to file names and records the producing model's spec. The hash covers
// only what producer and consumer must agree on — input size, class count and
// strides — so a student with a different width/depth can still verify that
// the shapes it expects are the shapes on disk.

io::SpecHash logit_contract_hash(const model::ModelSpec& spec);

struct LogitStore {
  std::string dir;
  io::SpecHash hash{};
  nlohmann::json teacher_spec;
  std::map<std::string, std::string> files;  // image id -> file name
};

// Runs the teacher over every sample (gradients off) and writes one record
// per image plus the index. Images must match the teacher's input size.
void dump_teacher_logits(model::Model& teacher, const std::vector<data::Sample>& samples,
                         const std::string& dir);
LogitStore open_logit_store(const std::string& dir);
// Missing ids and contract mismatches are errors.
io::LogitRecord load_teacher_logits(const LogitStore& store, const std::string& image_id);

// ---- training ----

struct TrainConfig {
  size_t iters = 200;
  double lr = 0.01;  // plain SGD, no momentum, no schedule
  size_t batch_size = 2;
  uint64_t seed = 0;
  // The affine statistics are refreshed from this many leading samples
  // before every step and once more after the last one, so they track the
  // moving weights on a stable basis.
  size_t calib_samples = 8;
};

struct KdSource {
  const LogitStore* store = nullptr;       // offline: records dumped beforehand
  model::Model* online_teacher = nullptr;  // online: teacher forward per batch
  KDWeights weights;
};

struct IterLog {
  size_t iter = 0;
  double hard = 0;
  double kd_bbox = 0, kd_obj = 0, kd_cls = 0;
  double soft = 0;
  double total = 0;
};

// SGD over the model's parameters, sampling batches with the config seed.
// With `kd` set, every sample needs a logit record (offline) or a teacher
// (online); pass the samples un-augmented so they match the dumped records.
// A non-finite loss aborts with a diagnostic naming the iteration.
std::vector<IterLog> train(model::Model& m, const std::vector<data::Sample>& samples,
                           const TrainConfig& cfg, const KdSource* kd = nullptr);

}  // namespace sdet::distill
