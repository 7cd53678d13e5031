#include "sdet/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "sdet/error.hpp"
#include "sdet/image.hpp"
#include "sdet/ops.hpp"

namespace fs = std::filesystem;

namespace sdet::distill {

namespace {

void check_pair(const model::FpnLogits& s, const model::FpnLogits& t, const char* what) {
  for (size_t i = 0; i < 3; ++i) {
    if (s[i].cls.shape() != t[i].cls.shape() || s[i].reg.shape() != t[i].reg.shape() ||
        s[i].obj.shape() != t[i].obj.shape())
      fail("shape_mismatch", std::string(what) + ": student/teacher scale disagrees",
           "scale " + std::to_string(i));
    if (s[i].reg.shape().size() != 4 || s[i].reg.shape()[1] != 4)
      fail("bad_shape", std::string(what) + ": reg map must be [N,4,H,W]");
    if (s[i].obj.shape()[1] != 1)
      fail("bad_shape", std::string(what) + ": obj map must be [N,1,H,W]");
    if (s[i].cls.shape()[0] != s[0].cls.shape()[0])
      fail("shape_mismatch", std::string(what) + ": batch size differs across scales");
  }
}

double batch_of(const model::FpnLogits& s) { return double(s[0].cls.shape()[0]); }

}  // namespace

Tensor kd_bbox_loss(const model::FpnLogits& student, const model::FpnLogits& teacher,
                    KdNorm norm) {
  check_pair(student, teacher, "kd_bbox_loss");
  Tensor acc = Tensor::scalar(0.0);
  for (size_t i = 0; i < 3; ++i) {
    Tensor d = square(sub(student[i].reg, teacher[i].reg.detached()));
    acc = add(acc, norm == KdNorm::scale_sum ? sum_all(d) : mean_all(d));
  }
  double div = norm == KdNorm::scale_sum ? batch_of(student) * 3.0 : 3.0;
  return mul_scalar(acc, 1.0 / div);
}

Tensor kd_obj_loss(const model::FpnLogits& student, const model::FpnLogits& teacher,
                   KdNorm norm) {
  check_pair(student, teacher, "kd_obj_loss");
  Tensor acc = Tensor::scalar(0.0);
  for (size_t i = 0; i < 3; ++i) {
    Tensor term = bce(sigmoid(student[i].obj), sigmoid(teacher[i].obj.detached()));
    if (norm == KdNorm::scale_sum)
      term = mul_scalar(term, double(student[i].obj.numel()));
    acc = add(acc, term);
  }
  double div = norm == KdNorm::scale_sum ? batch_of(student) * 3.0 : 3.0;
  return mul_scalar(acc, 1.0 / div);
}

Tensor kd_cls_loss(const model::FpnLogits& student, const model::FpnLogits& teacher,
                   KdNorm norm) {
  check_pair(student, teacher, "kd_cls_loss");
  Tensor acc = Tensor::scalar(0.0);
  for (size_t i = 0; i < 3; ++i) {
    Tensor term = kl_div(softmax(teacher[i].cls.detached(), 1), softmax(student[i].cls, 1), 1);
    if (norm == KdNorm::element_mean) {
      const Shape& s = student[i].cls.shape();
      term = mul_scalar(term, 1.0 / double(s[0] * s[2] * s[3]));  // mean over cells
    }
    acc = add(acc, term);
  }
  double div = norm == KdNorm::scale_sum ? batch_of(student) * 3.0 : 3.0;
  return mul_scalar(acc, 1.0 / div);
}

Tensor soft_loss(const model::FpnLogits& student, const model::FpnLogits& teacher,
                 const KDWeights& w) {
  if (w.bbox < 0 || w.obj < 0 || w.cls < 0)
    fail("bad_argument", "soft_loss: negative component weight");
  Tensor out = mul_scalar(kd_bbox_loss(student, teacher, w.norm), w.bbox);
  out = add(out, mul_scalar(kd_obj_loss(student, teacher, w.norm), w.obj));
  return add(out, mul_scalar(kd_cls_loss(student, teacher, w.norm), w.cls));
}

Tensor total_loss(const Tensor& hard, const Tensor& soft, const KDWeights& w) {
  if (w.mode == TotalMode::additive) return add(hard, soft);
  if (w.blend_lambda < 0.0 || w.blend_lambda > 1.0)
    fail("bad_argument", "total_loss: blend parameter outside [0,1]");
  return add(mul_scalar(hard, w.blend_lambda), mul_scalar(soft, 1.0 - w.blend_lambda));
}

size_t best_stride(double w, double h) {
  if (!(w > 0.0) || !(h > 0.0)) fail("bad_argument", "best_stride: non-positive box size");
  double side = std::log(std::sqrt(w * h));
  size_t best = model::kStrides[0];
  double best_d = std::abs(side - std::log(4.0 * double(best)));
  for (size_t i = 1; i < 3; ++i) {
    double d = std::abs(side - std::log(4.0 * double(model::kStrides[i])));
    if (d < best_d) {
      best_d = d;
      best = model::kStrides[i];
    }
  }
  return best;
}

namespace {

// min(a, b) over [1] tensors via the max rule.
Tensor min_s(const Tensor& a, double b) { return neg(maximum_scalar(neg(a), -b)); }

// 1 - IoU between the decoded box (graph scalars) and a fixed ground truth.
Tensor iou_term(const Tensor& cx, const Tensor& cy, const Tensor& w, const Tensor& h,
                const GtBox& g) {
  Tensor half_w = mul_scalar(w, 0.5), half_h = mul_scalar(h, 0.5);
  Tensor x1 = sub(cx, half_w), x2 = add(cx, half_w);
  Tensor y1 = sub(cy, half_h), y2 = add(cy, half_h);
  double gx1 = g.cx - g.w / 2, gx2 = g.cx + g.w / 2;
  double gy1 = g.cy - g.h / 2, gy2 = g.cy + g.h / 2;
  Tensor iw = sub(min_s(x2, gx2), maximum_scalar(x1, gx1));
  Tensor ih = sub(min_s(y2, gy2), maximum_scalar(y1, gy1));
  Tensor inter = mul(maximum_scalar(iw, 0.0), maximum_scalar(ih, 0.0));
  Tensor uni = add_scalar(sub(mul(w, h), inter), g.w * g.h);
  return add_scalar(neg(divide(inter, uni)), 1.0);
}

struct Positive {
  size_t scale, b, gy, gx, gt;
};

}  // namespace

Tensor hard_loss(const model::FpnLogits& logits,
                 const std::vector<std::vector<GtBox>>& targets, size_t num_classes,
                 size_t input_size) {
  size_t B = logits[0].cls.shape()[0];
  if (targets.size() != B)
    fail("shape_mismatch", "hard_loss: one target list per batch element expected",
         std::to_string(targets.size()) + " vs batch " + std::to_string(B));
  for (size_t i = 0; i < 3; ++i) {
    const Shape& cs = logits[i].cls.shape();
    size_t side = input_size / model::kStrides[i];
    if (cs.size() != 4 || cs[0] != B || cs[1] != num_classes || cs[2] != side || cs[3] != side)
      fail("bad_shape", "hard_loss: class map shape mismatch", shape_str(cs));
  }

  // Assign each box to the center cell at its best-matching stride.
  std::vector<Positive> pos;
  std::array<std::vector<uint8_t>, 3> taken;
  for (size_t i = 0; i < 3; ++i) {
    const Shape& s = logits[i].obj.shape();
    taken[i].assign(s[0] * s[2] * s[3], 0);
  }
  double S = double(input_size);
  for (size_t b = 0; b < B; ++b)
    for (size_t g = 0; g < targets[b].size(); ++g) {
      const GtBox& box = targets[b][g];
      if (box.class_id >= num_classes)
        fail("bad_argument", "hard_loss: class id out of range");
      if (!(box.w > 0) || !(box.h > 0) || box.cx - box.w / 2 < 0 || box.cy - box.h / 2 < 0 ||
          box.cx + box.w / 2 > S || box.cy + box.h / 2 > S)
        fail("bad_argument", "hard_loss: box outside image",
             "cx=" + std::to_string(box.cx) + " cy=" + std::to_string(box.cy) +
                 " w=" + std::to_string(box.w) + " h=" + std::to_string(box.h));
      size_t stride = best_stride(box.w, box.h);
      size_t scale = stride == 8 ? 0 : stride == 16 ? 1 : 2;
      size_t side = input_size / stride;
      size_t gx = std::min(size_t(box.cx / double(stride)), side - 1);
      size_t gy = std::min(size_t(box.cy / double(stride)), side - 1);
      size_t flat = (b * side + gy) * side + gx;
      if (taken[scale][flat]) continue;  // first box keeps a contested cell
      taken[scale][flat] = 1;
      pos.push_back({scale, b, gy, gx, g});
    }

  // Objectness: BCE against the positive mask, mean over every cell.
  Tensor obj_sum = Tensor::scalar(0.0);
  size_t obj_cells = 0;
  for (size_t i = 0; i < 3; ++i) {
    const Shape& s = logits[i].obj.shape();
    std::vector<double> mask(s[0] * s[2] * s[3], 0.0);
    for (const Positive& p : pos)
      if (p.scale == i) mask[(p.b * s[2] + p.gy) * s[3] + p.gx] = 1.0;
    Tensor target = Tensor::from_data(s, std::move(mask));
    Tensor term = bce(sigmoid(logits[i].obj), target);
    obj_sum = add(obj_sum, mul_scalar(term, double(logits[i].obj.numel())));
    obj_cells += logits[i].obj.numel();
  }
  Tensor loss = mul_scalar(obj_sum, 1.0 / double(obj_cells));

  if (pos.empty()) return loss;

  // Class probabilities at positives: one BCE over all (positive, class).
  std::vector<Tensor> cls_probs;
  std::vector<double> cls_target;
  cls_probs.reserve(pos.size());
  cls_target.reserve(pos.size() * num_classes);
  // Decoded-box agreement at positives.
  Tensor iou_sum = Tensor::scalar(0.0);
  for (const Positive& p : pos) {
    const GtBox& g = targets[p.b][p.gt];
    cls_probs.push_back(sigmoid(grid_cell(logits[p.scale].cls, p.b, p.gy, p.gx)));
    for (size_t c = 0; c < num_classes; ++c)
      cls_target.push_back(c == g.class_id ? 1.0 : 0.0);

    double stride = double(model::kStrides[p.scale]);
    Tensor t = grid_cell(logits[p.scale].reg, p.b, p.gy, p.gx);
    Tensor cx = mul_scalar(add_scalar(index_scalar(t, 0), double(p.gx)), stride);
    Tensor cy = mul_scalar(add_scalar(index_scalar(t, 1), double(p.gy)), stride);
    // size logits are clamped before exponentiation so a runaway student
    // cannot push the overlap term through inf*0 into NaN
    Tensor w = mul_scalar(exp_t(min_s(maximum_scalar(index_scalar(t, 2), -20.0), 20.0)), stride);
    Tensor h = mul_scalar(exp_t(min_s(maximum_scalar(index_scalar(t, 3), -20.0), 20.0)), stride);
    iou_sum = add(iou_sum, iou_term(cx, cy, w, h, g));
  }
  Tensor cls_term = bce(concat(cls_probs, 0),
                        Tensor::from_data({pos.size() * num_classes}, std::move(cls_target)));
  loss = add(loss, cls_term);
  return add(loss, mul_scalar(iou_sum, 1.0 / double(pos.size())));
}

// ---- logit store ----

io::SpecHash logit_contract_hash(const model::ModelSpec& spec) {
  nlohmann::json j{{"classes", spec.num_classes},
                   {"input_size", spec.input_size},
                   {"strides", model::kStrides}};
  return io::sha256(j.dump());
}

void dump_teacher_logits(model::Model& teacher, const std::vector<data::Sample>& samples,
                         const std::string& dir) {
  if (!teacher.calibrated)
    fail("bad_argument", "dump_teacher_logits: teacher is not calibrated");
  fs::create_directories(dir);
  io::SpecHash hash = logit_contract_hash(teacher.spec);
  nlohmann::json files = nlohmann::json::object();
  NoGradGuard ng;
  for (const data::Sample& s : samples) {
    if (s.image.width != teacher.spec.input_size || s.image.height != teacher.spec.input_size)
      fail("bad_argument", "dump_teacher_logits: image size differs from teacher input",
           s.id + ": " + std::to_string(s.image.width) + "x" + std::to_string(s.image.height));
    if (files.contains(s.id))
      fail("bad_argument", "dump_teacher_logits: duplicate image id", s.id);
    model::FpnLogits out = model::forward(teacher, img::to_tensor(s.image));
    io::LogitRecord rec;
    rec.image_id = s.id;
    for (size_t i = 0; i < 3; ++i) {
      rec.maps.push_back(out[i].cls);
      rec.maps.push_back(out[i].reg);
      rec.maps.push_back(out[i].obj);
    }
    std::string name = s.id + ".kdl";
    io::write_logit_file((fs::path(dir) / name).string(), hash, rec);
    files[s.id] = name;
  }
  nlohmann::json index{{"version", 1},
                       {"contract_hash", io::hex(hash)},
                       {"teacher_spec", model::spec_to_json(teacher.spec)},
                       {"count", samples.size()},
                       {"files", files}};
  io::write_json_file((fs::path(dir) / "index.json").string(), index);
}

LogitStore open_logit_store(const std::string& dir) {
  LogitStore store;
  store.dir = dir;
  nlohmann::json index = io::read_json_file((fs::path(dir) / "index.json").string());
  std::string hash_hex = index.at("contract_hash").get<std::string>();
  if (hash_hex.size() != 64)
    fail("format", "logit index: bad contract hash length", dir);
  for (size_t i = 0; i < 32; ++i)
    store.hash[i] = uint8_t(std::stoul(hash_hex.substr(2 * i, 2), nullptr, 16));
  store.teacher_spec = index.at("teacher_spec");
  for (const auto& [id, name] : index.at("files").items())
    store.files[id] = name.get<std::string>();
  if (index.at("count").get<size_t>() != store.files.size())
    fail("format", "logit index: count disagrees with file list", dir);
  return store;
}

io::LogitRecord load_teacher_logits(const LogitStore& store, const std::string& image_id) {
  auto it = store.files.find(image_id);
  if (it == store.files.end())
    fail("io", "no teacher logit record for image", image_id);
  io::LogitRecord rec =
      io::read_logit_file((fs::path(store.dir) / it->second).string(), &store.hash);
  if (rec.image_id != image_id)
    fail("format", "logit record holds a different image id",
         rec.image_id + " vs " + image_id);
  return rec;
}

// ---- training ----

namespace {

Tensor batch_input(const std::vector<data::Sample>& samples, const std::vector<size_t>& idx,
                   size_t input_size) {
  size_t B = idx.size(), hw = input_size * input_size;
  std::vector<double> v(B * hw);
  for (size_t b = 0; b < B; ++b) {
    const img::Image8& im = samples[idx[b]].image;
    for (size_t i = 0; i < hw; ++i) v[b * hw + i] = double(im.pixels[i]) / 255.0;
  }
  return Tensor::from_data({B, 1, input_size, input_size}, std::move(v));
}

// Stacks per-image teacher records into batched [B,C,H,W] constants.
model::FpnLogits stack_records(const std::vector<const io::LogitRecord*>& recs) {
  model::FpnLogits out;
  for (size_t i = 0; i < 3; ++i) {
    Tensor* slot[3] = {&out[i].cls, &out[i].reg, &out[i].obj};
    for (size_t k = 0; k < 3; ++k) {
      const Tensor& first = recs[0]->maps[i * 3 + k];
      Shape s = first.shape();
      if (s.size() != 4 || s[0] != 1)
        fail("format", "teacher logit record: expected [1,C,H,W] map", shape_str(s));
      size_t chw = first.numel();
      std::vector<double> v(recs.size() * chw);
      for (size_t b = 0; b < recs.size(); ++b) {
        const Tensor& m = recs[b]->maps[i * 3 + k];
        if (m.shape() != s)
          fail("shape_mismatch", "teacher logit records disagree on map shape");
        std::copy(m.data(), m.data() + chw, v.begin() + b * chw);
      }
      s[0] = recs.size();
      *slot[k] = Tensor::from_data(s, std::move(v));
    }
    out[i].stride = model::kStrides[i];
  }
  return out;
}

void sgd_step(ParamStore& params, double lr) {
  for (auto& [name, t] : params.entries()) {
    if (!t.requires_grad() || !t.has_grad()) continue;
    double* v = t.data();
    const double* g = t.grad().data();
    for (size_t i = 0; i < t.numel(); ++i) v[i] -= lr * g[i];
  }
}

}  // namespace

std::vector<IterLog> train(model::Model& m, const std::vector<data::Sample>& samples,
                           const TrainConfig& cfg, const KdSource* kd) {
  if (samples.empty()) fail("bad_argument", "train: no samples");
  if (cfg.batch_size == 0) fail("bad_argument", "train: batch size must be positive");
  size_t S = m.spec.input_size;
  for (const data::Sample& s : samples)
    if (s.image.width != S || s.image.height != S || s.image.channels != m.spec.in_channels)
      fail("bad_argument", "train: sample does not match the model input",
           s.id + ": " + std::to_string(s.image.width) + "x" + std::to_string(s.image.height));
  if (kd && !kd->store && !kd->online_teacher)
    fail("bad_argument", "train: distillation requested without a teacher source");
  if (kd && kd->online_teacher && !kd->online_teacher->calibrated)
    fail("bad_argument", "train: online teacher is not calibrated");

  // Offline records: verify coverage up front, load lazily after.
  std::map<std::string, io::LogitRecord> cache;
  if (kd && kd->store)
    for (const data::Sample& s : samples)
      if (!kd->store->files.count(s.id))
        fail("io", "no teacher logit record for image", s.id);

  // Fixed calibration batch from the leading samples. The affine statistics
  // are refreshed from it before every step: statistics frozen once at the
  // start drift into overflow as the weights move, while statistics taken
  // from each tiny training batch are so noisy at the deep one-cell grids
  // that they would swamp the distillation targets. A stable basis that
  // tracks the weights avoids both, and keeps training-time logits
  // comparable with logits dumped through the inference path.
  size_t n_cal = std::min(std::max<size_t>(cfg.calib_samples, 1), samples.size());
  std::vector<size_t> cal_idx(n_cal);
  for (size_t i = 0; i < n_cal; ++i) cal_idx[i] = i;
  Tensor calib_batch = batch_input(samples, cal_idx, S);

  std::mt19937_64 rng(cfg.seed);
  std::vector<IterLog> curve;
  curve.reserve(cfg.iters);
  for (size_t it = 0; it < cfg.iters; ++it) {
    std::vector<size_t> idx(cfg.batch_size);
    for (size_t& i : idx) i = size_t(rng() % samples.size());

    Tensor x = batch_input(samples, idx, S);
    std::vector<std::vector<GtBox>> targets(idx.size());
    for (size_t b = 0; b < idx.size(); ++b) targets[b] = samples[idx[b]].boxes;

    model::calibrate(m, calib_batch);
    model::FpnLogits out = model::forward(m, x);
    for (size_t i = 0; i < 3; ++i) {
      if (!std::all_of(out[i].cls.data(), out[i].cls.data() + out[i].cls.numel(),
                       [](double v) { return std::isfinite(v); }) ||
          !std::all_of(out[i].reg.data(), out[i].reg.data() + out[i].reg.numel(),
                       [](double v) { return std::isfinite(v); }) ||
          !std::all_of(out[i].obj.data(), out[i].obj.data() + out[i].obj.numel(),
                       [](double v) { return std::isfinite(v); }))
        fail("non_finite", "train: model outputs diverged",
             "iteration " + std::to_string(it) + ", scale " + std::to_string(i));
    }
    Tensor hard = hard_loss(out, targets, m.spec.num_classes, S);

    IterLog log;
    log.iter = it;
    Tensor total = hard;
    if (kd) {
      model::FpnLogits teacher;
      if (kd->store) {
        std::vector<const io::LogitRecord*> recs(idx.size());
        for (size_t b = 0; b < idx.size(); ++b) {
          const std::string& id = samples[idx[b]].id;
          auto it2 = cache.find(id);
          if (it2 == cache.end())
            it2 = cache.emplace(id, load_teacher_logits(*kd->store, id)).first;
          recs[b] = &it2->second;
        }
        teacher = stack_records(recs);
      } else {
        NoGradGuard ng;
        teacher = model::forward(*kd->online_teacher, x);
      }
      Tensor bbox = kd_bbox_loss(out, teacher, kd->weights.norm);
      Tensor obj = kd_obj_loss(out, teacher, kd->weights.norm);
      Tensor cls = kd_cls_loss(out, teacher, kd->weights.norm);
      Tensor soft = mul_scalar(bbox, kd->weights.bbox);
      soft = add(soft, mul_scalar(obj, kd->weights.obj));
      soft = add(soft, mul_scalar(cls, kd->weights.cls));
      total = total_loss(hard, soft, kd->weights);
      log.kd_bbox = bbox.item();
      log.kd_obj = obj.item();
      log.kd_cls = cls.item();
      log.soft = soft.item();
    }
    log.hard = hard.item();
    log.total = total.item();
    if (!std::isfinite(log.total) || !std::isfinite(log.hard) || !std::isfinite(log.soft))
      fail("non_finite", "train: loss diverged",
           "iteration " + std::to_string(it) + ": hard=" + std::to_string(log.hard) +
               " soft=" + std::to_string(log.soft));

    m.params.zero_grads();
    backward(total);
    sgd_step(m.params, cfg.lr);
    curve.push_back(log);
  }

  // Statistics in the buffers predate the last weight update; refresh once
  // more so the checkpoint carries statistics matching the final weights.
  model::calibrate(m, calib_batch);
  return curve;
}

}  // namespace sdet::distill
