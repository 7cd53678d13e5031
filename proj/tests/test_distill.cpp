#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "sdet/dataset.hpp"
#include "sdet/distill.hpp"
#include "sdet/error.hpp"
#include "sdet/grad_check.hpp"
#include "sdet/image.hpp"
#include "sdet/model.hpp"
#include "sdet/ops.hpp"

using namespace sdet;
using namespace sdet::distill;
using sdet::model::FpnLogits;
using sdet::model::LevelLogits;
using sdet::model::ModelSpec;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("sdet_kd_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string sub(const char* name) const { return (path / name).string(); }
};

Tensor rand_map(std::mt19937_64& rng, Shape shape, double amp) {
  std::uniform_real_distribution<double> u(-amp, amp);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

// Three scales with grids g0, g0/2, g0/4 (floored at 1), strides 8/16/32.
FpnLogits rand_logits(std::mt19937_64& rng, size_t B, size_t C, size_t g0, double amp) {
  FpnLogits l;
  for (size_t i = 0; i < 3; ++i) {
    size_t g = std::max<size_t>(g0 >> i, 1);
    l[i].cls = rand_map(rng, {B, C, g, g}, amp);
    l[i].reg = rand_map(rng, {B, 4, g, g}, amp);
    l[i].obj = rand_map(rng, {B, 1, g, g}, amp);
    l[i].stride = model::kStrides[i];
  }
  return l;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar-loop references computed straight from the definitions; no shared
// code with the graph implementation beyond the raw value arrays.
double oracle_bbox(const FpnLogits& S, const FpnLogits& T, bool element_mean) {
  double total = 0;
  double B = double(S[0].reg.shape()[0]);
  for (size_t i = 0; i < 3; ++i) {
    double acc = 0;
    for (size_t k = 0; k < S[i].reg.numel(); ++k) {
      double d = S[i].reg.data()[k] - T[i].reg.data()[k];
      acc += d * d;
    }
    total += element_mean ? acc / double(S[i].reg.numel()) : acc;
  }
  return total / (element_mean ? 3.0 : B * 3.0);
}

double oracle_obj(const FpnLogits& S, const FpnLogits& T, bool element_mean) {
  double total = 0;
  double B = double(S[0].obj.shape()[0]);
  for (size_t i = 0; i < 3; ++i) {
    double acc = 0;
    for (size_t k = 0; k < S[i].obj.numel(); ++k) {
      double p = sigm(S[i].obj.data()[k]);
      double t = sigm(T[i].obj.data()[k]);
      acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    total += element_mean ? acc / double(S[i].obj.numel()) : acc;
  }
  return total / (element_mean ? 3.0 : B * 3.0);
}

double oracle_cls(const FpnLogits& S, const FpnLogits& T, bool element_mean) {
  double total = 0;
  double B = double(S[0].cls.shape()[0]);
  for (size_t i = 0; i < 3; ++i) {
    const Shape& s = S[i].cls.shape();
    size_t N = s[0], C = s[1], H = s[2], W = s[3];
    double acc = 0;
    for (size_t n = 0; n < N; ++n)
      for (size_t y = 0; y < H; ++y)
        for (size_t x = 0; x < W; ++x) {
          double zs = 0, zt = 0;
          for (size_t c = 0; c < C; ++c) {
            size_t k = ((n * C + c) * H + y) * W + x;
            zs += std::exp(S[i].cls.data()[k]);
            zt += std::exp(T[i].cls.data()[k]);
          }
          for (size_t c = 0; c < C; ++c) {
            size_t k = ((n * C + c) * H + y) * W + x;
            double pt = std::exp(T[i].cls.data()[k]) / zt;
            double ps = std::exp(S[i].cls.data()[k]) / zs;
            acc += pt * std::log(pt / ps);
          }
        }
    total += element_mean ? acc / double(N * H * W) : acc;
  }
  return total / (element_mean ? 3.0 : B * 3.0);
}

FpnLogits duplicate_batch(const FpnLogits& l) {
  FpnLogits out;
  for (size_t i = 0; i < 3; ++i) {
    const Tensor* src[3] = {&l[i].cls, &l[i].reg, &l[i].obj};
    Tensor* dst[3] = {&out[i].cls, &out[i].reg, &out[i].obj};
    for (size_t k = 0; k < 3; ++k) {
      Shape s = src[k]->shape();
      std::vector<double> v(src[k]->numel() * 2);
      std::copy(src[k]->data(), src[k]->data() + src[k]->numel(), v.begin());
      std::copy(src[k]->data(), src[k]->data() + src[k]->numel(),
                v.begin() + src[k]->numel());
      s[0] *= 2;
      *dst[k] = Tensor::from_data(s, std::move(v));
    }
    out[i].stride = l[i].stride;
  }
  return out;
}

ModelSpec tiny_spec(size_t input) {
  ModelSpec s;
  s.preset = "custom";
  s.width = 0.0625;
  s.depth = 0.33;
  s.in_channels = 1;
  s.num_classes = 2;
  s.input_size = input;
  return s;
}

Tensor sample_batch(const std::vector<data::Sample>& samples, size_t n) {
  size_t side = samples[0].image.width, hw = side * side;
  std::vector<double> v(n * hw);
  for (size_t b = 0; b < n; ++b)
    for (size_t i = 0; i < hw; ++i)
      v[b * hw + i] = double(samples[b % samples.size()].image.pixels[i]) / 255.0;
  return Tensor::from_data({n, 1, side, side}, std::move(v));
}

}  // namespace

TEST_CASE("transfer losses match scalar triple-loop references on tiny shapes") {
  std::mt19937_64 rng(41);
  FpnLogits S = rand_logits(rng, 2, 2, 4, 4.0);
  FpnLogits T = rand_logits(rng, 2, 2, 4, 4.0);
  for (bool em : {false, true}) {
    KdNorm norm = em ? KdNorm::element_mean : KdNorm::scale_sum;
    CHECK(kd_bbox_loss(S, T, norm).item() ==
          doctest::Approx(oracle_bbox(S, T, em)).epsilon(1e-9));
    CHECK(kd_obj_loss(S, T, norm).item() ==
          doctest::Approx(oracle_obj(S, T, em)).epsilon(1e-9));
    CHECK(kd_cls_loss(S, T, norm).item() ==
          doctest::Approx(oracle_cls(S, T, em)).epsilon(1e-9));
  }
}

TEST_CASE("student equal to teacher sits on the loss floors") {
  std::mt19937_64 rng(42);
  FpnLogits T = rand_logits(rng, 2, 3, 4, 3.0);
  CHECK(kd_bbox_loss(T, T).item() == 0.0);
  CHECK(std::abs(kd_cls_loss(T, T).item()) < 1e-12);
  // BCE floor: the mean binary entropy of the teacher probabilities
  double floor = 0;
  for (size_t i = 0; i < 3; ++i)
    for (size_t k = 0; k < T[i].obj.numel(); ++k) {
      double t = sigm(T[i].obj.data()[k]);
      floor -= t * std::log(t) + (1.0 - t) * std::log(1.0 - t);
    }
  floor /= 2.0 * 3.0;
  CHECK(kd_obj_loss(T, T).item() == doctest::Approx(floor).epsilon(1e-9));
}

TEST_CASE("each soft component is minimized at the teacher point") {
  std::mt19937_64 rng(43);
  FpnLogits T = rand_logits(rng, 1, 2, 2, 2.0);
  double b0 = kd_bbox_loss(T, T).item();
  double o0 = kd_obj_loss(T, T).item();
  double c0 = kd_cls_loss(T, T).item();
  for (int trial = 0; trial < 40; ++trial) {
    FpnLogits S = rand_logits(rng, 1, 2, 2, 2.0);
    CHECK(kd_bbox_loss(S, T).item() > b0);
    CHECK(kd_obj_loss(S, T).item() > o0);
    // KL can only detect differences in the per-cell distribution
    CHECK(kd_cls_loss(S, T).item() >= c0);
  }
}

TEST_CASE("two-class single-cell divergence matches the closed form") {
  // teacher logits (ln 2, 0) vs student (0, 0) on the 1x1 scale only
  FpnLogits S, T;
  for (size_t i = 0; i < 3; ++i) {
    size_t g = std::max<size_t>(4 >> i, 1);
    S[i].cls = Tensor::zeros({1, 2, g, g});
    T[i].cls = Tensor::zeros({1, 2, g, g});
    S[i].reg = Tensor::zeros({1, 4, g, g});
    T[i].reg = Tensor::zeros({1, 4, g, g});
    S[i].obj = Tensor::zeros({1, 1, g, g});
    T[i].obj = Tensor::zeros({1, 1, g, g});
    S[i].stride = model::kStrides[i];
    T[i].stride = model::kStrides[i];
  }
  T[2].cls.data()[0] = std::log(2.0);
  double expected = (2.0 / 3.0) * std::log(4.0 / 3.0) + (1.0 / 3.0) * std::log(2.0 / 3.0);
  CHECK(kd_cls_loss(S, T).item() == doctest::Approx(expected / 3.0).epsilon(1e-12));
}

TEST_CASE("class KL is invariant to per-cell shifts of student logits") {
  std::mt19937_64 rng(44);
  FpnLogits S = rand_logits(rng, 2, 3, 4, 3.0);
  FpnLogits T = rand_logits(rng, 2, 3, 4, 3.0);
  double base = kd_cls_loss(S, T).item();
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (size_t i = 0; i < 3; ++i) {
    const Shape& s = S[i].cls.shape();
    for (size_t n = 0; n < s[0]; ++n)
      for (size_t y = 0; y < s[2]; ++y)
        for (size_t x = 0; x < s[3]; ++x) {
          double c = u(rng);
          for (size_t ch = 0; ch < s[1]; ++ch)
            S[i].cls.data()[((n * s[1] + ch) * s[2] + y) * s[3] + x] += c;
        }
  }
  CHECK(kd_cls_loss(S, T).item() == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("duplicating every sample in the batch leaves all components unchanged") {
  std::mt19937_64 rng(45);
  FpnLogits S = rand_logits(rng, 1, 2, 4, 3.0);
  FpnLogits T = rand_logits(rng, 1, 2, 4, 3.0);
  FpnLogits S2 = duplicate_batch(S), T2 = duplicate_batch(T);
  for (bool em : {false, true}) {
    KdNorm norm = em ? KdNorm::element_mean : KdNorm::scale_sum;
    CHECK(kd_bbox_loss(S2, T2, norm).item() ==
          doctest::Approx(kd_bbox_loss(S, T, norm).item()).epsilon(1e-12));
    CHECK(kd_obj_loss(S2, T2, norm).item() ==
          doctest::Approx(kd_obj_loss(S, T, norm).item()).epsilon(1e-12));
    CHECK(kd_cls_loss(S2, T2, norm).item() ==
          doctest::Approx(kd_cls_loss(S, T, norm).item()).epsilon(1e-12));
  }
}

TEST_CASE("soft loss is the weighted component sum and rejects bad weights") {
  std::mt19937_64 rng(46);
  FpnLogits S = rand_logits(rng, 2, 2, 4, 3.0);
  FpnLogits T = rand_logits(rng, 2, 2, 4, 3.0);
  KDWeights w;
  w.bbox = 0.3;
  w.obj = 1.25;
  w.cls = 0.0;
  double expected = 0.3 * kd_bbox_loss(S, T).item() + 1.25 * kd_obj_loss(S, T).item();
  CHECK(soft_loss(S, T, w).item() == doctest::Approx(expected).epsilon(1e-12));

  KDWeights defaults;
  double half_each = 0.5 * (kd_bbox_loss(S, T).item() + kd_obj_loss(S, T).item() +
                            kd_cls_loss(S, T).item());
  CHECK(soft_loss(S, T, defaults).item() == doctest::Approx(half_each).epsilon(1e-12));

  KDWeights zero;
  zero.bbox = zero.obj = zero.cls = 0.0;
  CHECK(soft_loss(S, T, zero).item() == 0.0);

  KDWeights bad;
  bad.obj = -0.1;
  CHECK_THROWS_AS(soft_loss(S, T, bad), Error);
}

TEST_CASE("total loss combines hard and soft in both modes") {
  Tensor hard = Tensor::scalar(1.25);
  Tensor soft = Tensor::scalar(0.75);
  KDWeights w;
  CHECK(total_loss(hard, soft, w).item() == 2.0);

  w.mode = TotalMode::blend;
  w.blend_lambda = 1.0;
  CHECK(total_loss(hard, soft, w).item() == 1.25);
  w.blend_lambda = 0.0;
  CHECK(total_loss(hard, soft, w).item() == 0.75);
  w.blend_lambda = 0.5;
  CHECK(total_loss(hard, soft, w).item() == doctest::Approx(1.0).epsilon(1e-15));

  w.blend_lambda = 1.5;
  CHECK_THROWS_AS(total_loss(hard, soft, w), Error);
}

TEST_CASE("mismatched student/teacher shapes are rejected") {
  std::mt19937_64 rng(47);
  FpnLogits S = rand_logits(rng, 2, 2, 4, 3.0);
  FpnLogits T = rand_logits(rng, 2, 3, 4, 3.0);  // different class count
  CHECK_THROWS_AS(kd_cls_loss(S, T), Error);
  FpnLogits T2 = rand_logits(rng, 1, 2, 4, 3.0);  // different batch
  CHECK_THROWS_AS(kd_bbox_loss(S, T2), Error);
}

TEST_CASE("soft loss gradients agree with finite differences") {
  std::mt19937_64 rng(48);
  FpnLogits T = rand_logits(rng, 1, 2, 4, 2.0);
  std::vector<Tensor> inputs;
  FpnLogits proto = rand_logits(rng, 1, 2, 4, 1.5);
  for (size_t i = 0; i < 3; ++i) {
    inputs.push_back(proto[i].cls);
    inputs.push_back(proto[i].reg);
    inputs.push_back(proto[i].obj);
  }
  for (Tensor& t : inputs) t.set_requires_grad(true);
  auto f = [&](const std::vector<Tensor>& in) {
    FpnLogits S;
    for (size_t i = 0; i < 3; ++i) {
      S[i].cls = in[3 * i];
      S[i].reg = in[3 * i + 1];
      S[i].obj = in[3 * i + 2];
      S[i].stride = model::kStrides[i];
    }
    KDWeights w;
    return soft_loss(S, T, w);
  };
  GradCheckResult r = grad_check(f, inputs);
  CHECK(r.ok());
  CHECK(r.checked > 100);
}

TEST_CASE("box size picks the stride with the closest nominal scale") {
  CHECK(best_stride(20.0, 20.0) == 8);    // sqrt(wh)=20, nominal 32
  CHECK(best_stride(44.0, 44.0) == 8);    // below the 8/16 boundary at ~45.25
  CHECK(best_stride(46.0, 46.0) == 16);   // above it
  CHECK(best_stride(64.0, 64.0) == 16);   // exactly the 16 nominal
  CHECK(best_stride(90.0, 90.0) == 16);   // below the 16/32 boundary at ~90.51
  CHECK(best_stride(91.0, 91.0) == 32);   // above it
  CHECK(best_stride(200.0, 200.0) == 32);
  CHECK(best_stride(8.0, 128.0) == 8);    // aspect does not matter, only area
  CHECK_THROWS_AS(best_stride(0.0, 10.0), Error);
}

TEST_CASE("hard loss with no boxes is the all-negative objectness loss") {
  std::mt19937_64 rng(49);
  FpnLogits L = rand_logits(rng, 2, 2, 4, 2.0);
  double loss = hard_loss(L, {{}, {}}, 2, 32).item();
  double acc = 0;
  size_t cells = 0;
  for (size_t i = 0; i < 3; ++i)
    for (size_t k = 0; k < L[i].obj.numel(); ++k) {
      acc -= std::log(1.0 - sigm(L[i].obj.data()[k]));
      ++cells;
    }
  CHECK(loss == doctest::Approx(acc / double(cells)).epsilon(1e-12));
}

TEST_CASE("logits decoding exactly to the ground truth sit near zero loss") {
  FpnLogits L;
  for (size_t i = 0; i < 3; ++i) {
    size_t g = std::max<size_t>(4 >> i, 1);
    L[i].cls = Tensor::full({1, 2, g, g}, -25.0);
    L[i].reg = Tensor::zeros({1, 4, g, g});
    L[i].obj = Tensor::full({1, 1, g, g}, -25.0);
    L[i].stride = model::kStrides[i];
  }
  // GT 16x12 at (12, 20): stride 8, cell (gx=1, gy=2)
  GtBox gt{0, 12.0, 20.0, 16.0, 12.0};
  size_t gx = 1, gy = 2, g0 = 4;
  L[0].obj.data()[gy * g0 + gx] = 25.0;
  L[0].cls.data()[0 * g0 * g0 + gy * g0 + gx] = 25.0;  // class 0 on
  double* reg = L[0].reg.data();
  reg[0 * g0 * g0 + gy * g0 + gx] = 12.0 / 8.0 - double(gx);
  reg[1 * g0 * g0 + gy * g0 + gx] = 20.0 / 8.0 - double(gy);
  reg[2 * g0 * g0 + gy * g0 + gx] = std::log(16.0 / 8.0);
  reg[3 * g0 * g0 + gy * g0 + gx] = std::log(12.0 / 8.0);
  CHECK(hard_loss(L, {{gt}}, 2, 32).item() < 1e-3);
}

TEST_CASE("hard loss isolates the decoded-overlap term as one minus IoU") {
  FpnLogits L;
  for (size_t i = 0; i < 3; ++i) {
    size_t g = std::max<size_t>(4 >> i, 1);
    L[i].cls = Tensor::full({1, 1, g, g}, 30.0);
    L[i].reg = Tensor::zeros({1, 4, g, g});
    L[i].obj = Tensor::full({1, 1, g, g}, i == 0 ? -30.0 : -30.0);
    L[i].stride = model::kStrides[i];
  }
  GtBox gt{0, 18.0, 18.0, 20.0, 20.0};  // stride 8, cell (2,2)
  L[0].obj.data()[2 * 4 + 2] = 30.0;
  // zero reg decodes cell (2,2) to cx=cy=16, w=h=8
  double expect_iou = iou(16.0, 16.0, 8.0, 8.0, gt.cx, gt.cy, gt.w, gt.h);
  double obj_ref = 0;
  size_t cells = 0;
  for (size_t i = 0; i < 3; ++i)
    for (size_t k = 0; k < L[i].obj.numel(); ++k) {
      double p = std::clamp(sigm(L[i].obj.data()[k]), 1e-7, 1.0 - 1e-7);
      bool pos = i == 0 && k == 2 * 4 + 2;
      obj_ref -= pos ? std::log(p) : std::log(1.0 - p);
      ++cells;
    }
  obj_ref /= double(cells);
  double cls_ref = -std::log(1.0 - 1e-7);  // saturated positive, clamped
  double got = hard_loss(L, {{gt}}, 1, 32).item();
  CHECK(got == doctest::Approx(obj_ref + cls_ref + 1.0 - expect_iou).epsilon(1e-9));
}

TEST_CASE("a contested cell keeps its first box only") {
  std::mt19937_64 rng(50);
  FpnLogits L = rand_logits(rng, 1, 2, 4, 1.5);
  GtBox a{0, 16.5, 16.5, 20.0, 20.0};
  GtBox b{1, 17.0, 17.0, 22.0, 22.0};  // same stride-8 cell (2,2)
  double both = hard_loss(L, {{a, b}}, 2, 32).item();
  double first = hard_loss(L, {{a}}, 2, 32).item();
  CHECK(both == first);
  // ...but a second box in a different cell does change the loss
  GtBox c{1, 24.0, 24.0, 14.0, 14.0};
  CHECK(hard_loss(L, {{a, c}}, 2, 32).item() != first);
}

TEST_CASE("hard loss input validation") {
  std::mt19937_64 rng(51);
  FpnLogits L = rand_logits(rng, 1, 2, 4, 1.0);
  CHECK_THROWS_AS(hard_loss(L, {{}, {}}, 2, 32), Error);               // batch mismatch
  CHECK_THROWS_AS(hard_loss(L, {{GtBox{0, 2.0, 16.0, 8.0, 8.0}}}, 2, 32), Error);
  CHECK_THROWS_AS(hard_loss(L, {{GtBox{0, 16.0, 31.0, 8.0, 8.0}}}, 2, 32), Error);
  CHECK_THROWS_AS(hard_loss(L, {{GtBox{5, 16.0, 16.0, 8.0, 8.0}}}, 2, 32), Error);
  CHECK_THROWS_AS(hard_loss(L, {{GtBox{0, 16.0, 16.0, 0.0, 8.0}}}, 2, 32), Error);
  double ok = hard_loss(L, {{GtBox{0, 16.0, 16.0, 8.0, 8.0}}}, 2, 32).item();
  CHECK(std::isfinite(ok));
}

TEST_CASE("hard loss gradients agree with finite differences") {
  std::mt19937_64 rng(52);
  FpnLogits proto = rand_logits(rng, 1, 2, 4, 1.0);
  std::vector<Tensor> inputs;
  for (size_t i = 0; i < 3; ++i) {
    inputs.push_back(proto[i].cls);
    inputs.push_back(proto[i].reg);
    inputs.push_back(proto[i].obj);
  }
  for (Tensor& t : inputs) t.set_requires_grad(true);
  GtBox gt{0, 17.0, 15.0, 14.0, 18.0};  // overlaps the decoded cell box robustly
  auto f = [&](const std::vector<Tensor>& in) {
    FpnLogits L;
    for (size_t i = 0; i < 3; ++i) {
      L[i].cls = in[3 * i];
      L[i].reg = in[3 * i + 1];
      L[i].obj = in[3 * i + 2];
      L[i].stride = model::kStrides[i];
    }
    return hard_loss(L, {{gt}}, 2, 32);
  };
  GradCheckResult r = grad_check(f, inputs);
  CHECK(r.ok());
  CHECK(r.checked > 100);
}

TEST_CASE("logit contract hash tracks input geometry, not model size") {
  ModelSpec a = tiny_spec(32);
  ModelSpec b = tiny_spec(32);
  b.width = 1.0;
  b.depth = 1.0;
  b.preset = "custom";
  CHECK(logit_contract_hash(a) == logit_contract_hash(b));
  ModelSpec c = tiny_spec(64);
  CHECK(logit_contract_hash(a) != logit_contract_hash(c));
  ModelSpec d = tiny_spec(32);
  d.num_classes = 5;
  CHECK(logit_contract_hash(a) != logit_contract_hash(d));
}

TEST_CASE("teacher logit dump and load round trip at 32-bit precision") {
  TempDir tmp;
  auto samples = data::synth_sonar(60, 4, 32, 0.75);
  model::Model teacher = model::build_model(tiny_spec(32), 7);

  CHECK_THROWS_AS(dump_teacher_logits(teacher, samples, tmp.sub("early")), Error);

  model::calibrate(teacher, sample_batch(samples, 4));
  dump_teacher_logits(teacher, samples, tmp.sub("store"));
  LogitStore store = open_logit_store(tmp.sub("store"));
  CHECK(store.files.size() == samples.size());
  CHECK(store.hash == logit_contract_hash(teacher.spec));

  NoGradGuard ng;
  for (const data::Sample& s : samples) {
    io::LogitRecord rec = load_teacher_logits(store, s.id);
    REQUIRE(rec.maps.size() == 9);
    FpnLogits fresh = model::forward(teacher, img::to_tensor(s.image));
    for (size_t i = 0; i < 3; ++i) {
      const Tensor* ref[3] = {&fresh[i].cls, &fresh[i].reg, &fresh[i].obj};
      for (size_t k = 0; k < 3; ++k) {
        const Tensor& m = rec.maps[3 * i + k];
        REQUIRE(m.shape() == ref[k]->shape());
        for (size_t e = 0; e < m.numel(); ++e)
          CHECK(m.data()[e] == double(float(ref[k]->data()[e])));
      }
    }
  }

  // a record used as both sides of the transfer loss sits exactly on the floor
  {
    io::LogitRecord rec = load_teacher_logits(store, samples[0].id);
    FpnLogits self;
    for (size_t i = 0; i < 3; ++i) {
      self[i].cls = rec.maps[3 * i];
      self[i].reg = rec.maps[3 * i + 1];
      self[i].obj = rec.maps[3 * i + 2];
      self[i].stride = model::kStrides[i];
    }
    CHECK(kd_bbox_loss(self, self).item() == 0.0);
    CHECK(std::abs(kd_cls_loss(self, self).item()) < 1e-12);
    double entropy = 0;
    for (size_t i = 0; i < 3; ++i)
      for (size_t k = 0; k < self[i].obj.numel(); ++k) {
        double t = sigm(self[i].obj.data()[k]);
        entropy -= t * std::log(t) + (1.0 - t) * std::log(1.0 - t);
      }
    CHECK(kd_obj_loss(self, self).item() == doctest::Approx(entropy / 3.0).epsilon(1e-9));
  }

  CHECK_THROWS_AS(load_teacher_logits(store, "no_such_image"), Error);

  LogitStore tampered = store;
  tampered.hash[0] ^= 0x40;
  try {
    load_teacher_logits(tampered, samples[0].id);
    FAIL("tampered contract hash must be rejected");
  } catch (const Error& e) {
    CHECK(e.code() == "spec_hash_mismatch");
  }
}

TEST_CASE("dump rejects wrong image sizes and duplicate ids") {
  TempDir tmp;
  auto samples = data::synth_sonar(61, 2, 32, 1.0);
  model::Model teacher = model::build_model(tiny_spec(32), 8);
  model::calibrate(teacher, sample_batch(samples, 2));

  auto wrong = data::synth_sonar(62, 1, 64, 1.0);
  CHECK_THROWS_AS(dump_teacher_logits(teacher, wrong, tmp.sub("a")), Error);

  auto dup = samples;
  dup.push_back(samples[0]);
  CHECK_THROWS_AS(dump_teacher_logits(teacher, dup, tmp.sub("b")), Error);
}

TEST_CASE("plain training runs, logs every iteration and stays deterministic") {
  auto samples = data::synth_sonar(63, 6, 32, 0.7);
  TrainConfig cfg;
  cfg.iters = 6;
  cfg.batch_size = 2;
  cfg.seed = 5;
  cfg.calib_samples = 6;

  TempDir tmp;
  std::string first_ck;
  std::vector<IterLog> first_curve;
  for (int run = 0; run < 2; ++run) {
    model::Model m = model::build_model(tiny_spec(32), 11);
    auto curve = train(m, samples, cfg);
    REQUIRE(curve.size() == cfg.iters);
    for (size_t i = 0; i < curve.size(); ++i) {
      CHECK(curve[i].iter == i);
      CHECK(std::isfinite(curve[i].total));
      CHECK(curve[i].total == curve[i].hard);  // no distillation => no soft part
      CHECK(curve[i].soft == 0.0);
    }
    std::string ck = (tmp.path / ("run" + std::to_string(run) + ".ckpt")).string();
    model::save_model(ck, m);
    std::ifstream in(ck, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (run == 0) {
      first_ck = bytes;
      first_curve = curve;
    } else {
      CHECK(bytes == first_ck);  // identical seeds give identical checkpoints
      for (size_t i = 0; i < curve.size(); ++i) CHECK(curve[i].total == first_curve[i].total);
    }
  }
}

TEST_CASE("a student sharing the teacher's weights starts far closer to it") {
  TempDir tmp;
  auto samples = data::synth_sonar(64, 5, 32, 0.8);
  model::Model teacher = model::build_model(tiny_spec(32), 21);
  model::calibrate(teacher, sample_batch(samples, 5));
  dump_teacher_logits(teacher, samples, tmp.sub("store"));
  LogitStore store = open_logit_store(tmp.sub("store"));

  std::string ck = tmp.sub("teacher.ckpt");
  model::save_model(ck, teacher);

  KdSource kd;
  kd.store = &store;
  TrainConfig cfg;
  cfg.iters = 1;
  cfg.batch_size = 2;
  cfg.seed = 3;

  // same weights: the statistics refresh uses the same leading samples the
  // teacher was calibrated on, so the only gap to the stored logits is the
  // 32-bit quantization of the records
  model::Model same = model::load_model(ck);
  auto curve_same = train(same, samples, cfg, &kd);
  // fresh weights, identical batches: a genuinely different student
  model::Model fresh = model::build_model(tiny_spec(32), 909);
  auto curve_fresh = train(fresh, samples, cfg, &kd);

  REQUIRE(curve_same.size() == 1);
  REQUIRE(curve_fresh.size() == 1);
  CHECK(curve_same[0].kd_bbox < 1e-9);
  CHECK(curve_same[0].kd_cls < 1e-9);
  CHECK(curve_fresh[0].kd_bbox > 1e-3);
  CHECK(curve_fresh[0].kd_cls > 1e-6);
  CHECK(curve_same[0].kd_obj > 0.0);  // BCE floor: the teacher's own entropy
  CHECK(curve_same[0].soft > 0.0);
  CHECK(curve_same[0].total ==
        doctest::Approx(curve_same[0].hard + curve_same[0].soft).epsilon(1e-12));
}

TEST_CASE("offline training demands a record for every sample") {
  TempDir tmp;
  auto samples = data::synth_sonar(65, 4, 32, 0.6);
  model::Model teacher = model::build_model(tiny_spec(32), 22);
  model::calibrate(teacher, sample_batch(samples, 4));
  std::vector<data::Sample> subset(samples.begin(), samples.end() - 1);
  dump_teacher_logits(teacher, subset, tmp.sub("store"));
  LogitStore store = open_logit_store(tmp.sub("store"));

  model::Model student = model::build_model(tiny_spec(32), 23);
  KdSource kd;
  kd.store = &store;
  TrainConfig cfg;
  cfg.iters = 1;
  try {
    train(student, samples, cfg, &kd);
    FAIL("missing record must abort before training");
  } catch (const Error& e) {
    CHECK(e.code() == "io");
    CHECK(e.context() == samples.back().id);
  }
}

TEST_CASE("online distillation works against a live teacher") {
  auto samples = data::synth_sonar(66, 4, 32, 0.7);
  model::Model teacher = model::build_model(tiny_spec(32), 24);
  model::calibrate(teacher, sample_batch(samples, 4));
  model::Model student = model::build_model(tiny_spec(32), 25);

  KdSource kd;
  kd.online_teacher = &teacher;
  TrainConfig cfg;
  cfg.iters = 2;
  cfg.batch_size = 2;
  auto curve = train(student, samples, cfg, &kd);
  REQUIRE(curve.size() == 2);
  CHECK(curve[0].soft > 0.0);
  CHECK(std::isfinite(curve[1].total));
}

TEST_CASE("training argument validation") {
  auto samples = data::synth_sonar(67, 2, 32, 0.5);
  model::Model m = model::build_model(tiny_spec(32), 26);
  TrainConfig cfg;
  cfg.iters = 1;

  CHECK_THROWS_AS(train(m, {}, cfg), Error);

  TrainConfig zero = cfg;
  zero.batch_size = 0;
  CHECK_THROWS_AS(train(m, samples, zero), Error);

  KdSource empty;  // neither a store nor a live teacher
  CHECK_THROWS_AS(train(m, samples, cfg, &empty), Error);

  auto big = data::synth_sonar(68, 1, 64, 0.5);
  CHECK_THROWS_AS(train(m, big, cfg), Error);
}

TEST_CASE("non-finite activations abort training with a divergence diagnostic") {
  auto samples = data::synth_sonar(69, 3, 32, 0.8);
  model::Model m = model::build_model(tiny_spec(32), 27);
  m.params.entries()[0].second.data()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.iters = 3;
  try {
    train(m, samples, cfg);
    FAIL("a poisoned weight must surface as divergence");
  } catch (const Error& e) {
    CHECK(e.code() == "non_finite");
  }
}
