#include "sdet/model.hpp"

#include <cmath>

#include "sdet/ops.hpp"

namespace sdet::model {

namespace {

constexpr std::array<size_t, 5> kBaseChannels{64, 128, 256, 512, 1024};
constexpr std::array<size_t, 4> kBaseDepths{3, 9, 9, 3};
constexpr double kSigmaFloor = 1e-3;
// A channel whose calibration variance collapses (tiny batch, deep 1x1 maps)
// must not turn the affine into a huge amplifier; clamp against the layer's
// typical channel spread.
constexpr double kSigmaRelFloor = 0.05;
constexpr double kObjBiasInit = -2.0;  // background prior at init

size_t scaled_channels(size_t base, double width) {
  auto c = size_t(std::lround(double(base) * width));
  return std::max<size_t>(c, 1);
}

size_t scaled_depth(size_t base, double depth) {
  auto d = size_t(std::lround(double(base) * depth));
  return std::max<size_t>(d, 1);
}

}  // namespace

std::array<size_t, 5> stage_channels(const ModelSpec& s) {
  std::array<size_t, 5> out{};
  for (size_t i = 0; i < 5; ++i) out[i] = scaled_channels(kBaseChannels[i], s.width);
  return out;
}

std::array<size_t, 4> stage_depths(const ModelSpec& s) {
  std::array<size_t, 4> out{};
  for (size_t i = 0; i < 4; ++i) out[i] = scaled_depth(kBaseDepths[i], s.depth);
  return out;
}

ModelSpec spec_preset(const std::string& name) {
  ModelSpec s;
  s.preset = name;
  if (name == "nano") {
    s.width = 0.25;
    s.depth = 0.33;
  } else if (name == "l") {
    s.width = 1.0;
    s.depth = 1.0;
  } else {
    fail("bad_argument", "unknown preset (use nano, l or custom)", name);
  }
  return s;
}

nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"preset", s.preset},
          {"width", s.width},
          {"depth", s.depth},
          {"in_channels", s.in_channels},
          {"num_classes", s.num_classes},
          {"input_size", s.input_size},
          {"use_vit", s.use_vit},
          {"vit_heads", s.vit_heads},
          {"vit_depth", s.vit_depth},
          {"vit_patch", s.vit_patch},
          {"vit_ffn_ratio", s.vit_ffn_ratio}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.preset = j.at("preset").get<std::string>();
  s.width = j.at("width").get<double>();
  s.depth = j.at("depth").get<double>();
  s.in_channels = j.at("in_channels").get<size_t>();
  s.num_classes = j.at("num_classes").get<size_t>();
  s.input_size = j.at("input_size").get<size_t>();
  s.use_vit = j.at("use_vit").get<bool>();
  s.vit_heads = j.at("vit_heads").get<size_t>();
  s.vit_depth = j.at("vit_depth").get<size_t>();
  s.vit_patch = j.at("vit_patch").get<size_t>();
  s.vit_ffn_ratio = j.at("vit_ffn_ratio").get<double>();
  return s;
}

io::SpecHash spec_hash(const ModelSpec& s) {
  // nlohmann::json objects keep keys sorted, so dump() is canonical
  return io::sha256(spec_to_json(s).dump());
}

Tensor ConvBlock::fwd(const Tensor& x, bool calibrate) const {
  Tensor y = conv2d(x, w, stride, pad);
  if (calibrate) {
    size_t n = y.dim(0), c = y.dim(1), area = y.dim(2) * y.dim(3);
    std::vector<double>& mu_v = mu.node()->value;
    std::vector<double>& sg_v = sigma.node()->value;
    const double* p = y.data();
    double std_sum = 0;
    for (size_t ch = 0; ch < c; ++ch) {
      double sum = 0, sq = 0;
      for (size_t b = 0; b < n; ++b) {
        const double* row = p + (b * c + ch) * area;
        for (size_t i = 0; i < area; ++i) {
          sum += row[i];
          sq += row[i] * row[i];
        }
      }
      double cnt = double(n * area);
      double mean = sum / cnt;
      double var = std::max(sq / cnt - mean * mean, 0.0);
      mu_v[ch] = mean;
      sg_v[ch] = std::sqrt(var);
      std_sum += sg_v[ch];
    }
    double floor = std::max(kSigmaFloor, kSigmaRelFloor * std_sum / double(c));
    for (size_t ch = 0; ch < c; ++ch) sg_v[ch] = std::max(sg_v[ch], floor);
  }
  y = channel_affine(y, gamma, beta, mu.vec(), sigma.vec());
  return silu(y);
}

Tensor RawConv::fwd(const Tensor& x) const {
  return add_channel_bias(conv2d(x, w, 1, 0), b);
}

Tensor Bottleneck::fwd(const Tensor& x, bool calibrate) const {
  Tensor y = c2.fwd(c1.fwd(x, calibrate), calibrate);
  return shortcut ? add(x, y) : y;
}

Tensor CspLayer::fwd(const Tensor& x, bool calibrate) const {
  Tensor a = main.fwd(x, calibrate);
  for (const Bottleneck& b : blocks) a = b.fwd(a, calibrate);
  Tensor s = side.fwd(x, calibrate);
  return merge.fwd(concat({a, s}, 1), calibrate);
}

Tensor SppLayer::fwd(const Tensor& x, bool calibrate) const {
  Tensor t = pre.fwd(x, calibrate);
  std::vector<Tensor> parts{t};
  for (size_t k : pools) parts.push_back(maxpool2d(t, k));
  return post.fwd(concat(parts, 1), calibrate);
}

namespace {

struct Builder {
  std::mt19937_64 rng;
  ParamStore* params;

  ConvBlock conv_block(const std::string& name, size_t ic, size_t oc, size_t k,
                       size_t stride) {
    double stddev = std::sqrt(2.0 / double(ic * k * k));
    ConvBlock cb;
    cb.w = params->add(name + ".w", Tensor::randn({oc, ic, k, k}, rng, stddev));
    cb.gamma = params->add(name + ".g", Tensor::full({oc}, 1.0));
    cb.beta = params->add(name + ".b", Tensor::zeros({oc}));
    cb.mu = params->add_buffer(name + ".mu", Tensor::zeros({oc}));
    cb.sigma = params->add_buffer(name + ".sigma", Tensor::full({oc}, 1.0));
    cb.stride = stride;
    cb.pad = (k - 1) / 2;
    return cb;
  }

  RawConv raw_conv(const std::string& name, size_t ic, size_t oc, double bias_init) {
    double stddev = std::sqrt(2.0 / double(ic));
    RawConv rc;
    rc.w = params->add(name + ".w", Tensor::randn({oc, ic, 1, 1}, rng, stddev));
    rc.b = params->add(name + ".b", Tensor::full({oc}, bias_init));
    return rc;
  }

  Bottleneck bottleneck(const std::string& name, size_t c, bool shortcut) {
    Bottleneck b;
    b.c1 = conv_block(name + ".c1", c, c, 1, 1);
    b.c2 = conv_block(name + ".c2", c, c, 3, 1);
    b.shortcut = shortcut;
    return b;
  }

  CspLayer csp(const std::string& name, size_t ic, size_t oc, size_t n, bool shortcut) {
    size_t hidden = std::max<size_t>(oc / 2, 1);
    CspLayer l;
    l.main = conv_block(name + ".main", ic, hidden, 1, 1);
    l.side = conv_block(name + ".side", ic, hidden, 1, 1);
    for (size_t i = 0; i < n; ++i)
      l.blocks.push_back(bottleneck(name + ".m" + std::to_string(i), hidden, shortcut));
    l.merge = conv_block(name + ".merge", 2 * hidden, oc, 1, 1);
    return l;
  }

  SppLayer spp(const std::string& name, size_t c) {
    size_t hidden = std::max<size_t>(c / 2, 1);
    SppLayer l;
    l.pre = conv_block(name + ".pre", c, hidden, 1, 1);
    l.post = conv_block(name + ".post", 4 * hidden, c, 1, 1);
    return l;
  }

  Head head(const std::string& name, size_t ic, size_t hidden, size_t classes) {
    Head h;
    h.stem = conv_block(name + ".stem", ic, hidden, 1, 1);
    h.cls1 = conv_block(name + ".cls1", hidden, hidden, 3, 1);
    h.cls2 = conv_block(name + ".cls2", hidden, hidden, 3, 1);
    h.reg1 = conv_block(name + ".reg1", hidden, hidden, 3, 1);
    h.reg2 = conv_block(name + ".reg2", hidden, hidden, 3, 1);
    h.cls_pred = raw_conv(name + ".cls_pred", hidden, classes, 0.0);
    h.reg_pred = raw_conv(name + ".reg_pred", hidden, 4, 0.0);
    h.obj_pred = raw_conv(name + ".obj_pred", hidden, 1, kObjBiasInit);
    return h;
  }
};

void validate_spec(const ModelSpec& s) {
  if (s.width <= 0 || s.depth <= 0) fail("bad_argument", "multipliers must be positive");
  if (s.num_classes < 1) fail("bad_argument", "need at least one class");
  if (s.in_channels < 1) fail("bad_argument", "need at least one input channel");
  if (s.input_size == 0 || s.input_size % 32)
    fail("bad_argument", "input size must be a positive multiple of 32");
}

}  // namespace

Model build_model(const ModelSpec& spec, uint64_t seed) {
  validate_spec(spec);
  Model m;
  m.spec = spec;
  m.seed = seed;
  Builder b{std::mt19937_64(seed), &m.params};
  auto ch = stage_channels(spec);
  auto dep = stage_depths(spec);

  m.stem = b.conv_block("stem", spec.in_channels * 4, ch[0], 3, 1);
  m.down2 = b.conv_block("dark2.down", ch[0], ch[1], 3, 2);
  m.csp2 = b.csp("dark2.csp", ch[1], ch[1], dep[0], true);
  m.down3 = b.conv_block("dark3.down", ch[1], ch[2], 3, 2);
  m.csp3 = b.csp("dark3.csp", ch[2], ch[2], dep[1], true);
  m.down4 = b.conv_block("dark4.down", ch[2], ch[3], 3, 2);
  m.csp4 = b.csp("dark4.csp", ch[3], ch[3], dep[2], true);
  m.down5 = b.conv_block("dark5.down", ch[3], ch[4], 3, 2);
  m.spp = b.spp("dark5.spp", ch[4]);
  m.csp5 = b.csp("dark5.csp", ch[4], ch[4], dep[3], false);

  if (spec.use_vit) {
    size_t cells = spec.input_size / 32;
    vit::ViTConfig vc{spec.vit_patch, spec.vit_heads, spec.vit_depth, spec.vit_ffn_ratio};
    m.vitblk = vit::make_vit_block(ch[4], cells * cells, vc, b.rng, m.params, "vit");
  }

  m.lateral0 = b.conv_block("neck.lateral0", ch[4], ch[3], 1, 1);
  m.fpn_p4 = b.csp("neck.fpn_p4", 2 * ch[3], ch[3], dep[3], false);
  m.reduce1 = b.conv_block("neck.reduce1", ch[3], ch[2], 1, 1);
  m.fpn_p3 = b.csp("neck.fpn_p3", 2 * ch[2], ch[2], dep[3], false);
  m.down_p3 = b.conv_block("neck.down_p3", ch[2], ch[2], 3, 2);
  m.pan_n3 = b.csp("neck.pan_n3", 2 * ch[2], ch[3], dep[3], false);
  m.down_p4 = b.conv_block("neck.down_p4", ch[3], ch[3], 3, 2);
  m.pan_n4 = b.csp("neck.pan_n4", 2 * ch[3], ch[4], dep[3], false);

  size_t head_hidden = scaled_channels(256, spec.width);
  std::array<size_t, 3> head_in{ch[2], ch[3], ch[4]};
  for (size_t i = 0; i < 3; ++i)
    m.heads[i] = b.head("head" + std::to_string(i), head_in[i], head_hidden,
                        spec.num_classes);
  return m;
}

FpnLogits forward(Model& m, const Tensor& x, bool batch_stats) {
  if (x.rank() != 4 || x.dim(1) != m.spec.in_channels)
    fail("bad_shape", "expected [N, in_channels, H, W] input", shape_str(x.shape()));
  size_t h = x.dim(2), w = x.dim(3);
  if (h != w || h % 32 || h < 32)
    fail("bad_shape", "input must be square with side a multiple of 32",
         shape_str(x.shape()));
  if (m.vitblk && h != m.spec.input_size)
    fail("bad_shape", "transformer token table is sized for the spec input size",
         shape_str(x.shape()));

  bool cal = batch_stats;
  Tensor t = m.stem.fwd(space_to_depth(x, 2), cal);
  t = m.csp2.fwd(m.down2.fwd(t, cal), cal);
  Tensor c3 = m.csp3.fwd(m.down3.fwd(t, cal), cal);
  Tensor c4 = m.csp4.fwd(m.down4.fwd(c3, cal), cal);
  Tensor c5 = m.csp5.fwd(m.spp.fwd(m.down5.fwd(c4, cal), cal), cal);
  if (m.vitblk) c5 = vit::vit_forward(*m.vitblk, c5);

  Tensor lat = m.lateral0.fwd(c5, cal);
  Tensor f4 = m.fpn_p4.fwd(concat({upsample_nearest2x(lat), c4}, 1), cal);
  Tensor red = m.reduce1.fwd(f4, cal);
  Tensor out3 = m.fpn_p3.fwd(concat({upsample_nearest2x(red), c3}, 1), cal);
  Tensor out4 = m.pan_n3.fwd(concat({m.down_p3.fwd(out3, cal), red}, 1), cal);
  Tensor out5 = m.pan_n4.fwd(concat({m.down_p4.fwd(out4, cal), lat}, 1), cal);

  FpnLogits logits;
  std::array<Tensor, 3> feats{out3, out4, out5};
  for (size_t i = 0; i < 3; ++i) {
    const Head& hd = m.heads[i];
    Tensor s = hd.stem.fwd(feats[i], cal);
    Tensor cf = hd.cls2.fwd(hd.cls1.fwd(s, cal), cal);
    Tensor rf = hd.reg2.fwd(hd.reg1.fwd(s, cal), cal);
    logits[i].cls = hd.cls_pred.fwd(cf);
    logits[i].reg = hd.reg_pred.fwd(rf);
    logits[i].obj = hd.obj_pred.fwd(rf);
    logits[i].stride = kStrides[i];
  }
  return logits;
}

void calibrate(Model& m, const Tensor& batch) {
  NoGradGuard ng;
  forward(m, batch, true);
  m.calibrated = true;
}

void save_model(const std::string& path, const Model& m) {
  io::Checkpoint ck;
  ck.manifest = {{"format", io::kCheckpointVersion},
                 {"kind", "detector"},
                 {"spec", spec_to_json(m.spec)},
                 {"seed", m.seed},
                 {"calibrated", m.calibrated}};
  ck.tensors = m.params.entries();
  io::save_checkpoint(path, ck);
}

Model load_model(const std::string& path) {
  io::Checkpoint ck = io::load_checkpoint(path);
  if (!ck.manifest.contains("spec") || ck.manifest.value("kind", "") != "detector")
    fail("format", "not a detector checkpoint", path);
  ModelSpec spec = spec_from_json(ck.manifest.at("spec"));
  Model m = build_model(spec, ck.manifest.value("seed", uint64_t(0)));
  auto& dst = m.params.entries();
  if (dst.size() != ck.tensors.size())
    fail("format", "checkpoint tensor count does not match the spec", path);
  for (size_t i = 0; i < dst.size(); ++i) {
    auto& [want_name, t] = dst[i];
    auto& [got_name, src] = ck.tensors[i];
    if (want_name != got_name || t.shape() != src.shape())
      fail("format", "checkpoint layout mismatch at " + want_name, path);
    t.vec() = src.vec();
  }
  m.calibrated = ck.manifest.value("calibrated", false);
  return m;
}

}  // namespace sdet::model
