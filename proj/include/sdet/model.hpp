#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdet/params.hpp"
#include "sdet/serialize.hpp"
#include "sdet/tensor.hpp"
#include "sdet/vit.hpp"

namespace sdet::model {

// Anchor-free single-stage detector: Focus stem, CSP backbone with an SPP
// bottleneck, an optional transformer block on the deepest map, a PAFPN neck
// and decoupled heads at strides 8/16/32.

inline constexpr std::array<size_t, 3> kStrides{8, 16, 32};

struct ModelSpec {
  std::string preset = "nano";  // "nano", "l" or "custom"
  double width = 0.25;
  double depth = 0.33;
  size_t in_channels = 1;
  size_t num_classes = 1;
  size_t input_size = 256;  // square, multiple of 32
  bool use_vit = true;
  size_t vit_heads = 4;
  size_t vit_depth = 1;
  size_t vit_patch = 1;
  double vit_ffn_ratio = 2.0;
};

// Fills width/depth for the named preset, keeps other fields at defaults.
ModelSpec spec_preset(const std::string& name);
nlohmann::json spec_to_json(const ModelSpec& s);
ModelSpec spec_from_json(const nlohmann::json& j);
// SHA-256 of the canonical (sorted-key) spec JSON; identifies a teacher.
io::SpecHash spec_hash(const ModelSpec& s);

// conv + per-channel affine + SiLU. mu/sigma hold the normalization
// statistics; a stats pass overwrites them from the current batch, any other
// pass reads them as frozen constants.
struct ConvBlock {
  Tensor w;
  Tensor gamma, beta;
  Tensor mu, sigma;
  size_t stride = 1, pad = 0;

  Tensor fwd(const Tensor& x, bool calibrate) const;
};

struct RawConv {  // prediction layer: conv + bias, no norm, no activation
  Tensor w, b;

  Tensor fwd(const Tensor& x) const;
};

struct Bottleneck {
  ConvBlock c1, c2;
  bool shortcut = true;

  Tensor fwd(const Tensor& x, bool calibrate) const;
};

struct CspLayer {
  ConvBlock main, side, merge;
  std::vector<Bottleneck> blocks;

  Tensor fwd(const Tensor& x, bool calibrate) const;
};

struct SppLayer {
  ConvBlock pre, post;
  std::array<size_t, 3> pools{5, 9, 13};

  Tensor fwd(const Tensor& x, bool calibrate) const;
};

struct Head {
  ConvBlock stem, cls1, cls2, reg1, reg2;
  RawConv cls_pred, reg_pred, obj_pred;
};

struct LevelLogits {
  Tensor cls;  // [N, num_classes, H, W]
  Tensor reg;  // [N, 4, H, W]
  Tensor obj;  // [N, 1, H, W]
  size_t stride = 0;
};

using FpnLogits = std::array<LevelLogits, 3>;

struct Model {
  ModelSpec spec;
  uint64_t seed = 0;
  bool calibrated = false;
  ParamStore params;

  ConvBlock stem;
  ConvBlock down2;
  CspLayer csp2;
  ConvBlock down3;
  CspLayer csp3;
  ConvBlock down4;
  CspLayer csp4;
  ConvBlock down5;
  SppLayer spp;
  CspLayer csp5;
  std::optional<vit::ViTBlock> vitblk;

  ConvBlock lateral0;
  CspLayer fpn_p4;
  ConvBlock reduce1;
  CspLayer fpn_p3;
  ConvBlock down_p3;
  CspLayer pan_n3;
  ConvBlock down_p4;
  CspLayer pan_n4;

  std::array<Head, 3> heads;
};

// Channel widths per stage after the width multiplier (stem .. dark5).
std::array<size_t, 5> stage_channels(const ModelSpec& s);
// Repeat counts for the four backbone CSP stages after the depth multiplier.
std::array<size_t, 4> stage_depths(const ModelSpec& s);

Model build_model(const ModelSpec& spec, uint64_t seed);

// x: [N, in_channels, S, S] with S a multiple of 32 (== spec.input_size when
// the transformer block is enabled). batch_stats recomputes the affine
// statistics from this batch (as constants, outside the gradient graph) and
// stores them in the buffers; calibrate() uses it to freeze statistics for a
// reference batch, and every other pass reads the frozen buffers.
FpnLogits forward(Model& m, const Tensor& x, bool batch_stats = false);
void calibrate(Model& m, const Tensor& batch);

void save_model(const std::string& path, const Model& m);
Model load_model(const std::string& path);

}  // namespace sdet::model
