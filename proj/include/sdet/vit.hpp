#pragma once

#include <random>
#include <string>
#include <vector>

#include "sdet/params.hpp"
#include "sdet/tensor.hpp"

namespace sdet::vit {

// Transformer encoder block operating on a [N,C,H,W] feature map. With
// patch == 1 every spatial cell becomes one token of width C, so no patch
// projection is needed and the output maps back onto the same grid.

struct ViTConfig {
  size_t patch = 1;
  size_t heads = 4;
  size_t depth = 1;        // encoder layers
  double ffn_ratio = 2.0;  // hidden width / token width
};

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

Tensor linear(const Linear& l, const Tensor& x);

struct EncoderLayer {
  Linear wq, wk, wv, wo;
  Tensor ln1_g, ln1_b;  // after the attention residual
  Linear ffn1, ffn2;
  Tensor ln2_g, ln2_b;  // after the FFN residual
};

struct ViTBlock {
  ViTConfig cfg;
  size_t channels = 0;
  size_t tokens = 0;
  Tensor pos;  // [T, C], learnable, zero-init
  std::vector<EncoderLayer> layers;
};

// [N,C,H,W] -> [N, T, C*patch^2] tokens; each patch is flattened in
// (dy, dx, channel) order, i.e. HWC within the patch.
Tensor patchify(const Tensor& x, size_t patch);

// Scaled dot-product attention for one head batch: q,k,v are [B, T, d].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Multi-head self-attention over tokens [N, T, D]; D % heads == 0.
Tensor mhsa(const EncoderLayer& l, const Tensor& x, size_t heads);

// Post-norm residual encoder: LN(x + MHSA(x)), then LN(y + FFN(y)).
Tensor encoder_layer(const EncoderLayer& l, const Tensor& x, size_t heads);

ViTBlock make_vit_block(size_t channels, size_t tokens, const ViTConfig& cfg,
                        std::mt19937_64& rng, ParamStore& params, const std::string& prefix);

// Full block: patchify, add positional embedding, run the encoder stack and
// fold tokens back to [N,C,H,W]. Requires cfg.patch == 1.
Tensor vit_forward(const ViTBlock& v, const Tensor& x);

}  // namespace sdet::vit
