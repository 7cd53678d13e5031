#include "sdet/vit.hpp"

#include <cmath>

#include "sdet/ops.hpp"

namespace sdet::vit {

Tensor linear(const Linear& l, const Tensor& x) {
  return add_row_bias(matmul(x, l.w), l.b);
}

Tensor patchify(const Tensor& x, size_t patch) {
  if (x.rank() != 4) fail("bad_shape", "patchify expects [N,C,H,W]", shape_str(x.shape()));
  size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (patch == 0 || h % patch || w % patch)
    fail("bad_shape", "patch must divide the spatial extent", shape_str(x.shape()));
  Tensor grid = patch == 1 ? x : space_to_depth(x, patch);
  size_t d = c * patch * patch;
  size_t t = (h / patch) * (w / patch);
  // [N, D, Ht, Wt] -> [N, T, D]
  return permute(reshape(grid, {n, d, t}), {0, 2, 1});
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    fail("bad_shape", "attention expects [B,T,d] inputs");
  size_t d = q.dim(2);
  Tensor scores = matmul(q, permute(k, {0, 2, 1}));           // [B, T, T]
  scores = mul_scalar(scores, 1.0 / std::sqrt(double(d)));
  return matmul(softmax(scores, 2), v);                       // [B, T, d]
}

Tensor mhsa(const EncoderLayer& l, const Tensor& x, size_t heads) {
  size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads)
    fail("bad_shape", "token width must split across heads", shape_str(x.shape()));
  size_t dh = d / heads;
  auto split = [&](const Tensor& proj) {
    // [N, T, D] -> [N*heads, T, dh]
    return reshape(permute(reshape(proj, {n, t, heads, dh}), {0, 2, 1, 3}), {n * heads, t, dh});
  };
  Tensor out = attention(split(linear(l.wq, x)), split(linear(l.wk, x)), split(linear(l.wv, x)));
  out = reshape(permute(reshape(out, {n, heads, t, dh}), {0, 2, 1, 3}), {n, t, d});
  return linear(l.wo, out);
}

Tensor encoder_layer(const EncoderLayer& l, const Tensor& x, size_t heads) {
  Tensor y = layer_norm(add(x, mhsa(l, x, heads)), l.ln1_g, l.ln1_b);
  Tensor f = linear(l.ffn2, gelu(linear(l.ffn1, y)));
  return layer_norm(add(y, f), l.ln2_g, l.ln2_b);
}

namespace {

Linear make_linear(size_t in, size_t out, std::mt19937_64& rng, ParamStore& params,
                   const std::string& prefix) {
  double stddev = std::sqrt(1.0 / double(in));
  Linear l;
  l.w = params.add(prefix + ".w", Tensor::randn({in, out}, rng, stddev));
  l.b = params.add(prefix + ".b", Tensor::zeros({out}));
  return l;
}

}  // namespace

ViTBlock make_vit_block(size_t channels, size_t tokens, const ViTConfig& cfg,
                        std::mt19937_64& rng, ParamStore& params, const std::string& prefix) {
  size_t d = channels * cfg.patch * cfg.patch;
  if (cfg.heads == 0 || d % cfg.heads)
    fail("bad_argument", "token width must split across heads");
  ViTBlock v;
  v.cfg = cfg;
  v.channels = channels;
  v.tokens = tokens;
  v.pos = params.add(prefix + ".pos", Tensor::zeros({tokens, d}));
  size_t hidden = size_t(std::lround(cfg.ffn_ratio * double(d)));
  for (size_t i = 0; i < cfg.depth; ++i) {
    std::string base = prefix + ".enc" + std::to_string(i);
    EncoderLayer l;
    l.wq = make_linear(d, d, rng, params, base + ".wq");
    l.wk = make_linear(d, d, rng, params, base + ".wk");
    l.wv = make_linear(d, d, rng, params, base + ".wv");
    l.wo = make_linear(d, d, rng, params, base + ".wo");
    l.ln1_g = params.add(base + ".ln1.g", Tensor::full({d}, 1.0));
    l.ln1_b = params.add(base + ".ln1.b", Tensor::zeros({d}));
    l.ffn1 = make_linear(d, hidden, rng, params, base + ".ffn1");
    l.ffn2 = make_linear(hidden, d, rng, params, base + ".ffn2");
    l.ln2_g = params.add(base + ".ln2.g", Tensor::full({d}, 1.0));
    l.ln2_b = params.add(base + ".ln2.b", Tensor::zeros({d}));
    v.layers.push_back(std::move(l));
  }
  return v;
}

Tensor vit_forward(const ViTBlock& v, const Tensor& x) {
  if (v.cfg.patch != 1)
    fail("bad_argument", "vit_forward supports patch == 1 only");
  size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c != v.channels || h * w != v.tokens)
    fail("shape_mismatch", "feature map does not match the block geometry",
         shape_str(x.shape()));
  Tensor tok = add_row_bias(patchify(x, 1), v.pos);
  for (const EncoderLayer& l : v.layers) tok = encoder_layer(l, tok, v.cfg.heads);
  return reshape(permute(tok, {0, 2, 1}), {n, c, h, w});
}

}  // namespace sdet::vit
