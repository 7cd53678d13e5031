#include <Eigen/Core>

#include <cmath>
#include <cstring>

#include "sdet/ops.hpp"

namespace sdet {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using CMap = Eigen::Map<const MatRM>;

// C[m,n] (+)= A * B with optional transposes. A is [m,k] (or [k,m] when
// transposed), B is [k,n] (or [n,k]).
void gemm(const double* a, const double* b, double* c, size_t m, size_t k, size_t n,
          bool trans_a, bool trans_b, bool accumulate) {
  Map C(c, m, n);
  if (!trans_a && !trans_b) {
    CMap A(a, m, k), B(b, k, n);
    if (accumulate)
      C.noalias() += A * B;
    else
      C.noalias() = A * B;
  } else if (trans_a && !trans_b) {
    CMap A(a, k, m), B(b, k, n);
    if (accumulate)
      C.noalias() += A.transpose() * B;
    else
      C.noalias() = A.transpose() * B;
  } else if (!trans_a && trans_b) {
    CMap A(a, m, k), B(b, n, k);
    if (accumulate)
      C.noalias() += A * B.transpose();
    else
      C.noalias() = A * B.transpose();
  } else {
    CMap A(a, k, m), B(b, n, k);
    if (accumulate)
      C.noalias() += A.transpose() * B.transpose();
    else
      C.noalias() = A.transpose() * B.transpose();
  }
}

struct ConvDims {
  size_t N, C, H, W, OC, KH, KW, OH, OW;
  size_t stride, pad;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, size_t stride, size_t pad) {
  if (xs.size() != 4 || ws.size() != 4)
    fail("bad_shape", "conv2d: expected x [N,C,H,W] and w [OC,IC,KH,KW]");
  if (xs[1] != ws[1])
    fail("shape_mismatch", "conv2d: input channels disagree",
         shape_str(xs) + " vs " + shape_str(ws));
  if (stride == 0) fail("bad_argument", "conv2d: stride must be positive");
  ConvDims d;
  d.N = xs[0];
  d.C = xs[1];
  d.H = xs[2];
  d.W = xs[3];
  d.OC = ws[0];
  d.KH = ws[2];
  d.KW = ws[3];
  d.stride = stride;
  d.pad = pad;
  if (d.H + 2 * pad < d.KH || d.W + 2 * pad < d.KW)
    fail("bad_shape", "conv2d: kernel larger than padded input");
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  return d;
}

// cols: [C*KH*KW, OH*OW] for one sample, zero-filled where the window
// reaches into the padding.
void im2col(const double* x, const ConvDims& d, double* cols) {
  size_t out_area = d.OH * d.OW;
  for (size_t c = 0; c < d.C; ++c) {
    const double* plane = x + c * d.H * d.W;
    for (size_t kh = 0; kh < d.KH; ++kh)
      for (size_t kw = 0; kw < d.KW; ++kw) {
        double* row = cols + ((c * d.KH + kh) * d.KW + kw) * out_area;
        for (size_t oh = 0; oh < d.OH; ++oh) {
          long ih = static_cast<long>(oh * d.stride + kh) - static_cast<long>(d.pad);
          double* dst = row + oh * d.OW;
          if (ih < 0 || ih >= static_cast<long>(d.H)) {
            std::memset(dst, 0, d.OW * sizeof(double));
            continue;
          }
          const double* src = plane + static_cast<size_t>(ih) * d.W;
          for (size_t ow = 0; ow < d.OW; ++ow) {
            long iw = static_cast<long>(ow * d.stride + kw) - static_cast<long>(d.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(d.W)) ? 0.0
                                                               : src[static_cast<size_t>(iw)];
          }
        }
      }
  }
}

// Scatter-add of column gradients back into the input layout.
void col2im_add(const double* cols, const ConvDims& d, double* gx) {
  size_t out_area = d.OH * d.OW;
  for (size_t c = 0; c < d.C; ++c) {
    double* plane = gx + c * d.H * d.W;
    for (size_t kh = 0; kh < d.KH; ++kh)
      for (size_t kw = 0; kw < d.KW; ++kw) {
        const double* row = cols + ((c * d.KH + kh) * d.KW + kw) * out_area;
        for (size_t oh = 0; oh < d.OH; ++oh) {
          long ih = static_cast<long>(oh * d.stride + kh) - static_cast<long>(d.pad);
          if (ih < 0 || ih >= static_cast<long>(d.H)) continue;
          double* dst = plane + static_cast<size_t>(ih) * d.W;
          const double* src = row + oh * d.OW;
          for (size_t ow = 0; ow < d.OW; ++ow) {
            long iw = static_cast<long>(ow * d.stride + kw) - static_cast<long>(d.pad);
            if (iw < 0 || iw >= static_cast<long>(d.W)) continue;
            dst[static_cast<size_t>(iw)] += src[ow];
          }
        }
      }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) fail("bad_shape", "matmul: rank must be >= 2");
  size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  size_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != kb)
    fail("shape_mismatch", "matmul: inner dims disagree",
         shape_str(sa) + " vs " + shape_str(sb));
  bool b_shared = sb.size() == 2;
  size_t batch = 1;
  for (size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  if (!b_shared) {
    if (sb.size() != sa.size())
      fail("shape_mismatch", "matmul: batch ranks disagree");
    for (size_t i = 0; i + 2 < sa.size(); ++i)
      if (sb[i] != sa[i]) fail("shape_mismatch", "matmul: batch dims disagree");
  }
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (size_t bt = 0; bt < batch; ++bt)
    gemm(pa + bt * m * k, b_shared ? pb : pb + bt * k * n, out.data() + bt * m * n, m, k, n,
         false, false, false);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_result(
      std::move(out_shape), std::move(out), {an, bn},
      [an, bn, m, k, n, batch, b_shared](TensorNode& o) {
        const double* g = o.grad.data();
        const double* pa = an->value.data();
        const double* pb = bn->value.data();
        double* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
        double* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        for (size_t bt = 0; bt < batch; ++bt) {
          const double* gbt = g + bt * m * n;
          const double* bbt = b_shared ? pb : pb + bt * k * n;
          if (ga) gemm(gbt, bbt, ga + bt * m * k, m, n, k, false, true, true);
          if (gb)
            gemm(pa + bt * m * k, gbt, b_shared ? gb : gb + bt * k * n, k, m, n, true, false,
                 true);
        }
      },
      "matmul");
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  const Shape& s = x.shape();
  const Shape& bs = bias.shape();
  if (s.size() < bs.size()) fail("bad_shape", "add_row_bias: bias rank exceeds input rank");
  for (size_t i = 0; i < bs.size(); ++i)
    if (bs[bs.size() - 1 - i] != s[s.size() - 1 - i])
      fail("shape_mismatch", "add_row_bias: bias must match trailing axes",
           shape_str(s) + " vs " + shape_str(bs));
  size_t d = bias.numel();
  size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  const double* px = x.data();
  const double* pbv = bias.data();
  for (size_t r = 0; r < rows; ++r)
    for (size_t i = 0; i < d; ++i) out[r * d + i] = px[r * d + i] + pbv[i];
  auto xn = x.node();
  auto bn = bias.node();
  return detail::make_op_result(
      s, std::move(out), {xn, bn},
      [xn, bn, rows, d](TensorNode& o) {
        const double* g = o.grad.data();
        if (xn->requires_grad) {
          double* gx = xn->ensure_grad().data();
          size_t n = o.numel();
          for (size_t i = 0; i < n; ++i) gx[i] += g[i];
        }
        if (bn->requires_grad) {
          double* gb = bn->ensure_grad().data();
          for (size_t r = 0; r < rows; ++r)
            for (size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
        }
      },
      "add_row_bias");
}

Tensor conv2d(const Tensor& x, const Tensor& w, size_t stride, size_t pad) {
  ConvDims d = conv_dims(x.shape(), w.shape(), stride, pad);
  size_t kdim = d.C * d.KH * d.KW;
  size_t out_area = d.OH * d.OW;
  std::vector<double> out(d.N * d.OC * out_area);
  std::vector<double> cols(kdim * out_area);
  const double* px = x.data();
  const double* pw = w.data();
  for (size_t nidx = 0; nidx < d.N; ++nidx) {
    im2col(px + nidx * d.C * d.H * d.W, d, cols.data());
    gemm(pw, cols.data(), out.data() + nidx * d.OC * out_area, d.OC, kdim, out_area, false,
         false, false);
  }
  auto xn = x.node();
  auto wn = w.node();
  return detail::make_op_result(
      {d.N, d.OC, d.OH, d.OW}, std::move(out), {xn, wn},
      [xn, wn, d, kdim, out_area](TensorNode& o) {
        const double* g = o.grad.data();
        const double* px = xn->value.data();
        const double* pw = wn->value.data();
        double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        double* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
        std::vector<double> cols(kdim * out_area);
        for (size_t nidx = 0; nidx < d.N; ++nidx) {
          const double* gy = g + nidx * d.OC * out_area;
          if (gw) {
            im2col(px + nidx * d.C * d.H * d.W, d, cols.data());
            gemm(gy, cols.data(), gw, d.OC, out_area, kdim, false, true, true);
          }
          if (gx) {
            // cols gradient = W^T [kdim, OC] * gy [OC, out_area]
            gemm(pw, gy, cols.data(), kdim, d.OC, out_area, true, false, false);
            col2im_add(cols.data(), d, gx + nidx * d.C * d.H * d.W);
          }
        }
      },
      "conv2d");
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  const Shape& s = x.shape();
  if (s.size() != 4) fail("bad_shape", "add_channel_bias: expected [N,C,H,W]");
  size_t N = s[0], C = s[1], HW = s[2] * s[3];
  if (bias.numel() != C) fail("shape_mismatch", "add_channel_bias: bias size != channels");
  std::vector<double> out(x.numel());
  const double* px = x.data();
  const double* pbv = bias.data();
  for (size_t n = 0; n < N; ++n)
    for (size_t c = 0; c < C; ++c) {
      size_t off = (n * C + c) * HW;
      double b = pbv[c];
      for (size_t i = 0; i < HW; ++i) out[off + i] = px[off + i] + b;
    }
  auto xn = x.node();
  auto bn = bias.node();
  return detail::make_op_result(
      s, std::move(out), {xn, bn},
      [xn, bn, N, C, HW](TensorNode& o) {
        const double* g = o.grad.data();
        if (xn->requires_grad) {
          double* gx = xn->ensure_grad().data();
          size_t n = o.numel();
          for (size_t i = 0; i < n; ++i) gx[i] += g[i];
        }
        if (bn->requires_grad) {
          double* gb = bn->ensure_grad().data();
          for (size_t n = 0; n < N; ++n)
            for (size_t c = 0; c < C; ++c) {
              size_t off = (n * C + c) * HW;
              double acc = 0;
              for (size_t i = 0; i < HW; ++i) acc += g[off + i];
              gb[c] += acc;
            }
        }
      },
      "add_channel_bias");
}

Tensor maxpool2d(const Tensor& x, size_t k) {
  const Shape& s = x.shape();
  if (s.size() != 4) fail("bad_shape", "maxpool2d: expected [N,C,H,W]");
  if (k % 2 == 0) fail("bad_argument", "maxpool2d: kernel must be odd");
  size_t N = s[0], C = s[1], H = s[2], W = s[3];
  size_t pad = k / 2;
  std::vector<double> out(x.numel());
  std::vector<uint32_t> argmax(x.numel());
  const double* px = x.data();
  for (size_t n = 0; n < N; ++n)
    for (size_t c = 0; c < C; ++c) {
      const double* plane = px + (n * C + c) * H * W;
      size_t off = (n * C + c) * H * W;
      for (size_t oh = 0; oh < H; ++oh)
        for (size_t ow = 0; ow < W; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          size_t best_idx = 0;
          size_t h_lo = oh >= pad ? oh - pad : 0;
          size_t h_hi = std::min(H - 1, oh + pad);
          size_t w_lo = ow >= pad ? ow - pad : 0;
          size_t w_hi = std::min(W - 1, ow + pad);
          for (size_t ih = h_lo; ih <= h_hi; ++ih)
            for (size_t iw = w_lo; iw <= w_hi; ++iw) {
              double v = plane[ih * W + iw];
              if (v > best) {  // first max wins ties for determinism
                best = v;
                best_idx = ih * W + iw;
              }
            }
          out[off + oh * W + ow] = best;
          argmax[off + oh * W + ow] = static_cast<uint32_t>(best_idx);
        }
    }
  auto xn = x.node();
  auto am = std::make_shared<std::vector<uint32_t>>(std::move(argmax));
  size_t plane_sz = H * W;
  return detail::make_op_result(
      s, std::move(out), {xn},
      [xn, am, N, C, plane_sz](TensorNode& o) {
        if (!xn->requires_grad) return;
        double* gx = xn->ensure_grad().data();
        const double* g = o.grad.data();
        for (size_t nc = 0; nc < N * C; ++nc) {
          size_t off = nc * plane_sz;
          for (size_t i = 0; i < plane_sz; ++i) gx[off + (*am)[off + i]] += g[off + i];
        }
      },
      "maxpool2d");
}

Tensor upsample_nearest2x(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) fail("bad_shape", "upsample_nearest2x: expected [N,C,H,W]");
  size_t N = s[0], C = s[1], H = s[2], W = s[3];
  size_t OH = H * 2, OW = W * 2;
  std::vector<double> out(N * C * OH * OW);
  const double* px = x.data();
  for (size_t nc = 0; nc < N * C; ++nc) {
    const double* src = px + nc * H * W;
    double* dst = out.data() + nc * OH * OW;
    for (size_t h = 0; h < H; ++h)
      for (size_t w = 0; w < W; ++w) {
        double v = src[h * W + w];
        dst[(2 * h) * OW + 2 * w] = v;
        dst[(2 * h) * OW + 2 * w + 1] = v;
        dst[(2 * h + 1) * OW + 2 * w] = v;
        dst[(2 * h + 1) * OW + 2 * w + 1] = v;
      }
  }
  auto xn = x.node();
  return detail::make_op_result(
      {N, C, OH, OW}, std::move(out), {xn},
      [xn, N, C, H, W, OH, OW](TensorNode& o) {
        if (!xn->requires_grad) return;
        double* gx = xn->ensure_grad().data();
        const double* g = o.grad.data();
        for (size_t nc = 0; nc < N * C; ++nc) {
          const double* gsrc = g + nc * OH * OW;
          double* gdst = gx + nc * H * W;
          for (size_t h = 0; h < H; ++h)
            for (size_t w = 0; w < W; ++w)
              gdst[h * W + w] += gsrc[(2 * h) * OW + 2 * w] + gsrc[(2 * h) * OW + 2 * w + 1] +
                                 gsrc[(2 * h + 1) * OW + 2 * w] +
                                 gsrc[(2 * h + 1) * OW + 2 * w + 1];
        }
      },
      "upsample_nearest2x");
}

Tensor space_to_depth(const Tensor& x, size_t block) {
  const Shape& s = x.shape();
  if (s.size() != 4) fail("bad_shape", "space_to_depth: expected [N,C,H,W]");
  size_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (block == 0 || H % block != 0 || W % block != 0)
    fail("bad_shape", "space_to_depth: block must divide spatial dims", shape_str(s));
  size_t OH = H / block, OW = W / block, OCC = C * block * block;
  std::vector<double> out(x.numel());
  const double* px = x.data();
  // out channel = (dy*block + dx)*C + c
  for (size_t n = 0; n < N; ++n)
    for (size_t dy = 0; dy < block; ++dy)
      for (size_t dx = 0; dx < block; ++dx)
        for (size_t c = 0; c < C; ++c) {
          size_t oc = (dy * block + dx) * C + c;
          const double* src = px + (n * C + c) * H * W;
          double* dst = out.data() + (n * OCC + oc) * OH * OW;
          for (size_t oh = 0; oh < OH; ++oh)
            for (size_t ow = 0; ow < OW; ++ow)
              dst[oh * OW + ow] = src[(oh * block + dy) * W + ow * block + dx];
        }
  auto xn = x.node();
  return detail::make_op_result(
      {N, OCC, OH, OW}, std::move(out), {xn},
      [xn, N, C, H, W, OH, OW, OCC, block](TensorNode& o) {
        if (!xn->requires_grad) return;
        double* gx = xn->ensure_grad().data();
        const double* g = o.grad.data();
        for (size_t n = 0; n < N; ++n)
          for (size_t dy = 0; dy < block; ++dy)
            for (size_t dx = 0; dx < block; ++dx)
              for (size_t c = 0; c < C; ++c) {
                size_t oc = (dy * block + dx) * C + c;
                double* dst = gx + (n * C + c) * H * W;
                const double* src = g + (n * OCC + oc) * OH * OW;
                for (size_t oh = 0; oh < OH; ++oh)
                  for (size_t ow = 0; ow < OW; ++ow)
                    dst[(oh * block + dy) * W + ow * block + dx] += src[oh * OW + ow];
              }
      },
      "space_to_depth");
}

}  // namespace sdet
