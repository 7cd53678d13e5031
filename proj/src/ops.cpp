#include "sdet/ops.hpp"

#include <algorithm>
#include <cmath>

namespace sdet {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    fail("shape_mismatch", std::string(op) + ": shapes differ",
         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Splits the index space around `axis` into (outer, len, inner) so that the
// flat offset of element j along the axis is outer*len*inner + j*inner + i.
struct AxisSplit {
  size_t outer = 1, len = 1, inner = 1;
};

AxisSplit axis_split(const Shape& s, size_t axis, const char* op) {
  if (axis >= s.size()) fail("bad_axis", std::string(op) + ": axis out of range", shape_str(s));
  AxisSplit sp;
  for (size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

using detail::make_op_result;

Tensor binary_op(const Tensor& a, const Tensor& b, const char* name,
                 double (*fwd)(double, double),
                 void (*bwd)(double, double, double, double&, double&)) {
  check_same_shape(a, b, name);
  size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(
      a.shape(), std::move(out), {an, bn},
      [an, bn, bwd](TensorNode& o) {
        size_t n = o.numel();
        const double* g = o.grad.data();
        const double* pa = an->value.data();
        const double* pb = bn->value.data();
        double* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
        double* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        for (size_t i = 0; i < n; ++i) {
          double da = 0, db = 0;
          bwd(pa[i], pb[i], g[i], da, db);
          if (ga) ga[i] += da;
          if (gb) gb[i] += db;
        }
      },
      name);
}

}  // namespace

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.vec())
    if (!std::isfinite(v)) fail("non_finite", std::string(what) + ": non-finite input");
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double g, double& da, double& db) {
        if (x >= y)
          da = g;
        else
          db = g;
      });
}

namespace {

Tensor unary_op(const Tensor& a, const char* name, double (*fwd)(double),
                double (*dfdx_from_xy)(double, double)) {
  size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
  auto an = a.node();
  return make_op_result(
      a.shape(), std::move(out), {an},
      [an, dfdx_from_xy](TensorNode& o) {
        if (!an->requires_grad) return;
        size_t n = o.numel();
        const double* g = o.grad.data();
        const double* x = an->value.data();
        const double* y = o.value.data();
        double* ga = an->ensure_grad().data();
        for (size_t i = 0; i < n; ++i) ga[i] += g[i] * dfdx_from_xy(x[i], y[i]);
      },
      name);
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor neg(const Tensor& a) {
  return unary_op(
      a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp_t(const Tensor& a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_t(const Tensor& a) {
  for (double v : a.vec())
    if (!(v > 0)) fail("bad_argument", "log: non-positive input");
  return unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid", [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary_op(
      a, "silu", [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        double s = stable_sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Tensor leaky_relu(const Tensor& a, double alpha) {
  size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] >= 0 ? pa[i] : alpha * pa[i];
  auto an = a.node();
  return detail::make_op_result(
      a.shape(), std::move(out), {an},
      [an, alpha](TensorNode& o) {
        if (!an->requires_grad) return;
        size_t n = o.numel();
        const double* g = o.grad.data();
        const double* x = an->value.data();
        double* ga = an->ensure_grad().data();
        for (size_t i = 0; i < n; ++i) ga[i] += g[i] * (x[i] >= 0 ? 1.0 : alpha);
      },
      "leaky_relu");
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor add_scalar(const Tensor& a, double c) {
  size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] + c;
  auto an = a.node();
  return detail::make_op_result(
      a.shape(), std::move(out), {an},
      [an](TensorNode& o) {
        if (!an->requires_grad) return;
        size_t n = o.numel();
        double* ga = an->ensure_grad().data();
        for (size_t i = 0; i < n; ++i) ga[i] += o.grad[i];
      },
      "add_scalar");
}

Tensor mul_scalar(const Tensor& a, double c) {
  size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] * c;
  auto an = a.node();
  return detail::make_op_result(
      a.shape(), std::move(out), {an},
      [an, c](TensorNode& o) {
        if (!an->requires_grad) return;
        size_t n = o.numel();
        double* ga = an->ensure_grad().data();
        for (size_t i = 0; i < n; ++i) ga[i] += o.grad[i] * c;
      },
      "mul_scalar");
}

Tensor maximum_scalar(const Tensor& a, double c) {
  size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] >= c ? pa[i] : c;
  auto an = a.node();
  return detail::make_op_result(
      a.shape(), std::move(out), {an},
      [an, c](TensorNode& o) {
        if (!an->requires_grad) return;
        size_t n = o.numel();
        const double* x = an->value.data();
        double* ga = an->ensure_grad().data();
        for (size_t i = 0; i < n; ++i)
          if (x[i] >= c) ga[i] += o.grad[i];
      },
      "maximum_scalar");
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    fail("shape_mismatch", "reshape: element count changes",
         shape_str(a.shape()) + " -> " + shape_str(shape));
  auto an = a.node();
  return detail::make_op_result(
      std::move(shape), a.vec(), {an},
      [an](TensorNode& o) {
        if (!an->requires_grad) return;
        double* ga = an->ensure_grad().data();
        size_t n = o.numel();
        for (size_t i = 0; i < n; ++i) ga[i] += o.grad[i];
      },
      "reshape");
}

namespace {

std::vector<size_t> row_major_strides(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<size_t>& axes) {
  const Shape& s = a.shape();
  if (axes.size() != s.size()) fail("bad_axis", "permute: axes rank mismatch");
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  for (size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= s.size() || seen[axes[i]]) fail("bad_axis", "permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = s[axes[i]];
  }
  auto in_strides = row_major_strides(s);
  auto out_strides = row_major_strides(out_shape);
  size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  // out[idx] = in[sum over dims of coord_d * in_strides[axes[d]]]
  std::vector<size_t> gather(s.size());
  for (size_t d = 0; d < s.size(); ++d) gather[d] = in_strides[axes[d]];
  for (size_t i = 0; i < n; ++i) {
    size_t rem = i, src = 0;
    for (size_t d = 0; d < out_shape.size(); ++d) {
      size_t c = rem / out_strides[d];
      rem %= out_strides[d];
      src += c * gather[d];
    }
    out[i] = pa[src];
  }
  auto an = a.node();
  return detail::make_op_result(
      std::move(out_shape), std::move(out), {an},
      [an, gather, out_strides](TensorNode& o) {
        if (!an->requires_grad) return;
        double* ga = an->ensure_grad().data();
        size_t n = o.numel();
        for (size_t i = 0; i < n; ++i) {
          size_t rem = i, src = 0;
          for (size_t d = 0; d < out_strides.size(); ++d) {
            size_t c = rem / out_strides[d];
            rem %= out_strides[d];
            src += c * gather[d];
          }
          ga[src] += o.grad[i];
        }
      },
      "permute");
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
  if (parts.empty()) fail("bad_argument", "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) fail("bad_axis", "concat: axis out of range");
  Shape out_shape = s0;
  size_t total_axis = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) fail("shape_mismatch", "concat: rank mismatch");
    for (size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d])
        fail("shape_mismatch", "concat: non-axis extents differ",
             shape_str(s0) + " vs " + shape_str(s));
    total_axis += s[axis];
  }
  out_shape[axis] = total_axis;

  auto sp0 = axis_split(s0, axis, "concat");
  size_t outer = sp0.outer, inner = sp0.inner;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<size_t> lens;
  for (const Tensor& p : parts) lens.push_back(p.shape()[axis]);
  size_t out_axis_stride = total_axis * inner;
  {
    size_t axis_off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      const double* src = parts[pi].data();
      size_t block = lens[pi] * inner;
      for (size_t o = 0; o < outer; ++o)
        std::copy(src + o * block, src + (o + 1) * block,
                  out.data() + o * out_axis_stride + axis_off * inner);
      axis_off += lens[pi];
    }
  }
  std::vector<NodePtr> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  return detail::make_op_result(
      std::move(out_shape), std::move(out), nodes,
      [nodes, lens, outer, inner, out_axis_stride](TensorNode& o) {
        size_t axis_off = 0;
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
          size_t block = lens[pi] * inner;
          if (nodes[pi]->requires_grad) {
            double* gp = nodes[pi]->ensure_grad().data();
            for (size_t ou = 0; ou < outer; ++ou) {
              const double* g = o.grad.data() + ou * out_axis_stride + axis_off * inner;
              double* dst = gp + ou * block;
              for (size_t i = 0; i < block; ++i) dst[i] += g[i];
            }
          }
          axis_off += lens[pi];
        }
      },
      "concat");
}

Tensor grid_cell(const Tensor& a, size_t n, size_t y, size_t x) {
  const Shape& s = a.shape();
  if (s.size() != 4) fail("bad_shape", "grid_cell: expected [N,C,H,W]", shape_str(s));
  if (n >= s[0] || y >= s[2] || x >= s[3]) fail("bad_argument", "grid_cell: index out of range");
  size_t C = s[1], H = s[2], W = s[3];
  std::vector<double> out(C);
  const double* pa = a.data();
  size_t base = n * C * H * W + y * W + x;
  for (size_t c = 0; c < C; ++c) out[c] = pa[base + c * H * W];
  auto an = a.node();
  return detail::make_op_result(
      {C}, std::move(out), {an},
      [an, base, C, H, W](TensorNode& o) {
        if (!an->requires_grad) return;
        double* ga = an->ensure_grad().data();
        for (size_t c = 0; c < C; ++c) ga[base + c * H * W] += o.grad[c];
      },
      "grid_cell");
}

Tensor index_scalar(const Tensor& a, size_t flat_index) {
  if (flat_index >= a.numel()) fail("bad_argument", "index_scalar: index out of range");
  auto an = a.node();
  return detail::make_op_result(
      {1}, {a.data()[flat_index]}, {an},
      [an, flat_index](TensorNode& o) {
        if (!an->requires_grad) return;
        an->ensure_grad()[flat_index] += o.grad[0];
      },
      "index_scalar");
}

Tensor sum_all(const Tensor& a) {
  double s = 0;
  for (double v : a.vec()) s += v;
  auto an = a.node();
  return detail::make_op_result(
      {1}, {s}, {an},
      [an](TensorNode& o) {
        if (!an->requires_grad) return;
        double g = o.grad[0];
        double* ga = an->ensure_grad().data();
        size_t n = an->numel();
        for (size_t i = 0; i < n; ++i) ga[i] += g;
      },
      "sum_all");
}

Tensor mean_all(const Tensor& a) {
  double s = 0;
  for (double v : a.vec()) s += v;
  double inv = 1.0 / static_cast<double>(a.numel());
  auto an = a.node();
  return detail::make_op_result(
      {1}, {s * inv}, {an},
      [an, inv](TensorNode& o) {
        if (!an->requires_grad) return;
        double g = o.grad[0] * inv;
        double* ga = an->ensure_grad().data();
        size_t n = an->numel();
        for (size_t i = 0; i < n; ++i) ga[i] += g;
      },
      "mean_all");
}

Tensor softmax(const Tensor& z, size_t axis) {
  check_finite(z, "softmax");
  auto sp = axis_split(z.shape(), axis, "softmax");
  size_t n = z.numel();
  std::vector<double> out(n);
  const double* pz = z.data();
  for (size_t o = 0; o < sp.outer; ++o)
    for (size_t i = 0; i < sp.inner; ++i) {
      size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t j = 0; j < sp.len; ++j) mx = std::max(mx, pz[base + j * sp.inner]);
      double denom = 0;
      for (size_t j = 0; j < sp.len; ++j) {
        double e = std::exp(pz[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        denom += e;
      }
      double inv = 1.0 / denom;
      for (size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] *= inv;
    }
  auto zn = z.node();
  return detail::make_op_result(
      z.shape(), std::move(out), {zn},
      [zn, sp](TensorNode& o) {
        if (!zn->requires_grad) return;
        double* gz = zn->ensure_grad().data();
        const double* y = o.value.data();
        const double* g = o.grad.data();
        for (size_t ou = 0; ou < sp.outer; ++ou)
          for (size_t i = 0; i < sp.inner; ++i) {
            size_t base = ou * sp.len * sp.inner + i;
            double dot = 0;
            for (size_t j = 0; j < sp.len; ++j) {
              size_t k = base + j * sp.inner;
              dot += g[k] * y[k];
            }
            for (size_t j = 0; j < sp.len; ++j) {
              size_t k = base + j * sp.inner;
              gz[k] += y[k] * (g[k] - dot);
            }
          }
      },
      "softmax");
}

Tensor log_softmax(const Tensor& z, size_t axis) {
  check_finite(z, "log_softmax");
  auto sp = axis_split(z.shape(), axis, "log_softmax");
  size_t n = z.numel();
  std::vector<double> out(n);
  const double* pz = z.data();
  for (size_t o = 0; o < sp.outer; ++o)
    for (size_t i = 0; i < sp.inner; ++i) {
      size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t j = 0; j < sp.len; ++j) mx = std::max(mx, pz[base + j * sp.inner]);
      double denom = 0;
      for (size_t j = 0; j < sp.len; ++j) denom += std::exp(pz[base + j * sp.inner] - mx);
      double lse = mx + std::log(denom);
      for (size_t j = 0; j < sp.len; ++j)
        out[base + j * sp.inner] = pz[base + j * sp.inner] - lse;
    }
  auto zn = z.node();
  return detail::make_op_result(
      z.shape(), std::move(out), {zn},
      [zn, sp](TensorNode& o) {
        if (!zn->requires_grad) return;
        double* gz = zn->ensure_grad().data();
        const double* ly = o.value.data();
        const double* g = o.grad.data();
        for (size_t ou = 0; ou < sp.outer; ++ou)
          for (size_t i = 0; i < sp.inner; ++i) {
            size_t base = ou * sp.len * sp.inner + i;
            double gsum = 0;
            for (size_t j = 0; j < sp.len; ++j) gsum += g[base + j * sp.inner];
            for (size_t j = 0; j < sp.len; ++j) {
              size_t k = base + j * sp.inner;
              gz[k] += g[k] - std::exp(ly[k]) * gsum;
            }
          }
      },
      "log_softmax");
}

Tensor mse(const Tensor& y, const Tensor& yhat) {
  check_same_shape(y, yhat, "mse");
  size_t n = y.numel();
  const double* py = y.data();
  const double* ph = yhat.data();
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    double d = py[i] - ph[i];
    acc += d * d;
  }
  double inv_n = 1.0 / static_cast<double>(n);
  auto yn = y.node();
  auto hn = yhat.node();
  return detail::make_op_result(
      {1}, {acc * inv_n}, {yn, hn},
      [yn, hn, inv_n](TensorNode& o) {
        size_t n = yn->numel();
        double g = o.grad[0];
        const double* py = yn->value.data();
        const double* ph = hn->value.data();
        double* gy = yn->requires_grad ? yn->ensure_grad().data() : nullptr;
        double* gh = hn->requires_grad ? hn->ensure_grad().data() : nullptr;
        for (size_t i = 0; i < n; ++i) {
          double d = 2.0 * inv_n * (py[i] - ph[i]) * g;
          if (gy) gy[i] += d;
          if (gh) gh[i] -= d;
        }
      },
      "mse");
}

Tensor bce(const Tensor& p, const Tensor& y) {
  check_same_shape(p, y, "bce");
  size_t n = p.numel();
  const double* pp = p.data();
  const double* py = y.data();
  for (size_t i = 0; i < n; ++i) {
    if (!(pp[i] >= 0.0 && pp[i] <= 1.0))
      fail("bad_argument", "bce: prediction outside [0,1]");
    if (!(py[i] >= 0.0 && py[i] <= 1.0))
      fail("bad_argument", "bce: target outside [0,1]");
  }
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    double pc = std::clamp(pp[i], kProbEps, 1.0 - kProbEps);
    acc -= py[i] * std::log(pc) + (1.0 - py[i]) * std::log(1.0 - pc);
  }
  double inv_n = 1.0 / static_cast<double>(n);
  auto pn = p.node();
  auto yn = y.node();
  return detail::make_op_result(
      {1}, {acc * inv_n}, {pn, yn},
      [pn, yn, inv_n](TensorNode& o) {
        size_t n = pn->numel();
        double g = o.grad[0] * inv_n;
        const double* pp = pn->value.data();
        const double* py = yn->value.data();
        double* gp = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
        double* gy = yn->requires_grad ? yn->ensure_grad().data() : nullptr;
        for (size_t i = 0; i < n; ++i) {
          double pc = std::clamp(pp[i], kProbEps, 1.0 - kProbEps);
          if (gp && pp[i] > kProbEps && pp[i] < 1.0 - kProbEps)
            gp[i] += g * (-(py[i] / pc) + (1.0 - py[i]) / (1.0 - pc));
          if (gy) gy[i] += g * (std::log(1.0 - pc) - std::log(pc));
        }
      },
      "bce");
}

Tensor kl_div(const Tensor& p, const Tensor& q, size_t axis) {
  check_same_shape(p, q, "kl_div");
  auto sp = axis_split(p.shape(), axis, "kl_div");
  const double* pp = p.data();
  const double* pq = q.data();
  for (size_t o = 0; o < sp.outer; ++o)
    for (size_t i = 0; i < sp.inner; ++i) {
      size_t base = o * sp.len * sp.inner + i;
      double sum_p = 0, sum_q = 0;
      for (size_t j = 0; j < sp.len; ++j) {
        sum_p += pp[base + j * sp.inner];
        sum_q += pq[base + j * sp.inner];
      }
      if (std::abs(sum_p - 1.0) > kKlNormTol || std::abs(sum_q - 1.0) > kKlNormTol)
        fail("bad_argument", "kl_div: inputs not normalized along axis");
    }
  size_t n = p.numel();
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    if (pp[i] <= 0.0) continue;  // 0 * log(0/q) := 0
    double qc = std::max(pq[i], kProbEps);
    acc += pp[i] * std::log(pp[i] / qc);
  }
  auto pn = p.node();
  auto qn = q.node();
  return detail::make_op_result(
      {1}, {acc}, {pn, qn},
      [pn, qn](TensorNode& o) {
        size_t n = pn->numel();
        double g = o.grad[0];
        const double* pp = pn->value.data();
        const double* pq = qn->value.data();
        double* gp = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
        double* gq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
        for (size_t i = 0; i < n; ++i) {
          if (pp[i] <= 0.0) continue;
          double qc = std::max(pq[i], kProbEps);
          if (gp) gp[i] += g * (std::log(pp[i] / qc) + 1.0);
          if (gq && pq[i] >= kProbEps) gq[i] -= g * pp[i] / qc;
        }
      },
      "kl_div");
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const std::vector<double>& mu, const std::vector<double>& sigma) {
  const Shape& s = x.shape();
  if (s.size() != 4) fail("bad_shape", "channel_affine: expected [N,C,H,W]", shape_str(s));
  size_t N = s[0], C = s[1], HW = s[2] * s[3];
  if (gamma.numel() != C || beta.numel() != C || mu.size() != C || sigma.size() != C)
    fail("shape_mismatch", "channel_affine: per-channel parameter size mismatch");
  std::vector<double> out(x.numel());
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  for (size_t nidx = 0; nidx < N; ++nidx)
    for (size_t c = 0; c < C; ++c) {
      double scale = pg[c] / sigma[c];
      double shift = pb[c] - mu[c] * scale;
      const double* src = px + (nidx * C + c) * HW;
      double* dst = out.data() + (nidx * C + c) * HW;
      for (size_t i = 0; i < HW; ++i) dst[i] = src[i] * scale + shift;
    }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::make_op_result(
      s, std::move(out), {xn, gn, bn},
      [xn, gn, bn, mu, sigma, N, C, HW](TensorNode& o) {
        const double* g = o.grad.data();
        const double* px = xn->value.data();
        const double* pg = gn->value.data();
        double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        double* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
        double* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        for (size_t nidx = 0; nidx < N; ++nidx)
          for (size_t c = 0; c < C; ++c) {
            size_t off = (nidx * C + c) * HW;
            double inv_sigma = 1.0 / sigma[c];
            double acc_g = 0, acc_b = 0;
            for (size_t i = 0; i < HW; ++i) {
              double gi = g[off + i];
              if (gx) gx[off + i] += gi * pg[c] * inv_sigma;
              acc_g += gi * (px[off + i] - mu[c]) * inv_sigma;
              acc_b += gi;
            }
            if (gg) gg[c] += acc_g;
            if (gb) gb[c] += acc_b;
          }
      },
      "channel_affine");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Shape& s = x.shape();
  if (s.empty()) fail("bad_shape", "layer_norm: rank-0 input");
  size_t D = s.back();
  size_t rows = x.numel() / D;
  if (gamma.numel() != D || beta.numel() != D)
    fail("shape_mismatch", "layer_norm: gamma/beta must match last axis");
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  for (size_t r = 0; r < rows; ++r) {
    const double* row = px + r * D;
    double mean = 0;
    for (size_t i = 0; i < D; ++i) mean += row[i];
    mean /= static_cast<double>(D);
    double var = 0;
    for (size_t i = 0; i < D; ++i) {
      double d = row[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(D);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (size_t i = 0; i < D; ++i) {
      double h = (row[i] - mean) * is;
      xhat[r * D + i] = h;
      out[r * D + i] = h * pg[i] + pb[i];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto xhat_s = std::make_shared<std::vector<double>>(std::move(xhat));
  auto inv_s = std::make_shared<std::vector<double>>(std::move(inv_std));
  return detail::make_op_result(
      s, std::move(out), {xn, gn, bn},
      [xn, gn, bn, xhat_s, inv_s, rows, D](TensorNode& o) {
        const double* g = o.grad.data();
        const double* pg = gn->value.data();
        const double* xh = xhat_s->data();
        double* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        double* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
        double* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        for (size_t r = 0; r < rows; ++r) {
          size_t off = r * D;
          if (gx) {
            double m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
            for (size_t i = 0; i < D; ++i) {
              double dxh = g[off + i] * pg[i];
              m1 += dxh;
              m2 += dxh * xh[off + i];
            }
            m1 /= static_cast<double>(D);
            m2 /= static_cast<double>(D);
            double is = (*inv_s)[r];
            for (size_t i = 0; i < D; ++i) {
              double dxh = g[off + i] * pg[i];
              gx[off + i] += is * (dxh - m1 - xh[off + i] * m2);
            }
          }
          if (gg || gb)
            for (size_t i = 0; i < D; ++i) {
              if (gg) gg[i] += g[off + i] * xh[off + i];
              if (gb) gb[i] += g[off + i];
            }
        }
      },
      "layer_norm");
}

}  // namespace sdet
