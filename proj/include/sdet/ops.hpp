#pragma once

#include <cstdint>

#include "sdet/tensor.hpp"

namespace sdet {

// Graph operations. Every op validates shapes, computes the forward value and
// registers a reverse rule. No broadcasting beyond what each op documents;
// mismatched shapes are rejected.

// ---- elementwise, same shape ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);  // ties route grad to a

// ---- scalar right-hand side ----
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor maximum_scalar(const Tensor& a, double c);

// ---- unary ----
Tensor neg(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);  // rejects non-positive input
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor leaky_relu(const Tensor& a, double alpha = 0.1);
Tensor square(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);
// Gathers the channel vector at batch n, spatial (y, x) of an [N,C,H,W] map.
Tensor grid_cell(const Tensor& a, size_t n, size_t y, size_t x);
Tensor index_scalar(const Tensor& a, size_t flat_index);

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- linear algebra ----
// a: [..., m, k]; b: [k, n] or [..., k, n] with identical leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// Adds bias broadcast over leading axes; bias shape must equal the trailing
// axes of x (e.g. x [N,T,D] with bias [D] or [T,D]).
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

// ---- softmax family (Appendix-style scalar functions) ----
Tensor softmax(const Tensor& z, size_t axis);
Tensor log_softmax(const Tensor& z, size_t axis);
// Mean of squared differences over all elements; shapes must match.
Tensor mse(const Tensor& y, const Tensor& yhat);
// Binary cross-entropy with soft targets. p and y must lie in [0,1]
// elementwise; p is clamped to [kProbEps, 1-kProbEps] before the logs.
Tensor bce(const Tensor& p, const Tensor& y);
// Sum over vectors along `axis` of P(i) * log(P(i)/Q(i)). P and Q must be
// normalized along `axis` within kKlNormTol. P(i)=0 terms contribute 0;
// Q is clamped to >= kProbEps.
Tensor kl_div(const Tensor& p, const Tensor& q, size_t axis);

inline constexpr double kProbEps = 1e-7;
inline constexpr double kKlNormTol = 1e-6;

// ---- spatial ops on [N,C,H,W] ----
Tensor conv2d(const Tensor& x, const Tensor& w, size_t stride, size_t pad);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
// Max over k x k windows, stride 1, zero-padding excluded from the max.
Tensor maxpool2d(const Tensor& x, size_t k);
Tensor upsample_nearest2x(const Tensor& x);
// [N,C,H,W] -> [N, C*b*b, H/b, W/b]; channel order: (dy, dx, c) fastest c.
Tensor space_to_depth(const Tensor& x, size_t block);
// Per-channel (x - mu[c]) / sigma[c] * gamma[c] + beta[c]; mu/sigma are
// captured constants (frozen statistics), gamma/beta learnable [C].
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const std::vector<double>& mu, const std::vector<double>& sigma);
// Normalizes over the last axis: ((x-mean)/sqrt(var+eps)) * gamma + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

void check_finite(const Tensor& t, const char* what);

}  // namespace sdet
