#pragma once

#include <functional>
#include <vector>

#include "tensor.hpp"

namespace t2i {

// Elementwise / broadcast -----------------------------------------------------

// c = a + alpha * b (same shape)
Tensor add(Tape* tape, const Tensor& a, const Tensor& b, float alpha = 1.0f);
// y = x * s
Tensor scale(Tape* tape, const Tensor& x, float s);
// y = x + c
Tensor add_const(Tape* tape, const Tensor& x, float c);
// c = a * b elementwise
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
// y = x * sigmoid(x)
Tensor silu(Tape* tape, const Tensor& x);
// y = e^x
Tensor exp(Tape* tape, const Tensor& x);
// y = clamp(x, lo, hi); gradient passes only strictly inside the range
Tensor clamp(Tape* tape, const Tensor& x, float lo, float hi);
// rows of x [n x d] plus bias [d]
Tensor add_bias(Tape* tape, const Tensor& x, const Tensor& bias);
// y[i,j] = x[i,j] * s[j] + b[j]
Tensor rowwise_affine(Tape* tape, const Tensor& x, const Tensor& s, const Tensor& b);

// Matrix products -------------------------------------------------------------

// [m x k] . [k x n] -> [m x n]
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
// a [m x k] . b[n x k]^T -> [m x n]
Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b);

// Normalization / activations over rows ---------------------------------------

// x / sqrt(mean(x^2, last dim) + eps) * gain; gain has the last-dim length
Tensor rmsnorm(Tape* tape, const Tensor& x, const Tensor& gain, float eps);
// row-stochastic softmax of a rank-2 tensor, stabilized by row-max subtraction
Tensor softmax_rows(Tape* tape, const Tensor& x);
// softmax over the causal prefix: row i normalizes over columns j <= i, rest 0
Tensor causal_softmax(Tape* tape, const Tensor& scores);

// Indexing / layout ------------------------------------------------------------

// y[i, :] = table[ids[i], :]
Tensor gather_rows(Tape* tape, const Tensor& table, const std::vector<int>& ids);
Tensor slice_cols(Tape* tape, const Tensor& x, int c0, int c1);
Tensor slice_rows(Tape* tape, const Tensor& x, int r0, int r1);
Tensor concat_cols(Tape* tape, const Tensor& a, const Tensor& b);
Tensor concat_rows(Tape* tape, const Tensor& a, const Tensor& b);
// explicit-copy reshape (same numel)
Tensor reshape(Tape* tape, const Tensor& x, std::vector<int> shape);

// Image-space ops ---------------------------------------------------------------

// x [Ci x H x W], w [Co x Ci x kh x kw], bias [Co]; zero padding
Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int pad);
// per-group mean/var normalization of [C x H x W] with per-channel gain/bias
Tensor group_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  int groups, float eps);
// [C x H x W] -> [C x 2H x 2W]
Tensor upsample_nearest2(Tape* tape, const Tensor& x);
// token rows laid out on a (gh x gw) raster grid; 2x2 mean pooling -> gh*gw/4 rows
Tensor pool2x2_grid(Tape* tape, const Tensor& x, int gh, int gw);
// [C x H x W] -> [N x C*p*p] patch rows, raster order (bijective relayout)
Tensor patchify_relayout(Tape* tape, const Tensor& x, int p);
// inverse of patchify_relayout
Tensor unpatchify_relayout(Tape* tape, const Tensor& x, int channels, int grid_h,
                           int grid_w, int p);

// Rotary embedding ---------------------------------------------------------------

// x [T x d] split into n_heads heads; within each head the first half of the
// head dim rotates by row_ids[t], the second half by col_ids[t]; standard
// rotary pairing with the given base.
Tensor rope_apply_ids(Tape* tape, const Tensor& x, const std::vector<float>& row_ids,
                      const std::vector<float>& col_ids, int n_heads,
                      float base = 10000.0f);

// Reductions (double accumulation) ----------------------------------------------

Scalar sum(Tape* tape, const Tensor& x);
Scalar mean(Tape* tape, const Tensor& x);
// mean of (a - b)^2 over all elements
Scalar mse(Tape* tape, const Tensor& a, const Tensor& b);
// mean over rows of -log softmax(logits)[row, target[row]]
Scalar cross_entropy_rows(Tape* tape, const Tensor& logits, const std::vector<int>& targets);
// c = ca * a + cb * b on scalars
Scalar scalar_add(Tape* tape, const Scalar& a, const Scalar& b, double ca = 1.0,
                  double cb = 1.0);
Scalar scalar_scale(Tape* tape, const Scalar& a, double c);

// Seeds the scalar's grad with 1 and replays the tape.
void backward(Tape& tape, Scalar& loss);

// Gradient checking ---------------------------------------------------------------

using ScalarFn = std::function<Scalar(Tape&, Tensor&)>;

// Central-difference gradient check; returns
// max_i |analytic_i - fd_i| / (|fd_i| + 1e-8).
float gradcheck(const ScalarFn& f, const Tensor& x, float eps = 1e-3f);

// Convenience wrapper for functions returning a {1}-tensor; throws
// std::invalid_argument if the function's result is not a scalar.
using TensorFn = std::function<Tensor(Tape&, Tensor&)>;
float gradcheck_tensor_fn(const TensorFn& f, const Tensor& x, float eps = 1e-3f);

}  // namespace t2i
