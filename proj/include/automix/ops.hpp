#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "automix/tensor.hpp"

namespace automix {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// 1 - a
Tensor one_minus(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [B,m,k] x [B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);
// Swaps the last two axes of a rank-3 tensor.
Tensor transpose_last2(const Tensor& x);

// Softmax over the last axis; every leading index is one row.
Tensor softmax_rows(const Tensor& x);

// x: [N,C,H,W], w: [F,C,kh,kw]. No bias.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
              std::size_t padding);

// y[n,c,h,w] = x[n,c,h,w] * gain[c] + bias[c]
Tensor channel_affine(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor concat_channels(const Tensor& a, const Tensor& b);

// Bilinear, align_corners = false, edge-clamped source coordinates.
Tensor upsample_bilinear(const Tensor& x, std::size_t factor);

Tensor stop_gradient(const Tensor& x);

// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);

// x: [N,k] + bias: [k]
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

// Selects batch rows x[index[0]], x[index[1]], ... along axis 0.
Tensor gather_batch(const Tensor& x, const std::vector<std::size_t>& index);

// mask[n,0,h,w] * a[n,c,h,w] + (1 - mask) * b[n,c,h,w], mask broadcast
// across channels.
Tensor blend(const Tensor& a, const Tensor& b, const Tensor& mask);

// Central-difference gradient check of a scalar function at `x`. Returns the
// max over coordinates of |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h = 1e-6);

}  // namespace automix
