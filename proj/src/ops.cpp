#include "automix/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "automix/errors.hpp"

namespace automix {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(t.shape()));
  }
}


// Patch layout for one sample: row (c, ki, kj), column (oh, ow).
struct ConvGeom {
  std::size_t C, H, W, kh, kw, stride, padding, Ho, Wo;

  template <typename Visit>
  void for_each(Visit visit) const {
    const std::size_t P = Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t ki = 0; ki < kh; ++ki) {
        for (std::size_t kj = 0; kj < kw; ++kj) {
          const std::size_t row = ((c * kh + ki) * kw + kj) * P;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(padding);
            const bool row_ok = ih >= 0 && ih < static_cast<long>(H);
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(padding);
              const bool ok = row_ok && iw >= 0 && iw < static_cast<long>(W);
              visit(row + oh * Wo + ow, ok ? (c * H + static_cast<std::size_t>(ih)) * W +
                                                 static_cast<std::size_t>(iw)
                                           : std::size_t(-1));
            }
          }
        }
      }
    }
  }

  void im2col(const double* img, double* cols) const {
    for_each([&](std::size_t i, std::size_t src) {
      cols[i] = src == std::size_t(-1) ? 0.0 : img[src];
    });
  }

  void col2im(const double* cols, double* img) const {
    for_each([&](std::size_t i, std::size_t dst) {
      if (dst != std::size_t(-1)) img[dst] += cols[i];
    });
  }
};

template <typename Fn>
Tensor unary_elementwise(const Tensor& x, Fn value_fn) {
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = value_fn(xs[i]);
  return Tensor(x.shape(), std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [a, b](std::span<const double> g) {
                   for (auto& t : {a, b}) {
                     auto s = grad_sink(t);
                     for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [a, b](std::span<const double> g) {
                   auto sa = grad_sink(a);
                   for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i];
                   auto sb = grad_sink(b);
                   for (std::size_t i = 0; i < sb.size(); ++i) sb[i] -= g[i];
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto da = a.data();
  auto db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [a, b](std::span<const double> g) {
                   auto da = a.data();
                   auto db = b.data();
                   auto sa = grad_sink(a);
                   for (std::size_t i = 0; i < sa.size(); ++i)
                     sa[i] += g[i] * db[i];
                   auto sb = grad_sink(b);
                   for (std::size_t i = 0; i < sb.size(); ++i)
                     sb[i] += g[i] * da[i];
                 });
}

Tensor scale(const Tensor& a, double factor) {
  auto out = unary_elementwise(a, [factor](double v) { return v * factor; });
  return make_op(a.shape(), {out.data().begin(), out.data().end()}, {a},
                 [a, factor](std::span<const double> g) {
                   auto s = grad_sink(a);
                   for (std::size_t i = 0; i < s.size(); ++i)
                     s[i] += g[i] * factor;
                 });
}

Tensor one_minus(const Tensor& a) {
  auto da = a.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - da[i];
  return make_op(a.shape(), std::move(out), {a},
                 [a](std::span<const double> g) {
                   auto s = grad_sink(a);
                   for (std::size_t i = 0; i < s.size(); ++i) s[i] -= g[i];
                 });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_op({}, {total}, {a}, [a](std::span<const double> g) {
    auto s = grad_sink(a);
    for (auto& v : s) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const double n = static_cast<double>(a.numel());
  return make_op({}, {total / n}, {a}, [a, n](std::span<const double> g) {
    auto s = grad_sink(a);
    for (auto& v : s) v += g[0] / n;
  });
}

Tensor relu(const Tensor& x) {
  auto dx = x.data();
  std::vector<double> out(dx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] <= 0 ? 0.0 : dx[i];
  return make_op(x.shape(), std::move(out), {x},
                 [x](std::span<const double> g) {
                   auto dx = x.data();
                   auto s = grad_sink(x);
                   for (std::size_t i = 0; i < s.size(); ++i)
                     if (dx[i] > 0) s[i] += g[i];
                 });
}

Tensor sigmoid(const Tensor& x) {
  auto dx = x.data();
  auto y = std::make_shared<std::vector<double>>(dx.size());
  for (std::size_t i = 0; i < dx.size(); ++i) {
    double v = dx[i];
    if (v >= 0) {
      (*y)[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      double e = std::exp(v);
      (*y)[i] = e / (1.0 + e);
    }
  }
  std::vector<double> out = *y;
  return make_op(x.shape(), std::move(out), {x},
                 [x, y](std::span<const double> g) {
                   const double sign =
                       debug::fault() == debug::Fault::sigmoid_backward_sign
                           ? -1.0
                           : 1.0;
                   auto s = grad_sink(x);
                   for (std::size_t i = 0; i < s.size(); ++i) {
                     double yi = (*y)[i];
                     s[i] += sign * g[i] * yi * (1.0 - yi);
                   }
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op(std::move(shape), std::move(out), {x},
                 [x](std::span<const double> g) {
                   auto s = grad_sink(x);
                   for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return make_op({m, n}, std::move(out), {a, b},
                 [a, b, m, k, n](std::span<const double> g) {
                   ConstMap gm(g.data(), m, n);
                   if (auto s = grad_sink(a); !s.empty()) {
                     MutMap(s.data(), m, k).noalias() +=
                         gm * ConstMap(b.data().data(), k, n).transpose();
                   }
                   if (auto s = grad_sink(b); !s.empty()) {
                     MutMap(s.data(), k, n).noalias() +=
                         ConstMap(a.data().data(), m, k).transpose() * gm;
                   }
                 });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.data() + i * m * n, m, n).noalias() =
        ConstMap(a.data().data() + i * m * k, m, k) *
        ConstMap(b.data().data() + i * k * n, k, n);
  }
  return make_op(
      {batch, m, n}, std::move(out), {a, b},
      [a, b, batch, m, k, n](std::span<const double> g) {
        auto sa = grad_sink(a);
        auto sb = grad_sink(b);
        for (std::size_t i = 0; i < batch; ++i) {
          ConstMap gm(g.data() + i * m * n, m, n);
          if (!sa.empty()) {
            MutMap(sa.data() + i * m * k, m, k).noalias() +=
                gm * ConstMap(b.data().data() + i * k * n, k, n).transpose();
          }
          if (!sb.empty()) {
            MutMap(sb.data() + i * k * n, k, n).noalias() +=
                ConstMap(a.data().data() + i * m * k, m, k).transpose() * gm;
          }
        }
      });
}

Tensor transpose_last2(const Tensor& x) {
  require_rank(x, 3, "transpose_last2");
  const auto batch = x.dim(0), m = x.dim(1), n = x.dim(2);
  auto dx = x.data();
  std::vector<double> out(dx.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[(b * n + j) * m + i] = dx[(b * m + i) * n + j];
  return make_op({batch, n, m}, std::move(out), {x},
                 [x, batch, m, n](std::span<const double> g) {
                   auto s = grad_sink(x);
                   for (std::size_t b = 0; b < batch; ++b)
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         s[(b * m + i) * n + j] += g[(b * n + j) * m + i];
                 });
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax_rows: needs rank >= 1");
  const std::size_t cols = x.shape().back();
  if (cols == 0) throw DimensionError("softmax_rows: empty rows");
  const std::size_t rows = x.numel() / cols;
  auto dx = x.data();
  auto y = std::make_shared<std::vector<double>>(dx.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = dx.data() + r * cols;
    double* out = y->data() + r * cols;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!std::isfinite(in[c])) {
        throw NumericError("softmax_rows: non-finite input at row " +
                           std::to_string(r));
      }
      mx = std::max(mx, in[c]);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = std::exp(in[c] - mx);
      total += out[c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[c] /= total;
  }
  std::vector<double> values = *y;
  return make_op(x.shape(), std::move(values), {x},
                 [x, y, rows, cols](std::span<const double> g) {
                   auto s = grad_sink(x);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* yr = y->data() + r * cols;
                     const double* gr = g.data() + r * cols;
                     double dot = 0.0;
                     for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                     for (std::size_t c = 0; c < cols; ++c)
                       s[r * cols + c] += yr[c] * (gr[c] - dot);
                   }
                 });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
              std::size_t padding) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) +
                         " has " + std::to_string(C) +
                         " channels but weight " + shape_str(w.shape()) +
                         " expects " + std::to_string(w.dim(1)));
  }
  if (stride == 0) throw ParameterError("conv2d: stride must be >= 1");
  if (kh > H + 2 * padding || kw > W + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  const auto Ho = (H + 2 * padding - kh) / stride + 1;
  const auto Wo = (W + 2 * padding - kw) / stride + 1;
  const auto P = Ho * Wo;
  const auto K = C * kh * kw;

  const ConvGeom geom{C, H, W, kh, kw, stride, padding, Ho, Wo};
  std::vector<double> cols(K * P);
  std::vector<double> out(N * F * P);
  auto dx = x.data();
  const ConstMap wm(w.data().data(), F, K);
  for (std::size_t n = 0; n < N; ++n) {
    geom.im2col(dx.data() + n * C * H * W, cols.data());
    MutMap(out.data() + n * F * P, F, P).noalias() = wm * ConstMap(cols.data(), K, P);
  }

  return make_op(
      {N, F, Ho, Wo}, std::move(out), {x, w},
      [=](std::span<const double> g) {
        auto sw = grad_sink(w);
        auto sx = grad_sink(x);
        if (sw.empty() && sx.empty()) return;
        std::vector<double> buf(K * P);
        auto xs = x.data();
        const ConstMap wmat(w.data().data(), F, K);
        for (std::size_t n = 0; n < N; ++n) {
          const ConstMap gn(g.data() + n * F * P, F, P);
          if (!sw.empty()) {
            geom.im2col(xs.data() + n * C * H * W, buf.data());
            MutMap(sw.data(), F, K).noalias() += gn * ConstMap(buf.data(), K, P).transpose();
          }
          if (!sx.empty()) {
            MutMap(buf.data(), K, P).noalias() = wmat.transpose() * gn;
            geom.col2im(buf.data(), sx.data() + n * C * H * W);
          }
        }
      });
}

Tensor channel_affine(const Tensor& x, const Tensor& gain,
                      const Tensor& bias) {
  require_rank(x, 4, "channel_affine");
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gain.numel() != C || bias.numel() != C) {
    throw DimensionError("channel_affine: gain/bias " +
                         shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match input " +
                         shape_str(x.shape()));
  }
  auto dx = x.data();
  auto dg = gain.data();
  auto db = bias.data();
  std::vector<double> out(dx.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p)
        out[base + p] = dx[base + p] * dg[c] + db[c];
    }
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [x, gain, bias, N, C, HW](std::span<const double> g) {
                   auto dx = x.data();
                   auto dg = gain.data();
                   auto sx = grad_sink(x);
                   auto sg = grad_sink(gain);
                   auto sb = grad_sink(bias);
                   for (std::size_t n = 0; n < N; ++n)
                     for (std::size_t c = 0; c < C; ++c) {
                       const std::size_t base = (n * C + c) * HW;
                       double acc_g = 0.0, acc_b = 0.0;
                       for (std::size_t p = 0; p < HW; ++p) {
                         const double gv = g[base + p];
                         if (!sx.empty()) sx[base + p] += gv * dg[c];
                         acc_g += gv * dx[base + p];
                         acc_b += gv;
                       }
                       if (!sg.empty()) sg[c] += acc_g;
                       if (!sb.empty()) sb[c] += acc_b;
                     }
                 });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: mismatched " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const auto N = a.dim(0), C1 = a.dim(1), C2 = b.dim(1);
  const auto HW = a.dim(2) * a.dim(3);
  const auto C = C1 + C2;
  std::vector<double> out(N * C * HW);
  auto da = a.data();
  auto db = b.data();
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(da.data() + n * C1 * HW, C1 * HW, out.data() + n * C * HW);
    std::copy_n(db.data() + n * C2 * HW, C2 * HW,
                out.data() + n * C * HW + C1 * HW);
  }
  return make_op({N, C, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                 [a, b, N, C1, C2, C, HW](std::span<const double> g) {
                   auto sa = grad_sink(a);
                   auto sb = grad_sink(b);
                   for (std::size_t n = 0; n < N; ++n) {
                     const double* gn = g.data() + n * C * HW;
                     if (!sa.empty())
                       for (std::size_t i = 0; i < C1 * HW; ++i)
                         sa[n * C1 * HW + i] += gn[i];
                     if (!sb.empty())
                       for (std::size_t i = 0; i < C2 * HW; ++i)
                         sb[n * C2 * HW + i] += gn[C1 * HW + i];
                   }
                 });
}

namespace {

struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_lo, w_hi;
};

AxisTaps bilinear_taps(std::size_t in, std::size_t factor) {
  AxisTaps t;
  const std::size_t out = in * factor;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_lo.resize(out);
  t.w_hi.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double frac = src - static_cast<double>(i0);
    t.lo[o] = i0;
    t.hi[o] = i1;
    t.w_lo[o] = 1.0 - frac;
    t.w_hi[o] = frac;
  }
  return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  if (factor < 1) throw ParameterError("upsample_bilinear: factor must be >= 1");
  require_rank(x, 4, "upsample_bilinear");
  const auto N = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto H = h * factor, W = w * factor;
  auto ty = std::make_shared<AxisTaps>(bilinear_taps(h, factor));
  auto tx = std::make_shared<AxisTaps>(bilinear_taps(w, factor));
  auto dx = x.data();
  std::vector<double> out(N * C * H * W);
  for (std::size_t plane = 0; plane < N * C; ++plane) {
    const double* in = dx.data() + plane * h * w;
    double* o = out.data() + plane * H * W;
    for (std::size_t oy = 0; oy < H; ++oy) {
      const double* r0 = in + ty->lo[oy] * w;
      const double* r1 = in + ty->hi[oy] * w;
      const double a0 = ty->w_lo[oy], a1 = ty->w_hi[oy];
      for (std::size_t ox = 0; ox < W; ++ox) {
        const auto c0 = tx->lo[ox], c1 = tx->hi[ox];
        const double b0 = tx->w_lo[ox], b1 = tx->w_hi[ox];
        o[oy * W + ox] = a0 * (b0 * r0[c0] + b1 * r0[c1]) +
                         a1 * (b0 * r1[c0] + b1 * r1[c1]);
      }
    }
  }
  return make_op({N, C, H, W}, std::move(out), {x},
                 [x, ty, tx, N, C, h, w, H, W](std::span<const double> g) {
                   auto s = grad_sink(x);
                   for (std::size_t plane = 0; plane < N * C; ++plane) {
                     double* gi = s.data() + plane * h * w;
                     const double* go = g.data() + plane * H * W;
                     for (std::size_t oy = 0; oy < H; ++oy) {
                       double* r0 = gi + ty->lo[oy] * w;
                       double* r1 = gi + ty->hi[oy] * w;
                       const double a0 = ty->w_lo[oy], a1 = ty->w_hi[oy];
                       for (std::size_t ox = 0; ox < W; ++ox) {
                         const double v = go[oy * W + ox];
                         const auto c0 = tx->lo[ox], c1 = tx->hi[ox];
                         const double b0 = tx->w_lo[ox], b1 = tx->w_hi[ox];
                         r0[c0] += v * a0 * b0;
                         r0[c1] += v * a0 * b1;
                         r1[c0] += v * a1 * b0;
                         r1[c1] += v * a1 * b1;
                       }
                     }
                   }
                 });
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto dx = x.data();
  std::vector<double> out(N * C);
  for (std::size_t i = 0; i < N * C; ++i) {
    double total = 0.0;
    for (std::size_t p = 0; p < HW; ++p) total += dx[i * HW + p];
    out[i] = total / static_cast<double>(HW);
  }
  return make_op({N, C}, std::move(out), {x},
                 [x, N, C, HW](std::span<const double> g) {
                   auto s = grad_sink(x);
                   const double inv = 1.0 / static_cast<double>(HW);
                   for (std::size_t i = 0; i < N * C; ++i)
                     for (std::size_t p = 0; p < HW; ++p)
                       s[i * HW + p] += g[i] * inv;
                 });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const auto N = x.dim(0), K = x.dim(1);
  if (bias.numel() != K) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) +
                         " does not match " + shape_str(x.shape()));
  }
  auto dx = x.data();
  auto db = bias.data();
  std::vector<double> out(dx.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] = dx[n * K + k] + db[k];
  return make_op(x.shape(), std::move(out), {x, bias},
                 [x, bias, N, K](std::span<const double> g) {
                   auto sx = grad_sink(x);
                   for (std::size_t i = 0; i < sx.size(); ++i) sx[i] += g[i];
                   auto sb = grad_sink(bias);
                   if (!sb.empty())
                     for (std::size_t n = 0; n < N; ++n)
                       for (std::size_t k = 0; k < K; ++k) sb[k] += g[n * K + k];
                 });
}

Tensor gather_batch(const Tensor& x, const std::vector<std::size_t>& index) {
  if (x.rank() == 0) throw DimensionError("gather_batch: needs rank >= 1");
  const auto N = x.dim(0);
  const auto row = x.numel() / std::max<std::size_t>(N, 1);
  Shape shape = x.shape();
  shape[0] = index.size();
  auto dx = x.data();
  std::vector<double> out(index.size() * row);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= N) {
      throw DimensionError("gather_batch: index " + std::to_string(index[i]) +
                           " out of range for batch of " + std::to_string(N));
    }
    std::copy_n(dx.data() + index[i] * row, row, out.data() + i * row);
  }
  return make_op(std::move(shape), std::move(out), {x},
                 [x, index, row](std::span<const double> g) {
                   auto s = grad_sink(x);
                   for (std::size_t i = 0; i < index.size(); ++i)
                     for (std::size_t r = 0; r < row; ++r)
                       s[index[i] * row + r] += g[i * row + r];
                 });
}

Tensor blend(const Tensor& a, const Tensor& b, const Tensor& mask) {
  require_same_shape(a, b, "blend");
  require_rank(a, 4, "blend");
  require_rank(mask, 4, "blend mask");
  const auto N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
  if (mask.dim(0) != N || mask.dim(1) != 1 || mask.dim(2) != a.dim(2) ||
      mask.dim(3) != a.dim(3)) {
    throw DimensionError("blend: mask " + shape_str(mask.shape()) +
                         " does not match images " + shape_str(a.shape()));
  }
  auto da = a.data();
  auto db = b.data();
  auto dm = mask.data();
  std::vector<double> out(da.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        const auto i = (n * C + c) * HW + p;
        const double m = dm[n * HW + p];
        out[i] = m * da[i] + (1.0 - m) * db[i];
      }
  return make_op(a.shape(), std::move(out), {a, b, mask},
                 [a, b, mask, N, C, HW](std::span<const double> g) {
                   auto da = a.data();
                   auto db = b.data();
                   auto dm = mask.data();
                   auto sa = grad_sink(a);
                   auto sb = grad_sink(b);
                   auto sm = grad_sink(mask);
                   for (std::size_t n = 0; n < N; ++n)
                     for (std::size_t c = 0; c < C; ++c)
                       for (std::size_t p = 0; p < HW; ++p) {
                         const auto i = (n * C + c) * HW + p;
                         const double m = dm[n * HW + p];
                         if (!sa.empty()) sa[i] += g[i] * m;
                         if (!sb.empty()) sb[i] += g[i] * (1.0 - m);
                         if (!sm.empty()) sm[n * HW + p] += g[i] * (da[i] - db[i]);
                       }
                 });
}

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h) {
  if (!(h > 0)) throw ParameterError("grad_check: step must be positive");
  std::vector<double> values(x.data().begin(), x.data().end());
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor probe = Tensor::parameter(x.shape(), values);
    Tensor loss = f(probe);
    if (loss.numel() != 1) {
      throw ContractError("grad_check: function must be scalar-valued");
    }
    if (loss.on_tape()) backward(loss);
    analytic = probe.grad();
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto plus = values;
    auto minus = values;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor(x.shape(), plus)).item();
    const double fm = f(Tensor(x.shape(), minus)).item();
    const double numeric = (fp - fm) / (2.0 * h);
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace automix
