#include "automix/mixblock.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "automix/errors.hpp"
#include "automix/ops.hpp"

namespace automix {

ParamSet MixBlockParams::as_param_set() const {
  ParamSet p;
  p.set("w_p", w_p);
  p.set("w_z", w_z);
  return p;
}

MixBlockParams MixBlockParams::from_param_set(const ParamSet& params) {
  MixBlockParams out{params.at("w_p"), params.at("w_z")};
  if (out.w_p.rank() != 4 || out.w_z.rank() != 4 || out.w_z.dim(0) != 1 ||
      out.w_p.dim(1) != out.w_z.dim(1)) {
    throw FormatError("mix block parameters have inconsistent shapes " +
                      shape_str(out.w_p.shape()) + " / " + shape_str(out.w_z.shape()));
  }
  return out;
}

std::size_t mixblock_embed_dim(std::size_t feature_channels) {
  return std::max<std::size_t>(feature_channels / 2, 4);
}

MixBlockParams init_mixblock(std::size_t feature_channels, std::uint64_t seed) {
  const std::size_t in = feature_channels + 1;
  const std::size_t d = mixblock_embed_dim(feature_channels);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in)));
  std::vector<double> wp(d * in);
  for (auto& v : wp) v = dist(rng);
  return {Tensor::parameter({d, in, 1, 1}, std::move(wp)),
          Tensor::parameter({1, in, 1, 1}, std::vector<double>(in, 0.0))};
}

Tensor embed_lambda(const Tensor& z, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError("embed_lambda: lambda " + std::to_string(lambda) +
                         " outside [0, 1]");
  }
  if (z.rank() != 4) {
    throw DimensionError("embed_lambda: expected [N,C,h,w], got " + shape_str(z.shape()));
  }
  Tensor channel = Tensor::full({z.dim(0), 1, z.dim(2), z.dim(3)}, lambda);
  return concat_channels(z, channel);
}

namespace {

void check_pair(const Tensor& zl_i, const Tensor& zl_j, const MixBlockParams& params) {
  if (zl_i.rank() != 4 || zl_i.shape() != zl_j.shape()) {
    throw DimensionError("mix block: feature maps " + shape_str(zl_i.shape()) +
                         " and " + shape_str(zl_j.shape()) + " do not match");
  }
  if (zl_i.dim(1) != params.input_channels()) {
    throw DimensionError("mix block: feature map has " + std::to_string(zl_i.dim(1)) +
                         " channels, parameters expect " +
                         std::to_string(params.input_channels()));
  }
}

// [N, hw_i, hw_j] scaled dot products.
Tensor attention_scores(const Tensor& zl_i, const Tensor& zl_j,
                        const MixBlockParams& params) {
  check_pair(zl_i, zl_j, params);
  const auto N = zl_i.dim(0), hw = zl_i.dim(2) * zl_i.dim(3);
  const auto d = params.embed_dim();
  Tensor q = reshape(conv2d(zl_i, params.w_p, 1, 0), {N, d, hw});
  Tensor k = reshape(conv2d(zl_j, params.w_p, 1, 0), {N, d, hw});
  return scale(bmm(transpose_last2(q), k), 1.0 / std::sqrt(static_cast<double>(d)));
}

Tensor attend_value(const Tensor& attention, const Tensor& zl_value,
                    const MixBlockParams& params, std::size_t factor) {
  const auto N = zl_value.dim(0), h = zl_value.dim(2), w = zl_value.dim(3);
  Tensor v = reshape(conv2d(zl_value, params.w_z, 1, 0), {N, h * w, 1});
  Tensor low = sigmoid(reshape(bmm(attention, v), {N, 1, h, w}));
  return upsample_bilinear(low, factor);
}

}  // namespace

Tensor cross_attention(const Tensor& zl_i, const Tensor& zl_j,
                       const MixBlockParams& params) {
  return softmax_rows(attention_scores(zl_i, zl_j, params));
}

MaskPair compute_mask(const Tensor& zl_i, const Tensor& zl_j,
                      const MixBlockParams& params, std::size_t upsample_factor) {
  Tensor p = cross_attention(zl_i, zl_j, params);
  Tensor s_i = attend_value(p, zl_i, params, upsample_factor);
  return {s_i, one_minus(s_i)};
}

Tensor compute_mask_transposed(const Tensor& zl_i, const Tensor& zl_j,
                               const MixBlockParams& params,
                               std::size_t upsample_factor) {
  Tensor p_t = softmax_rows(transpose_last2(attention_scores(zl_i, zl_j, params)));
  return attend_value(p_t, zl_j, params, upsample_factor);
}

Tensor mix_images(const Tensor& x_i, const Tensor& x_j, const MaskPair& mask) {
  return blend(x_i, x_j, mask.s_i);
}

GeneratedMix generate(const Tensor& x_i, const Tensor& x_j, const Tensor& z_i,
                      const Tensor& z_j, double lambda,
                      const MixBlockParams& params) {
  if (x_i.rank() != 4 || z_i.rank() != 4) {
    throw DimensionError("generate: expected rank-4 images and features");
  }
  const auto H = x_i.dim(2), W = x_i.dim(3), h = z_i.dim(2), w = z_i.dim(3);
  if (h == 0 || w == 0 || H % h != 0 || W % w != 0 || H / h != W / w ||
      x_i.dim(0) != z_i.dim(0)) {
    throw DimensionError("generate: image " + shape_str(x_i.shape()) +
                         " is not an integer upsampling of features " +
                         shape_str(z_i.shape()));
  }
  Tensor zl_i = embed_lambda(z_i, lambda);
  Tensor zl_j = embed_lambda(z_j, 1.0 - lambda);
  GeneratedMix out;
  out.mask = compute_mask(zl_i, zl_j, params, H / h);
  out.x_mix = mix_images(x_i, x_j, out.mask);
  out.lambda = lambda;
  return out;
}

}  // namespace automix
