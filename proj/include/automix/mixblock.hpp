#pragma once

#include <cstddef>
#include <cstdint>

#include "automix/models.hpp"
#include "automix/tensor.hpp"

namespace automix {

// Learnable transforms of the Mix Block, both bias-free 1x1 convolutions over
// the lambda-embedded feature map (C_l + 1 channels):
//   w_p: [d, C_l+1, 1, 1]  shared query/key projection
//   w_z: [1, C_l+1, 1, 1]  value-to-mask projection
struct MixBlockParams {
  Tensor w_p;
  Tensor w_z;

  std::size_t input_channels() const { return w_p.dim(1); }
  std::size_t embed_dim() const { return w_p.dim(0); }

  // Handles sharing storage with w_p / w_z, keyed "w_p" and "w_z".
  ParamSet as_param_set() const;
  static MixBlockParams from_param_set(const ParamSet& params);
};

// max(C_l / 2, 4)
std::size_t mixblock_embed_dim(std::size_t feature_channels);

// He-normal w_p, zero w_z (so the initial mask is the constant 0.5).
MixBlockParams init_mixblock(std::size_t feature_channels, std::uint64_t seed);

// Appends one constant channel holding lambda.
Tensor embed_lambda(const Tensor& z, double lambda);

// softmax_rows((W_P z_i)^T (W_P z_j) / sqrt(d)): [N, hw, hw], row r is the
// distribution over positions of z_j attended from position r of z_i.
Tensor cross_attention(const Tensor& zl_i, const Tensor& zl_j,
                       const MixBlockParams& params);

struct MaskPair {
  Tensor s_i;  // [N,1,H,W]
  Tensor s_j;  // 1 - s_i
};

// s_i = U(sigmoid(P (W_Z z_i,lambda))), upsampled by `upsample_factor`.
MaskPair compute_mask(const Tensor& zl_i, const Tensor& zl_j,
                      const MixBlockParams& params,
                      std::size_t upsample_factor);

// Alternative construction of s_j by taking z_j as the value and attending
// with the transposed score matrix. Not used for training; it equals the s_i
// of the pair run in swapped order.
Tensor compute_mask_transposed(const Tensor& zl_i, const Tensor& zl_j,
                               const MixBlockParams& params,
                               std::size_t upsample_factor);

// s_i * x_i + (1 - s_i) * x_j with the mask broadcast across channels.
Tensor mix_images(const Tensor& x_i, const Tensor& x_j, const MaskPair& mask);

struct GeneratedMix {
  Tensor x_mix;
  MaskPair mask;
  double lambda = 0.5;
};

// embed -> attention -> mask -> mix. The upsample factor is inferred from the
// ratio of image to feature resolution.
GeneratedMix generate(const Tensor& x_i, const Tensor& x_j, const Tensor& z_i,
                      const Tensor& z_j, double lambda,
                      const MixBlockParams& params);

}  // namespace automix
