#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "automix/tensor.hpp"

namespace automix {

using Rng = std::mt19937_64;

struct MixRatio {
  double lambda = 1.0;
  double alpha = 1.0;
};

struct MixedBatch {
  Tensor x_mix;
  std::vector<std::size_t> index_i;
  std::vector<std::size_t> index_j;
  std::vector<double> lambda_effective;
  // [N,1,H,W] weight of the x_i sample; absent for linear mixing.
  std::optional<Tensor> mask;
};

// lambda ~ Beta(alpha, alpha) as g1 / (g1 + g2) with g ~ Gamma(alpha, 1).
MixRatio sample_lambda(double alpha, Rng& rng);

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng);
std::vector<std::size_t> identity_index(std::size_t n);

Tensor one_hot(std::span<const int> labels, std::size_t num_classes);

// lambda * y_i + (1 - lambda) * y_j for one-hot rows.
std::vector<double> mix_label(std::span<const double> y_i,
                              std::span<const double> y_j, double lambda);

Tensor mixup_linear(const Tensor& x_i, const Tensor& x_j, double lambda);

// Half-open pixel rectangle [y0, y1) x [x0, x1).
struct Box {
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  std::size_t area() const { return (y1 - y0) * (x1 - x0); }
};

// Box of sides H*sqrt(1-lambda), W*sqrt(1-lambda) (truncated), centre uniform
// over the image, clipped to the image. lambda <= 0 covers the whole image.
Box sample_cutmix_box(std::size_t height, std::size_t width, double lambda,
                      Rng& rng);

// Copies one box from x_j into x_i for the whole batch. x_j are typically
// x_i rows under a permutation; indices are left for the caller to fill.
MixedBatch cutmix_box(const Tensor& x_i, const Tensor& x_j, double lambda,
                      Rng& rng);

// Mask-carrying form used by cutmix_box: binary box mask and its mix.
MixedBatch cutmix_with_box(const Tensor& x_i, const Tensor& x_j,
                           const Box& box);

}  // namespace automix
