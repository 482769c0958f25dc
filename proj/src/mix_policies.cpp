#include "automix/mix_policies.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "automix/errors.hpp"
#include "automix/ops.hpp"

namespace automix {

MixRatio sample_lambda(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw ParameterError("sample_lambda: alpha must be > 0");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  double g1 = gamma(rng);
  double g2 = gamma(rng);
  // Both draws underflowing to zero is possible for tiny alpha.
  double lambda = (g1 + g2) > 0.0 ? g1 / (g1 + g2) : 0.5;
  return {std::clamp(lambda, 0.0, 1.0), alpha};
}

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  auto idx = identity_index(n);
  // Fisher-Yates.
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

std::vector<std::size_t> identity_index(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  std::vector<double> v(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ContractError("one_hot: label " + std::to_string(labels[i]) +
                          " outside [0, " + std::to_string(num_classes) + ")");
    }
    v[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor({labels.size(), num_classes}, std::move(v));
}

namespace {

void require_one_hot(std::span<const double> y, const char* which) {
  std::size_t ones = 0;
  for (double v : y) {
    if (v == 1.0) {
      ++ones;
    } else if (v != 0.0) {
      throw ContractError(std::string("mix_label: ") + which + " is not one-hot");
    }
  }
  if (ones != 1) throw ContractError(std::string("mix_label: ") + which + " is not one-hot");
}

}  // namespace

std::vector<double> mix_label(std::span<const double> y_i,
                              std::span<const double> y_j, double lambda) {
  if (y_i.size() != y_j.size()) {
    throw ContractError("mix_label: label vectors differ in length");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError("mix_label: lambda outside [0, 1]");
  }
  require_one_hot(y_i, "y_i");
  require_one_hot(y_j, "y_j");
  std::vector<double> out(y_i.size());
  for (std::size_t c = 0; c < out.size(); ++c)
    out[c] = lambda * y_i[c] + (1.0 - lambda) * y_j[c];
  return out;
}

Tensor mixup_linear(const Tensor& x_i, const Tensor& x_j, double lambda) {
  if (x_i.shape() != x_j.shape()) {
    throw DimensionError("mixup_linear: shape mismatch " + shape_str(x_i.shape()) +
                         " vs " + shape_str(x_j.shape()));
  }
  auto a = x_i.data();
  auto b = x_j.data();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = lambda * a[i] + (1.0 - lambda) * b[i];
  return Tensor(x_i.shape(), std::move(out));
}

Box sample_cutmix_box(std::size_t height, std::size_t width, double lambda,
                      Rng& rng) {
  if (height < 2 || width < 2) throw DimensionError("cutmix: image side must be >= 2");
  lambda = std::clamp(lambda, 0.0, 1.0);
  // Centre draws happen unconditionally so the rng advances identically for
  // every lambda.
  std::uniform_int_distribution<std::size_t> cy_dist(0, height - 1);
  std::uniform_int_distribution<std::size_t> cx_dist(0, width - 1);
  const auto cy = static_cast<long>(cy_dist(rng));
  const auto cx = static_cast<long>(cx_dist(rng));
  if (lambda <= 0.0) return {0, height, 0, width};
  const double cut = std::sqrt(1.0 - lambda);
  const auto cut_h = static_cast<long>(static_cast<double>(height) * cut);
  const auto cut_w = static_cast<long>(static_cast<double>(width) * cut);
  auto clip = [](long v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(hi)));
  };
  const long y0 = cy - cut_h / 2;
  const long x0 = cx - cut_w / 2;
  return {clip(y0, height), clip(y0 + cut_h, height), clip(x0, width),
          clip(x0 + cut_w, width)};
}

MixedBatch cutmix_with_box(const Tensor& x_i, const Tensor& x_j, const Box& box) {
  if (x_i.shape() != x_j.shape() || x_i.rank() != 4) {
    throw DimensionError("cutmix: expected matching [N,C,H,W] images, got " +
                         shape_str(x_i.shape()) + " and " + shape_str(x_j.shape()));
  }
  const auto N = x_i.dim(0), H = x_i.dim(2), W = x_i.dim(3);
  std::vector<double> m(N * H * W, 1.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = box.y0; y < box.y1; ++y)
      for (std::size_t x = box.x0; x < box.x1; ++x) m[(n * H + y) * W + x] = 0.0;
  Tensor mask({N, 1, H, W}, std::move(m));
  MixedBatch out;
  out.x_mix = blend(x_i.detach(), x_j.detach(), mask);
  const double lam = 1.0 - static_cast<double>(box.area()) / static_cast<double>(H * W);
  out.lambda_effective.assign(N, lam);
  out.mask = mask;
  return out;
}

MixedBatch cutmix_box(const Tensor& x_i, const Tensor& x_j, double lambda, Rng& rng) {
  if (x_i.rank() != 4) {
    throw DimensionError("cutmix: expected [N,C,H,W] images, got " + shape_str(x_i.shape()));
  }
  Box box = sample_cutmix_box(x_i.dim(2), x_i.dim(3), lambda, rng);
  return cutmix_with_box(x_i, x_j, box);
}

}  // namespace automix
