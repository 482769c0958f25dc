#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "automix/tensor.hpp"

// Brute-force reference implementations shared by unit and acceptance tests.
namespace automix::oracle {

inline double top1(const Tensor& logits, std::span<const int> labels) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[n * K + k] > logits[n * K + best]) best = k;
    if (static_cast<int>(best) == labels[n]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(N);
}

struct PairScores {
  double top1_in_pair = 0.0;
  double top2_equals_pair = 0.0;
  std::size_t counted = 0;
};

inline PairScores mixed_topk(const Tensor& logits, std::span<const int> yi,
                             std::span<const int> yj) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  PairScores s;
  std::size_t in_pair = 0, equals = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (yi[n] == yj[n]) continue;
    ++s.counted;
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return logits[n * K + a] > logits[n * K + b];
    });
    const int a = static_cast<int>(order[0]), b = static_cast<int>(order[1]);
    if (a == yi[n] || a == yj[n]) ++in_pair;
    if ((a == yi[n] && b == yj[n]) || (a == yj[n] && b == yi[n])) ++equals;
  }
  if (s.counted) {
    s.top1_in_pair = static_cast<double>(in_pair) / static_cast<double>(s.counted);
    s.top2_equals_pair = static_cast<double>(equals) / static_cast<double>(s.counted);
  }
  return s;
}

inline double ece(std::span<const double> conf, std::span<const bool> correct,
                  std::size_t bins) {
  double total = 0.0;
  const double B = static_cast<double>(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    double c_sum = 0.0, a_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const bool member = (conf[i] > b / B && conf[i] <= (b + 1) / B) || (b == 0 && conf[i] == 0.0);
      if (!member) continue;
      ++n;
      c_sum += conf[i];
      a_sum += correct[i] ? 1.0 : 0.0;
    }
    if (n) total += static_cast<double>(n) / static_cast<double>(conf.size()) *
                    std::abs(a_sum / static_cast<double>(n) - c_sum / static_cast<double>(n));
  }
  return total;
}

// Fraction of pixels where the mask keeps x_i (mask[n,0,:,:] for sample n).
inline double mask_fraction(const Tensor& mask, std::size_t n) {
  const std::size_t hw = mask.dim(2) * mask.dim(3);
  double kept = 0.0;
  for (std::size_t k = 0; k < hw; ++k) kept += mask[n * hw + k];
  return kept / static_cast<double>(hw);
}

inline double lambda_loss(const Tensor& mask, double lambda, double gamma, double epsilon) {
  const std::size_t N = mask.dim(0);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n)
    total += std::max(std::abs(lambda - mask_fraction(mask, n)) - epsilon, 0.0);
  return gamma * total / static_cast<double>(N);
}

struct MaskSummary {
  double residual = 0.0;
  double spatial_std = 0.0;
};

inline MaskSummary mask_summary(const Tensor& mask, std::span<const double> lambdas) {
  const std::size_t N = mask.dim(0), hw = mask.dim(2) * mask.dim(3);
  MaskSummary s;
  for (std::size_t n = 0; n < N; ++n) {
    const double mean = mask_fraction(mask, n);
    double var = 0.0;
    for (std::size_t k = 0; k < hw; ++k) var += (mask[n * hw + k] - mean) * (mask[n * hw + k] - mean);
    s.spatial_std += std::sqrt(var / static_cast<double>(hw));
    s.residual += std::abs(mean - lambdas[lambdas.size() == 1 ? 0 : n]);
  }
  s.residual /= static_cast<double>(N);
  s.spatial_std /= static_cast<double>(N);
  return s;
}

}  // namespace automix::oracle
