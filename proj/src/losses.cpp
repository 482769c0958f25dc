#include "automix/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "automix/errors.hpp"
#include "automix/ops.hpp"

namespace automix {

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.rank() != 2 || logits.shape() != targets.shape()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) +
                         " and targets " + shape_str(targets.shape()) + " differ");
  }
  const auto N = logits.dim(0), K = logits.dim(1);
  auto z = logits.data();
  auto t = targets.data();
  auto probs = std::make_shared<std::vector<double>>(N * K);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = z.data() + n * K;
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) {
      if (std::isnan(row[k])) {
        throw NumericError("cross_entropy: NaN logit in row " + std::to_string(n));
      }
      mx = std::max(mx, row[k]);
    }
    double se = 0.0;
    for (std::size_t k = 0; k < K; ++k) se += std::exp(row[k] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t k = 0; k < K; ++k) {
      (*probs)[n * K + k] = std::exp(row[k] - lse);
      if (t[n * K + k] != 0.0) total -= t[n * K + k] * (row[k] - lse);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  return make_op({}, {total * inv_n}, {logits},
                 [logits, targets, probs, N, K, inv_n](std::span<const double> g) {
                   auto s = grad_sink(logits);
                   auto t = targets.data();
                   for (std::size_t n = 0; n < N; ++n) {
                     double mass = 0.0;
                     for (std::size_t k = 0; k < K; ++k) mass += t[n * K + k];
                     for (std::size_t k = 0; k < K; ++k) {
                       const auto i = n * K + k;
                       s[i] += g[0] * inv_n * ((*probs)[i] * mass - t[i]);
                     }
                   }
                 });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& y_one_hot) {
  return soft_cross_entropy(logits, y_one_hot);
}

Tensor mixup_ce(const Tensor& logits, const Tensor& y_i, const Tensor& y_j,
                double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError("mixup_ce: lambda outside [0, 1]");
  }
  return add(scale(cross_entropy(logits, y_i), lambda),
             scale(cross_entropy(logits, y_j), 1.0 - lambda));
}

Tensor lambda_loss(const Tensor& mask, double lambda, double gamma, double epsilon) {
  if (mask.rank() != 4 || mask.dim(1) != 1) {
    throw DimensionError("lambda_loss: expected mask [N,1,H,W], got " +
                         shape_str(mask.shape()));
  }
  if (gamma < 0.0) throw ParameterError("lambda_loss: gamma must be >= 0");
  const auto N = mask.dim(0), HW = mask.dim(2) * mask.dim(3);
  auto m = mask.data();
  // Per-sample sign of (mean - lambda) where the hinge is active, else 0.
  auto slope = std::make_shared<std::vector<double>>(N, 0.0);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double acc = 0.0;
    for (std::size_t p = 0; p < HW; ++p) acc += m[n * HW + p];
    const double residual = lambda - acc / static_cast<double>(HW);
    const double excess = std::abs(residual) - epsilon;
    if (excess > 0.0) {
      total += excess;
      (*slope)[n] = residual > 0.0 ? -1.0 : 1.0;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  return make_op({}, {gamma * total * inv_n}, {mask},
                 [mask, slope, N, HW, gamma, inv_n](std::span<const double> g) {
                   auto s = grad_sink(mask);
                   const double base = g[0] * gamma * inv_n / static_cast<double>(HW);
                   for (std::size_t n = 0; n < N; ++n) {
                     if ((*slope)[n] == 0.0) continue;
                     for (std::size_t p = 0; p < HW; ++p) s[n * HW + p] += base * (*slope)[n];
                   }
                 });
}

double GammaSchedule::at(std::size_t step) const {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return std::max(0.0, gamma0 * (1.0 - frac));
}

LossBreakdown split_losses(const ClassificationTerms& cls, const GenerationTerms& gen) {
  LossBreakdown b;
  b.ce = cls.ce;
  b.mce_cls = cls.mce;
  b.mce_gen = gen.mce;
  b.lambda_loss = gen.lambda_loss;
  b.total = (b.ce + b.mce_cls) + (b.mce_gen + b.lambda_loss);
  return b;
}

}  // namespace automix
