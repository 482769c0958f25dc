#pragma once

#include <cstddef>

#include "automix/tensor.hpp"

namespace automix {

inline constexpr double kLambdaMargin = 0.1;

// Mean over the batch of -sum_c target[n,c] * log_softmax(logits)[n,c].
// Targets may be any probability rows; they are treated as constants.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& targets);

Tensor cross_entropy(const Tensor& logits, const Tensor& y_one_hot);

// lambda * CE(logits, y_i) + (1 - lambda) * CE(logits, y_j)
Tensor mixup_ce(const Tensor& logits, const Tensor& y_i, const Tensor& y_j,
                double lambda);

// gamma * mean_n max(|lambda - mean_hw(mask[n])| - epsilon, 0)
Tensor lambda_loss(const Tensor& mask, double lambda, double gamma,
                   double epsilon = kLambdaMargin);

// Linearly decaying weight of the lambda loss.
struct GammaSchedule {
  double gamma0 = 0.1;
  std::size_t total_steps = 1;
  double epsilon = kLambdaMargin;

  double at(std::size_t step) const;
};

struct LossBreakdown {
  double ce = 0.0;
  double mce_cls = 0.0;
  double mce_gen = 0.0;
  double lambda_loss = 0.0;
  double total = 0.0;

  double classification() const { return ce + mce_cls; }
  double generation() const { return mce_gen + lambda_loss; }
};

struct ClassificationTerms {
  double ce = 0.0;
  double mce = 0.0;
};

struct GenerationTerms {
  double mce = 0.0;
  double lambda_loss = 0.0;
};

LossBreakdown split_losses(const ClassificationTerms& cls,
                           const GenerationTerms& gen);

}  // namespace automix
