#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include "automix/data_io.hpp"
#include "automix/models.hpp"
#include "automix/tensor.hpp"

namespace automix {

// Row argmax, ties to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);

double top1_accuracy(const Tensor& logits, std::span<const int> labels);

struct PairAccuracy {
  double top1_in_pair = 0.0;
  double top2_equals_pair = 0.0;
  // Rows with y_i != y_j; the others are excluded.
  std::size_t counted = 0;
};

// Top-1 in {y_i, y_j}, and top-2 set equal to {y_i, y_j}. Ranking ties
// resolve toward the lower class index.
PairAccuracy mixed_topk_accuracy(const Tensor& logits, std::span<const int> y_i,
                                 std::span<const int> y_j);

struct CalibrationBin {
  double low = 0.0;
  double high = 0.0;
  std::size_t count = 0;
  double confidence = 0.0;  // mean confidence in the bin
  double accuracy = 0.0;
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
};

inline constexpr std::size_t kDefaultCalibrationBins = 15;

// Equal-width bins on (0, 1]; bin b covers (b/B, (b+1)/B], zero goes to bin 0.
CalibrationReport calibration_report(std::span<const double> confidences,
                                     std::span<const bool> correct,
                                     std::size_t bins = kDefaultCalibrationBins);
double ece(std::span<const double> confidences, std::span<const bool> correct,
           std::size_t bins = kDefaultCalibrationBins);

// Confidence = max softmax probability; correctness against labels.
CalibrationReport calibration_from_logits(const Tensor& logits, std::span<const int> labels,
                                          std::size_t bins = kDefaultCalibrationBins);

void write_reliability_csv(std::ostream& os, const CalibrationReport& report);

inline constexpr double kFgsmEpsilon = 8.0 / 255.0;

// x is standardized; the attack runs in raw [0, 1] pixel space where epsilon
// is measured, then the result is standardized again.
Tensor fgsm_perturb(const Encoder& encoder, const ParamSet& params, const Tensor& x,
                    std::span<const int> labels, double epsilon,
                    const ChannelStats& stats);

double fgsm_error(const Encoder& encoder, const ParamSet& params, const Tensor& x,
                  std::span<const int> labels, double epsilon, const ChannelStats& stats);

struct MaskStats {
  double lambda_residual = 0.0;  // mean_n |mean(s_n) - lambda_n|
  double spatial_std = 0.0;      // mean_n std(s_n)
  double mean = 0.0;             // mean over all entries
};

// masks: [N,1,H,W]; one lambda per sample or a single shared value.
MaskStats mask_stats(const Tensor& masks, std::span<const double> lambdas);

// Forward-only logits in chunks of `batch_size`.
Tensor predict_logits(const Encoder& encoder, const ParamSet& params, const Tensor& images,
                      std::size_t batch_size = 256);

}  // namespace automix
