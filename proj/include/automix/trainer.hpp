#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "automix/data_io.hpp"
#include "automix/losses.hpp"
#include "automix/mix_policies.hpp"
#include "automix/mixblock.hpp"
#include "automix/models.hpp"

namespace automix {

enum class Policy { vanilla, mixup, cutmix, automix };

std::string to_string(Policy policy);
// Throws ConfigError listing the valid names.
Policy parse_policy(const std::string& name);
const std::vector<std::string>& policy_names();

enum class EvalEncoder { student, teacher };

struct TrainConfig {
  Policy policy = Policy::automix;
  double alpha = 2.0;           // Beta(alpha, alpha) for the Mix Block
  double baseline_alpha = 1.0;  // Beta for MixUp / CutMix
  std::size_t feature_layer = 3;
  double m0 = 0.999;
  // Fixed EMA coefficient instead of the cosine schedule.
  std::optional<double> momentum_override;
  double base_lr = 0.1;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  double gamma0 = 0.1;
  std::size_t epochs = 20;
  std::size_t batch_size = 50;
  std::uint64_t seed = 1;
  bool augment = true;
  EvalEncoder eval_encoder = EvalEncoder::student;
  EncoderConfig encoder;

  void validate() const;
};

// 1 - (1 - m0) * (cos(pi t / T) + 1) / 2, clamped to 1 past T.
double momentum_schedule(std::size_t t, std::size_t total, double m0);
// base_lr * (cos(pi t / T) + 1) / 2
double lr_schedule(std::size_t t, std::size_t total, double base_lr);

// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v
void sgd_update(std::span<double> param, std::span<const double> grad,
                std::span<double> velocity, double lr, double momentum = 0.9,
                double weight_decay = 1e-4);

using VelocityMap = std::map<std::string, std::vector<double>>;

// Applies sgd_update to every tensor of `params` using its accumulated grad.
void sgd_update(ParamSet& params, VelocityMap& velocity, double lr, double momentum,
                double weight_decay);

struct TrainState {
  ParamSet student;
  ParamSet teacher;
  MixBlockParams mixblock;
  VelocityMap student_velocity;
  VelocityMap mixblock_velocity;
  std::size_t step = 0;
  std::size_t total_steps = 0;
  Rng rng;
};

// Which parameter groups each loss bucket reached, from separate backward
// sweeps. Values are max |gradient contribution|.
struct GradientLedger {
  double cls_to_student = 0.0;
  double cls_to_mixblock = 0.0;
  double gen_to_student = 0.0;
  double gen_to_mixblock = 0.0;
  double gen_to_teacher = 0.0;
  bool cls_touched_mixblock = false;
  bool gen_touched_teacher = false;
};

struct StepResult {
  LossBreakdown losses;
  std::optional<double> clean_top1;
  std::optional<double> mask_mean;
  std::optional<double> mask_std;
  double lambda_q = 0.0;
  double lambda_k = 0.0;
  double lr = 0.0;
  double momentum = 0.0;
  double gamma = 0.0;
  GradientLedger ledger;
};

class Trainer {
 public:
  Trainer(TrainConfig config, std::size_t total_steps);

  const TrainConfig& config() const { return config_; }
  const Encoder& encoder() const { return encoder_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }

  // One optimizer step on an (already augmented) batch.
  StepResult train_step(const Batch& batch);

  // Parameters used for evaluation per config.eval_encoder.
  const ParamSet& eval_params() const;

 private:
  StepResult step_vanilla(const Tensor& x, const std::vector<int>& labels);
  StepResult step_baseline(const Tensor& x, const std::vector<int>& labels);
  StepResult step_automix(const Tensor& x, const std::vector<int>& labels);
  void finish_step(StepResult& r);

  TrainConfig config_;
  Encoder encoder_;
  TrainState state_;
};

TrainState init_train_state(const TrainConfig& config, std::size_t total_steps);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss_ce = 0.0;
  double loss_mce_cls = 0.0;
  double loss_mce_gen = 0.0;
  double loss_lambda = 0.0;
  double top1 = 0.0;  // clean accuracy on the training split
  double mask_mean = 0.0;
  double mask_std = 0.0;
  double lr = 0.0;
  double momentum_m = 0.0;
  std::optional<double> test_top1;
  bool collapse_warning = false;
};

inline constexpr const char* kMetricsCsvHeader =
    "epoch,step,loss_ce,loss_mce_cls,loss_mce_gen,loss_lambda,top1,mask_mean,mask_std,lr,"
    "momentum_m";

void write_metrics_csv_header(std::ostream& os);
void write_metrics_csv_row(std::ostream& os, const EpochRecord& r);

struct FitResult {
  TrainState state;
  std::vector<EpochRecord> history;
};

struct FitOptions {
  const LabeledDataset* test = nullptr;
  std::ostream* log = nullptr;
  // Called after each epoch's record is complete.
  std::function<void(const EpochRecord&)> on_epoch;
};

std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size);

// Epoch loop around train_step. Datasets are expected standardized.
FitResult fit(const TrainConfig& config, const LabeledDataset& train,
              const FitOptions& options = {});

// Bundles student, teacher and mix block under "student.", "teacher." and
// "mixblock." name prefixes.
ParamSet checkpoint_tensors(const TrainState& state);

// Median of the last `window` entries (or all, if fewer).
double median_of_last(std::span<const double> values, std::size_t window = 10);

}  // namespace automix
