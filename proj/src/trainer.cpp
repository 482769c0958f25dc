#include "automix/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "automix/errors.hpp"
#include "automix/metrics.hpp"
#include "automix/ops.hpp"

namespace automix {

namespace {

const std::vector<std::string> kPolicyNames{"vanilla", "mixup", "cutmix", "automix"};

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double max_abs_grad(const ParamSet& params) {
  double m = 0.0;
  for (const auto& [_, t] : params)
    if (t.has_grad()) m = std::max(m, max_abs(t.grad()));
  return m;
}

bool any_grad(const ParamSet& params) {
  for (const auto& [_, t] : params)
    if (t.has_grad()) return true;
  return false;
}

std::vector<std::vector<double>> snapshot_grads(const ParamSet& params) {
  std::vector<std::vector<double>> out;
  for (const auto& [_, t] : params) out.push_back(t.grad());
  return out;
}

double max_abs_change(const ParamSet& params, const std::vector<std::vector<double>>& before) {
  double m = 0.0;
  std::size_t i = 0;
  for (const auto& [_, t] : params) {
    auto now = t.grad();
    for (std::size_t k = 0; k < now.size(); ++k)
      m = std::max(m, std::abs(now[k] - before[i][k]));
    ++i;
  }
  return m;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<int> gather_labels(const std::vector<int>& labels,
                               const std::vector<std::size_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

void check_finite(const StepResult& r) {
  const auto& l = r.losses;
  if (std::isfinite(l.ce) && std::isfinite(l.mce_cls) && std::isfinite(l.mce_gen) &&
      std::isfinite(l.lambda_loss))
    return;
  std::ostringstream os;
  os << "non-finite loss (ce=" << l.ce << ", mce_cls=" << l.mce_cls << ", mce_gen=" << l.mce_gen
     << ", lambda=" << l.lambda_loss << "); lambda_q=" << r.lambda_q
     << " lambda_k=" << r.lambda_k;
  if (r.mask_mean) os << " mask_mean=" << *r.mask_mean << " mask_std=" << r.mask_std.value_or(0);
  throw NumericError(os.str());
}

}  // namespace

std::string to_string(Policy policy) {
  return kPolicyNames[static_cast<std::size_t>(policy)];
}

const std::vector<std::string>& policy_names() { return kPolicyNames; }

Policy parse_policy(const std::string& name) {
  for (std::size_t i = 0; i < kPolicyNames.size(); ++i)
    if (kPolicyNames[i] == name) return static_cast<Policy>(i);
  std::string valid;
  for (const auto& n : kPolicyNames) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown policy '" + name + "' (valid: " + valid + ")");
}

void TrainConfig::validate() const {
  encoder.validate();
  if (feature_layer < 1 || feature_layer > encoder.num_stages()) {
    throw ConfigError("feature_layer " + std::to_string(feature_layer) + " outside [1, " +
                      std::to_string(encoder.num_stages()) + "]");
  }
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  if (!(baseline_alpha > 0.0)) throw ConfigError("baseline_alpha must be > 0");
  if (!(m0 >= 0.0 && m0 <= 1.0)) throw ConfigError("m0 must lie in [0, 1]");
  if (momentum_override && !(*momentum_override >= 0.0 && *momentum_override <= 1.0)) {
    throw ConfigError("momentum_override must lie in [0, 1]");
  }
  if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be >= 0");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) {
    throw ConfigError("sgd_momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(gamma0 >= 0.0)) throw ConfigError("gamma0 must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
}

double momentum_schedule(std::size_t t, std::size_t total, double m0) {
  if (total == 0 || t >= total) return 1.0;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return 1.0 - (1.0 - m0) * (std::cos(std::numbers::pi * frac) + 1.0) / 2.0;
}

double lr_schedule(std::size_t t, std::size_t total, double base_lr) {
  if (total == 0 || t >= total) return 0.0;
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return base_lr * (std::cos(std::numbers::pi * frac) + 1.0) / 2.0;
}

void sgd_update(std::span<double> param, std::span<const double> grad,
                std::span<double> velocity, double lr, double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw DimensionError("sgd_update: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

void sgd_update(ParamSet& params, VelocityMap& velocity, double lr, double momentum,
                double weight_decay) {
  for (auto& [name, t] : params) {
    auto& v = velocity[name];
    if (v.empty()) v.assign(t.numel(), 0.0);
    auto g = t.grad();
    sgd_update(t.mutable_data(), g, v, lr, momentum, weight_decay);
  }
}

TrainState init_train_state(const TrainConfig& config, std::size_t total_steps) {
  config.validate();
  TrainState s;
  s.student = init_params(config.encoder, config.seed);
  s.teacher = clone_params(s.student);
  s.mixblock = init_mixblock(config.encoder.feature_channels(config.feature_layer),
                             splitmix(config.seed));
  s.total_steps = total_steps;
  s.rng.seed(splitmix(config.seed ^ 0xa5a5a5a5ULL));
  return s;
}

Trainer::Trainer(TrainConfig config, std::size_t total_steps)
    : config_(std::move(config)),
      encoder_(config_.encoder),
      state_(init_train_state(config_, total_steps)) {}

const ParamSet& Trainer::eval_params() const {
  return config_.eval_encoder == EvalEncoder::teacher ? state_.teacher : state_.student;
}

StepResult Trainer::train_step(const Batch& batch) {
  switch (config_.policy) {
    case Policy::vanilla: return step_vanilla(batch.x, batch.labels);
    case Policy::mixup:
    case Policy::cutmix: return step_baseline(batch.x, batch.labels);
    case Policy::automix: return step_automix(batch.x, batch.labels);
  }
  throw ContractError("unhandled policy");
}

StepResult Trainer::step_vanilla(const Tensor& x, const std::vector<int>& labels) {
  StepResult r;
  ParamSet& student = state_.student;
  student.zero_grad();
  const auto k = config_.encoder.num_classes;
  {
    Tape tape;
    Tensor logits = encoder_.forward_logits(student, x);
    Tensor ce = cross_entropy(logits, one_hot(labels, k));
    r.losses = split_losses({ce.item(), 0.0}, {});
    r.clean_top1 = top1_accuracy(logits, labels);
    check_finite(r);
    backward(ce);
  }
  r.ledger.cls_to_student = max_abs_grad(student);
  finish_step(r);
  return r;
}

StepResult Trainer::step_baseline(const Tensor& x, const std::vector<int>& labels) {
  StepResult r;
  ParamSet& student = state_.student;
  student.zero_grad();
  const auto k = config_.encoder.num_classes;
  const auto n = x.dim(0);
  auto idx = random_permutation(n, state_.rng);
  const double lambda = sample_lambda(config_.baseline_alpha, state_.rng).lambda;
  Tensor x_j = gather_batch(x, idx);
  Tensor x_mix;
  double lambda_eff = lambda;
  if (config_.policy == Policy::mixup) {
    x_mix = mixup_linear(x, x_j, lambda);
    r.mask_mean = lambda;
    r.mask_std = 0.0;
  } else {
    MixedBatch mb = cutmix_box(x, x_j, lambda, state_.rng);
    x_mix = mb.x_mix;
    lambda_eff = mb.lambda_effective.front();
    MaskStats ms = mask_stats(*mb.mask, mb.lambda_effective);
    r.mask_mean = ms.mean;
    r.mask_std = ms.spatial_std;
  }
  r.lambda_q = lambda_eff;
  {
    Tape tape;
    Tensor logits = encoder_.forward_logits(student, x_mix);
    Tensor mce = mixup_ce(logits, one_hot(labels, k), one_hot(gather_labels(labels, idx), k),
                          lambda_eff);
    r.losses = split_losses({0.0, mce.item()}, {});
    check_finite(r);
    backward(mce);
  }
  r.ledger.cls_to_student = max_abs_grad(student);
  finish_step(r);
  return r;
}

StepResult Trainer::step_automix(const Tensor& x, const std::vector<int>& labels) {
  StepResult r;
  ParamSet& student = state_.student;
  const ParamSet& teacher = state_.teacher;
  ParamSet mix = state_.mixblock.as_param_set();
  student.zero_grad();
  mix.zero_grad();
  const auto k = config_.encoder.num_classes;
  const auto n = x.dim(0);
  const std::size_t layer = config_.feature_layer;
  r.gamma = GammaSchedule{config_.gamma0, state_.total_steps}.at(state_.step);

  Tape tape;
  // (1) teacher features, not recorded
  Tensor z = encoder_.forward_features(teacher, x, layer);

  // (2) two independent pairings and ratios
  auto idx_q = random_permutation(n, state_.rng);
  auto idx_k = random_permutation(n, state_.rng);
  r.lambda_q = sample_lambda(config_.alpha, state_.rng).lambda;
  r.lambda_k = sample_lambda(config_.alpha, state_.rng).lambda;

  // (3) mixed samples for each branch
  GeneratedMix mix_q = generate(x, gather_batch(x, idx_q), z, gather_batch(z, idx_q),
                                r.lambda_q, state_.mixblock);
  GeneratedMix mix_k = generate(x, gather_batch(x, idx_k), z, gather_batch(z, idx_k),
                                r.lambda_k, state_.mixblock);

  const Tensor y = one_hot(labels, k);

  // (4) classification bucket: the student sees mixed inputs as data.
  Tensor logits_cls = encoder_.forward_logits(student, x);
  Tensor ce = cross_entropy(logits_cls, y);
  Tensor logits_mix_q = encoder_.forward_logits(student, stop_gradient(mix_q.x_mix));
  Tensor mce_cls =
      mixup_ce(logits_mix_q, y, one_hot(gather_labels(labels, idx_q), k), r.lambda_q);
  Tensor loss_cls = add(ce, mce_cls);

  // (5) generation bucket through the frozen teacher
  Tensor logits_mix_k = encoder_.forward_logits(teacher, mix_k.x_mix);
  Tensor mce_gen =
      mixup_ce(logits_mix_k, y, one_hot(gather_labels(labels, idx_k), k), r.lambda_k);
  Tensor l_lambda = lambda_loss(mix_k.mask.s_i, r.lambda_k, r.gamma);
  Tensor loss_gen = add(mce_gen, l_lambda);

  r.losses = split_losses({ce.item(), mce_cls.item()}, {mce_gen.item(), l_lambda.item()});
  r.clean_top1 = top1_accuracy(logits_cls, labels);
  MaskStats ms = mask_stats(mix_k.mask.s_i, std::vector<double>{r.lambda_k});
  r.mask_mean = ms.mean;
  r.mask_std = ms.spatial_std;
  check_finite(r);

  // (6) disjoint graphs: two sweeps accumulate the gradient of the sum
  backward(loss_cls);
  r.ledger.cls_to_student = max_abs_grad(student);
  r.ledger.cls_to_mixblock = max_abs_grad(mix);
  r.ledger.cls_touched_mixblock = any_grad(mix);
  auto student_after_cls = snapshot_grads(student);
  backward(loss_gen);
  r.ledger.gen_to_student = max_abs_change(student, student_after_cls);
  r.ledger.gen_to_mixblock = max_abs_grad(mix);
  r.ledger.gen_to_teacher = max_abs_grad(teacher);
  r.ledger.gen_touched_teacher = any_grad(teacher);

  r.lr = lr_schedule(state_.step, state_.total_steps, config_.base_lr);
  sgd_update(mix, state_.mixblock_velocity, r.lr, config_.sgd_momentum, config_.weight_decay);
  finish_step(r);
  return r;
}

void Trainer::finish_step(StepResult& r) {
  r.lr = lr_schedule(state_.step, state_.total_steps, config_.base_lr);
  sgd_update(state_.student, state_.student_velocity, r.lr, config_.sgd_momentum,
             config_.weight_decay);
  r.momentum = config_.momentum_override.value_or(
      momentum_schedule(state_.step, state_.total_steps, config_.m0));
  ema_update(state_.teacher, state_.student, r.momentum);
  ++state_.step;
}

void write_metrics_csv_header(std::ostream& os) { os << kMetricsCsvHeader << '\n'; }

void write_metrics_csv_row(std::ostream& os, const EpochRecord& r) {
  os.precision(17);
  os << r.epoch << ',' << r.step << ',' << r.loss_ce << ',' << r.loss_mce_cls << ','
     << r.loss_mce_gen << ',' << r.loss_lambda << ',' << r.top1 << ',' << r.mask_mean << ','
     << r.mask_std << ',' << r.lr << ',' << r.momentum_m << '\n';
}

std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

FitResult fit(const TrainConfig& config, const LabeledDataset& train,
              const FitOptions& options) {
  config.validate();
  train.validate();
  if (train.num_classes != config.encoder.num_classes ||
      train.channels() != config.encoder.input_channels) {
    throw ConfigError("dataset (" + std::to_string(train.channels()) + " channels, " +
                      std::to_string(train.num_classes) +
                      " classes) does not match the encoder config");
  }
  const std::size_t spe = steps_per_epoch(train.size(), config.batch_size);
  Trainer trainer(config, spe * config.epochs);
  FitResult result;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto& rng = trainer.state().rng;
    auto batches = make_epoch_batches(train, config.batch_size, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    double mask_mean = 0.0, mask_std = 0.0, max_mask_std = 0.0;
    std::size_t mask_steps = 0;
    for (const auto& idx : batches) {
      Batch batch = make_batch(train, idx);
      if (config.augment) batch.x = augment_flip_crop(batch.x, rng);
      StepResult r = trainer.train_step(batch);
      rec.loss_ce += r.losses.ce;
      rec.loss_mce_cls += r.losses.mce_cls;
      rec.loss_mce_gen += r.losses.mce_gen;
      rec.loss_lambda += r.losses.lambda_loss;
      rec.lr = r.lr;
      rec.momentum_m = r.momentum;
      if (r.mask_mean) {
        mask_mean += *r.mask_mean;
        mask_std += *r.mask_std;
        max_mask_std = std::max(max_mask_std, *r.mask_std);
        ++mask_steps;
      }
    }
    const double nb = static_cast<double>(batches.size());
    rec.loss_ce /= nb;
    rec.loss_mce_cls /= nb;
    rec.loss_mce_gen /= nb;
    rec.loss_lambda /= nb;
    rec.step = trainer.state().step;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    rec.mask_mean = mask_steps ? mask_mean / static_cast<double>(mask_steps) : nan;
    rec.mask_std = mask_steps ? mask_std / static_cast<double>(mask_steps) : nan;
    if (config.policy == Policy::automix && max_mask_std < 1e-3) {
      rec.collapse_warning = true;
      if (options.log) {
        *options.log << "warning: epoch " << epoch << " mask spatial std stayed below 1e-3 "
                     << "(max " << max_mask_std << "); the mix block has collapsed to "
                     << "linear mixing\n";
      }
    }
    const Encoder& enc = trainer.encoder();
    rec.top1 = top1_accuracy(predict_logits(enc, trainer.eval_params(), train.images),
                             train.labels);
    if (options.test) {
      rec.test_top1 = top1_accuracy(
          predict_logits(enc, trainer.eval_params(), options.test->images), options.test->labels);
    }
    if (options.log) {
      *options.log << to_string(config.policy) << " epoch " << epoch << "/" << config.epochs
                   << " train_top1=" << rec.top1;
      if (rec.test_top1) *options.log << " test_top1=" << *rec.test_top1;
      *options.log << " ce=" << rec.loss_ce << " mce_cls=" << rec.loss_mce_cls
                   << " mce_gen=" << rec.loss_mce_gen << " lambda=" << rec.loss_lambda
                   << " mask_std=" << rec.mask_std << '\n';
    }
    if (options.on_epoch) options.on_epoch(rec);
    result.history.push_back(rec);
  }
  result.state = std::move(trainer.state());
  return result;
}

ParamSet checkpoint_tensors(const TrainState& state) {
  ParamSet out;
  for (const auto& [name, t] : with_prefix(state.student, "student")) out.set(name, t);
  for (const auto& [name, t] : with_prefix(state.teacher, "teacher")) out.set(name, t);
  for (const auto& [name, t] : with_prefix(state.mixblock.as_param_set(), "mixblock"))
    out.set(name, t);
  return out;
}

double median_of_last(std::span<const double> values, std::size_t window) {
  if (values.empty()) throw ContractError("median_of_last: no values");
  const std::size_t n = std::min(window, values.size());
  std::vector<double> tail(values.end() - static_cast<std::ptrdiff_t>(n), values.end());
  std::sort(tail.begin(), tail.end());
  return n % 2 ? tail[n / 2] : 0.5 * (tail[n / 2 - 1] + tail[n / 2]);
}

}  // namespace automix
