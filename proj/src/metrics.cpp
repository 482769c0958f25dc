#include "automix/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "automix/errors.hpp"
#include "automix/losses.hpp"
#include "automix/mix_policies.hpp"
#include "automix/ops.hpp"

namespace automix {

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw DimensionError("argmax_rows: expected [N,k], got " + shape_str(logits.shape()));
  }
  const auto N = logits.dim(0), K = logits.dim(1);
  auto d = logits.data();
  std::vector<int> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (d[n * K + k] > d[n * K + best]) best = k;
    out[n] = static_cast<int>(best);
  }
  return out;
}

double top1_accuracy(const Tensor& logits, std::span<const int> labels) {
  auto pred = argmax_rows(logits);
  if (pred.size() != labels.size()) throw DimensionError("top1_accuracy: label count mismatch");
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

PairAccuracy mixed_topk_accuracy(const Tensor& logits, std::span<const int> y_i,
                                 std::span<const int> y_j) {
  if (logits.rank() != 2 || logits.dim(0) != y_i.size() || y_i.size() != y_j.size()) {
    throw DimensionError("mixed_topk_accuracy: logits/label shape mismatch");
  }
  const auto N = logits.dim(0), K = logits.dim(1);
  if (K < 2) throw DimensionError("mixed_topk_accuracy: needs at least 2 classes");
  auto d = logits.data();
  PairAccuracy acc;
  std::size_t top1 = 0, top2 = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (y_i[n] == y_j[n]) continue;
    ++acc.counted;
    const double* row = d.data() + n * K;
    std::size_t first = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (row[k] > row[first]) first = k;
    std::size_t second = first == 0 ? 1 : 0;
    for (std::size_t k = 0; k < K; ++k)
      if (k != first && row[k] > row[second]) second = k;
    const int a = static_cast<int>(first), b = static_cast<int>(second);
    if (a == y_i[n] || a == y_j[n]) ++top1;
    if ((a == y_i[n] && b == y_j[n]) || (a == y_j[n] && b == y_i[n])) ++top2;
  }
  if (acc.counted > 0) {
    acc.top1_in_pair = static_cast<double>(top1) / static_cast<double>(acc.counted);
    acc.top2_equals_pair = static_cast<double>(top2) / static_cast<double>(acc.counted);
  }
  return acc;
}

CalibrationReport calibration_report(std::span<const double> confidences,
                                     std::span<const bool> correct, std::size_t bins) {
  if (confidences.empty()) throw ContractError("ece: no predictions");
  if (confidences.size() != correct.size()) throw ContractError("ece: length mismatch");
  if (bins == 0) throw ParameterError("ece: bins must be >= 1");
  CalibrationReport rep;
  rep.bins.resize(bins);
  std::vector<double> conf_sum(bins, 0.0), hit_sum(bins, 0.0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw ParameterError("ece: confidence outside [0, 1]");
    auto b = static_cast<std::size_t>(std::ceil(c * static_cast<double>(bins)));
    b = b == 0 ? 0 : std::min(b - 1, bins - 1);
    ++rep.bins[b].count;
    conf_sum[b] += c;
    hit_sum[b] += correct[i] ? 1.0 : 0.0;
  }
  const double total = static_cast<double>(confidences.size());
  for (std::size_t b = 0; b < bins; ++b) {
    auto& bin = rep.bins[b];
    bin.low = static_cast<double>(b) / static_cast<double>(bins);
    bin.high = static_cast<double>(b + 1) / static_cast<double>(bins);
    if (bin.count == 0) continue;
    const double n = static_cast<double>(bin.count);
    bin.confidence = conf_sum[b] / n;
    bin.accuracy = hit_sum[b] / n;
    rep.ece += (n / total) * std::abs(bin.accuracy - bin.confidence);
  }
  return rep;
}

double ece(std::span<const double> confidences, std::span<const bool> correct,
           std::size_t bins) {
  return calibration_report(confidences, correct, bins).ece;
}

CalibrationReport calibration_from_logits(const Tensor& logits, std::span<const int> labels,
                                          std::size_t bins) {
  Tensor p = softmax_rows(logits.detach());
  const auto N = p.dim(0), K = p.dim(1);
  auto pred = argmax_rows(logits);
  std::vector<double> conf(N);
  std::unique_ptr<bool[]> hit(new bool[N]);
  for (std::size_t n = 0; n < N; ++n) {
    conf[n] = p[n * K + static_cast<std::size_t>(pred[n])];
    hit[n] = pred[n] == labels[n];
  }
  return calibration_report(conf, std::span<const bool>(hit.get(), N), bins);
}

void write_reliability_csv(std::ostream& os, const CalibrationReport& report) {
  os << "bin_low,bin_high,count,confidence,accuracy\n";
  os.precision(17);
  for (const auto& b : report.bins) {
    os << b.low << ',' << b.high << ',' << b.count << ',' << b.confidence << ','
       << b.accuracy << '\n';
  }
}

Tensor fgsm_perturb(const Encoder& encoder, const ParamSet& params, const Tensor& x,
                    std::span<const int> labels, double epsilon, const ChannelStats& stats) {
  if (epsilon < 0.0) throw ParameterError("fgsm: epsilon must be >= 0");
  std::vector<double> grad;
  {
    Tape tape;
    Tensor probe = Tensor::parameter(x.shape(), {x.data().begin(), x.data().end()});
    Tensor loss = cross_entropy(encoder.forward_logits(clone_params(params), probe),
                                one_hot(labels, encoder.config().num_classes));
    backward(loss);
    grad = probe.grad();
  }
  Tensor raw = destandardize(x, stats);
  auto r = raw.data();
  std::vector<double> adv(r.size());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    // d/d raw = d/d standardized / std, same sign.
    const double s = grad[i] > 0 ? 1.0 : (grad[i] < 0 ? -1.0 : 0.0);
    adv[i] = std::clamp(r[i] + epsilon * s, 0.0, 1.0);
  }
  return standardize(Tensor(x.shape(), std::move(adv)), stats);
}

double fgsm_error(const Encoder& encoder, const ParamSet& params, const Tensor& x,
                  std::span<const int> labels, double epsilon, const ChannelStats& stats) {
  Tensor adv = fgsm_perturb(encoder, params, x, labels, epsilon, stats);
  return 1.0 - top1_accuracy(predict_logits(encoder, params, adv), labels);
}

MaskStats mask_stats(const Tensor& masks, std::span<const double> lambdas) {
  if (masks.rank() != 4 || masks.dim(1) != 1) {
    throw DimensionError("mask_stats: expected [N,1,H,W], got " + shape_str(masks.shape()));
  }
  const auto N = masks.dim(0), HW = masks.dim(2) * masks.dim(3);
  if (lambdas.size() != N && lambdas.size() != 1) {
    throw DimensionError("mask_stats: need one lambda per sample or a single lambda");
  }
  auto d = masks.data();
  MaskStats st;
  double all = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double acc = 0.0;
    for (std::size_t p = 0; p < HW; ++p) acc += d[n * HW + p];
    const double mu = acc / static_cast<double>(HW);
    double var = 0.0;
    for (std::size_t p = 0; p < HW; ++p) var += (d[n * HW + p] - mu) * (d[n * HW + p] - mu);
    const double lam = lambdas.size() == 1 ? lambdas[0] : lambdas[n];
    st.lambda_residual += std::abs(mu - lam);
    st.spatial_std += std::sqrt(var / static_cast<double>(HW));
    all += acc;
  }
  st.lambda_residual /= static_cast<double>(N);
  st.spatial_std /= static_cast<double>(N);
  st.mean = all / static_cast<double>(N * HW);
  return st;
}

Tensor predict_logits(const Encoder& encoder, const ParamSet& params, const Tensor& images,
                      std::size_t batch_size) {
  const auto N = images.dim(0);
  const std::size_t row = images.numel() / std::max<std::size_t>(N, 1);
  const std::size_t K = encoder.config().num_classes;
  std::vector<double> out;
  out.reserve(N * K);
  ParamSet frozen = clone_params(params);
  for (std::size_t start = 0; start < N; start += batch_size) {
    const std::size_t n = std::min(batch_size, N - start);
    Shape shape = images.shape();
    shape[0] = n;
    Tensor chunk(shape, {images.data().begin() + static_cast<std::ptrdiff_t>(start * row),
                         images.data().begin() + static_cast<std::ptrdiff_t>((start + n) * row)});
    Tensor logits = encoder.forward_logits(frozen, chunk);
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  }
  return Tensor({N, K}, std::move(out));
}

}  // namespace automix
