#include "automix/models.hpp"

#include <cmath>
#include <random>

#include "automix/errors.hpp"
#include "automix/ops.hpp"

namespace automix {

namespace {

std::string stage_key(std::size_t stage, const char* what) {
  return "stage" + std::to_string(stage) + "." + what;
}

}  // namespace

void EncoderConfig::validate() const {
  if (stage_channels.size() != stage_strides.size()) {
    throw ParameterError("encoder: stage_channels and stage_strides differ in length");
  }
  if (stage_channels.size() < 2) {
    throw ParameterError("encoder: at least 2 stages are required");
  }
  if (input_channels == 0 || num_classes == 0 || kernel_size == 0) {
    throw ParameterError("encoder: channels, classes and kernel size must be positive");
  }
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    if (stage_channels[i] == 0 || stage_strides[i] == 0) {
      throw ParameterError("encoder: stage " + std::to_string(i + 1) +
                           " has a zero channel count or stride");
    }
  }
}

std::size_t EncoderConfig::cumulative_stride(std::size_t layer) const {
  if (layer < 1 || layer > num_stages()) {
    throw ParameterError("feature layer " + std::to_string(layer) +
                         " outside [1, " + std::to_string(num_stages()) + "]");
  }
  std::size_t s = 1;
  for (std::size_t i = 0; i < layer; ++i) s *= stage_strides[i];
  return s;
}

std::size_t EncoderConfig::feature_channels(std::size_t layer) const {
  cumulative_stride(layer);
  return stage_channels[layer - 1];
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [_, t] : tensors_) t.zero_grad();
}

void ParamSet::set_requires_grad(bool flag) {
  for (auto& [_, t] : tensors_) t.set_requires_grad(flag);
}

bool same_layout(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape() != ib->second.shape())
      return false;
  }
  return true;
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (!same_layout(a, b)) return false;
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    if (!bitwise_equal(ia->second, ib->second)) return false;
  }
  return true;
}

ParamSet init_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParamSet params;
  auto he = [&rng](Shape shape, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::parameter(std::move(shape), std::move(v));
  };
  std::size_t in = config.input_channels;
  const std::size_t k = config.kernel_size;
  for (std::size_t s = 0; s < config.num_stages(); ++s) {
    const std::size_t out = config.stage_channels[s];
    params.set(stage_key(s + 1, "conv.weight"), he({out, in, k, k}, in * k * k));
    params.set(stage_key(s + 1, "gain"),
               Tensor::parameter({out}, std::vector<double>(out, 1.0)));
    params.set(stage_key(s + 1, "bias"),
               Tensor::parameter({out}, std::vector<double>(out, 0.0)));
    in = out;
  }
  params.set("head.weight", he({in, config.num_classes}, in));
  params.set("head.bias", Tensor::parameter({config.num_classes},
                                            std::vector<double>(config.num_classes, 0.0)));
  return params;
}

ParamSet clone_params(const ParamSet& src) {
  ParamSet out;
  for (const auto& [name, t] : src) out.set(name, t.detach());
  return out;
}

void ema_update(ParamSet& teacher, const ParamSet& student, double m) {
  if (!same_layout(teacher, student)) {
    throw ContractError("ema_update: teacher and student parameter layouts differ");
  }
  if (!(m >= 0.0 && m <= 1.0)) {
    throw ParameterError("ema_update: momentum must lie in [0, 1]");
  }
  auto is = student.begin();
  for (auto it = teacher.begin(); it != teacher.end(); ++it, ++is) {
    auto dst = it->second.mutable_data();
    auto src = is->second.data();
    if (m == 1.0) continue;
    if (m == 0.0) {
      std::copy(src.begin(), src.end(), dst.begin());
      continue;
    }
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = m * dst[i] + (1.0 - m) * src[i];
  }
}

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
}

Tensor Encoder::run_stages(const ParamSet& params, const Tensor& x,
                           std::size_t last_stage, Tensor* tap,
                           std::size_t tap_layer) const {
  if (x.rank() != 4 || x.dim(1) != config_.input_channels) {
    throw DimensionError("encoder: expected input [N, " +
                         std::to_string(config_.input_channels) +
                         ", H, W], got " + shape_str(x.shape()));
  }
  const std::size_t total = config_.cumulative_stride(last_stage);
  if (x.dim(2) % total != 0 || x.dim(3) % total != 0) {
    throw DimensionError("encoder: input " + shape_str(x.shape()) +
                         " not divisible by cumulative stride " + std::to_string(total));
  }
  const std::size_t pad = config_.kernel_size / 2;
  Tensor h = x;
  for (std::size_t s = 1; s <= last_stage; ++s) {
    h = conv2d(h, params.at(stage_key(s, "conv.weight")),
               config_.stage_strides[s - 1], pad);
    h = channel_affine(h, params.at(stage_key(s, "gain")),
                       params.at(stage_key(s, "bias")));
    h = relu(h);
    if (tap != nullptr && s == tap_layer) *tap = h;
  }
  return h;
}

Tensor Encoder::head(const ParamSet& params, const Tensor& features) const {
  Tensor pooled = global_avg_pool(features);
  return add_row_bias(matmul(pooled, params.at("head.weight")),
                      params.at("head.bias"));
}

Tensor Encoder::forward_features(const ParamSet& params, const Tensor& x,
                                 std::size_t layer) const {
  config_.cumulative_stride(layer);
  return run_stages(params, x, layer, nullptr, 0);
}

Tensor Encoder::forward_logits(const ParamSet& params, const Tensor& x) const {
  return head(params, run_stages(params, x, config_.num_stages(), nullptr, 0));
}

Encoder::Output Encoder::forward(const ParamSet& params, const Tensor& x,
                                 std::size_t layer) const {
  config_.cumulative_stride(layer);
  Output out;
  Tensor last = run_stages(params, x, config_.num_stages(), &out.features, layer);
  out.logits = head(params, last);
  return out;
}

ParamSet with_prefix(const ParamSet& src, const std::string& prefix) {
  ParamSet out;
  for (const auto& [name, t] : src) out.set(prefix + "." + name, t);
  return out;
}

ParamSet strip_prefix(const ParamSet& src, const std::string& prefix) {
  ParamSet out;
  const std::string p = prefix + ".";
  for (const auto& [name, t] : src) {
    if (name.rfind(p, 0) == 0) out.set(name.substr(p.size()), t);
  }
  return out;
}

}  // namespace automix
