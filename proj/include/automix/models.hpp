#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "automix/tensor.hpp"

namespace automix {

struct EncoderConfig {
  std::size_t input_channels = 1;
  std::vector<std::size_t> stage_channels{16, 32, 64, 128};
  std::vector<std::size_t> stage_strides{2, 2, 2, 2};
  std::size_t num_classes = 4;
  std::size_t kernel_size = 3;

  // Throws ParameterError on an unusable configuration.
  void validate() const;
  std::size_t num_stages() const { return stage_channels.size(); }
  // Product of strides of stages 1..layer.
  std::size_t cumulative_stride(std::size_t layer) const;
  std::size_t feature_channels(std::size_t layer) const;
};

// Named parameter tensors, ordered by name.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const {
    return tensors_.count(name) != 0;
  }
  std::size_t size() const { return tensors_.size(); }
  std::size_t total_values() const;

  void zero_grad();
  void set_requires_grad(bool flag);

  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }
  Map::iterator begin() { return tensors_.begin(); }
  Map::iterator end() { return tensors_.end(); }

 private:
  Map tensors_;
};

bool same_layout(const ParamSet& a, const ParamSet& b);
bool bitwise_equal(const ParamSet& a, const ParamSet& b);

// He-normal conv and head weights (std sqrt(2 / fan_in)), unit per-channel
// gains, zero biases. Returned tensors accumulate gradients.
ParamSet init_params(const EncoderConfig& config, std::uint64_t seed);

// Deep copy with no gradient tracking.
ParamSet clone_params(const ParamSet& src);

// teacher <- m * teacher + (1 - m) * student, in place, outside any tape.
void ema_update(ParamSet& teacher, const ParamSet& student, double m);

// Plain conv -> per-channel affine -> ReLU stack with a GAP + linear head.
class Encoder {
 public:
  explicit Encoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }

  // Post-ReLU activation of stage `layer` (1-based).
  Tensor forward_features(const ParamSet& params, const Tensor& x,
                          std::size_t layer) const;
  Tensor forward_logits(const ParamSet& params, const Tensor& x) const;

  struct Output {
    Tensor features;
    Tensor logits;
  };
  Output forward(const ParamSet& params, const Tensor& x,
                 std::size_t layer) const;

 private:
  Tensor run_stages(const ParamSet& params, const Tensor& x,
                    std::size_t last_stage, Tensor* tap,
                    std::size_t tap_layer) const;
  Tensor head(const ParamSet& params, const Tensor& features) const;

  EncoderConfig config_;
};

// Flat binary container: "AMXCKPT1", u32 version, u32 record count, then per
// record u32 name length, name bytes, u32 rank, u64 extents, f64 values, all
// little-endian.
inline constexpr char kCheckpointMagic[8] = {'A', 'M', 'X', 'C',
                                             'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const ParamSet& tensors);
ParamSet read_checkpoint(const std::string& path);

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& tensors);
ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Prefixes every name with `prefix` + ".".
ParamSet with_prefix(const ParamSet& src, const std::string& prefix);
// Records whose name starts with `prefix` + ".", prefix stripped.
ParamSet strip_prefix(const ParamSet& src, const std::string& prefix);

}  // namespace automix
