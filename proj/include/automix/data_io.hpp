#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "automix/mix_policies.hpp"
#include "automix/tensor.hpp"

namespace automix {

struct LabeledDataset {
  Tensor images;  // [N,C,H,W]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  // Throws DatasetError if empty, mis-shaped or carrying labels >= k.
  void validate() const;
};

// k <= 4 classes (disk, square, triangle, ring), anti-aliased, with random
// position, scale and rotation plus N(0, 0.1) pixel noise, clipped to [0, 1].
// Sample i has label i % k.
LabeledDataset gen_synthetic_shapes(std::size_t n_per_class, std::size_t size,
                                    std::size_t k, std::uint64_t seed,
                                    std::size_t channels = 1);

struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> bytes;
};

// Unsigned-byte IDX files only (type code 0x08).
IdxArray read_idx_raw(const std::string& path);
IdxArray parse_idx(const std::vector<std::uint8_t>& file_bytes);
// Pixel bytes scaled to [0, 1].
Tensor read_idx(const std::string& path);
void write_idx(const std::string& path, const IdxArray& array);

// Images [N,H,W] (or [N,C,H,W]) plus labels [N].
LabeledDataset read_idx_dataset(const std::string& images_path,
                                const std::string& labels_path,
                                std::size_t num_classes);

inline constexpr std::size_t kCifarRecordBytes = 3073;

LabeledDataset read_cifar10_bin(const std::string& path);
LabeledDataset parse_cifar10(const std::vector<std::uint8_t>& file_bytes);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

ChannelStats compute_channel_stats(const Tensor& images);
Tensor standardize(const Tensor& images, const ChannelStats& stats);
Tensor destandardize(const Tensor& images, const ChannelStats& stats);

// One shuffled pass over [0, n); the final short batch is kept.
std::vector<std::vector<std::size_t>> make_epoch_batches(std::size_t n,
                                                         std::size_t batch_size,
                                                         Rng& rng);
std::vector<std::vector<std::size_t>> make_epoch_batches(const LabeledDataset& ds,
                                                         std::size_t batch_size,
                                                         Rng& rng);

struct Batch {
  Tensor x;
  std::vector<int> labels;
};

Batch make_batch(const LabeledDataset& ds, std::span<const std::size_t> indices);

// Per-sample random horizontal flip and random crop from a zero-padded image.
Tensor augment_flip_crop(const Tensor& x, Rng& rng, std::size_t pad = 4);

// FNV-1a over shape, pixel bits and labels.
std::uint64_t fingerprint(const LabeledDataset& ds);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);

}  // namespace automix
