#include "automix/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>

#include "automix/errors.hpp"

namespace automix {

void LabeledDataset::validate() const {
  if (labels.empty()) throw DatasetError("dataset '" + split + "' is empty");
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw DatasetError("dataset '" + split + "': images " + shape_str(images.shape()) +
                       " do not match " + std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DatasetError("dataset '" + split + "': label " + std::to_string(y) +
                         " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

namespace {

struct Vec2 {
  double x, y;
};

double length(Vec2 v) { return std::hypot(v.x, v.y); }

double sdf_disk(Vec2 p, double r) { return length(p) - r; }

double sdf_square(Vec2 p, double half) {
  const double qx = std::abs(p.x) - half;
  const double qy = std::abs(p.y) - half;
  const double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
  return outside + std::min(std::max(qx, qy), 0.0);
}

// Equilateral triangle with half side `r`, centred on its centroid.
double sdf_triangle(Vec2 p, double r) {
  const double k = std::sqrt(3.0);
  p.x = std::abs(p.x) - r;
  p.y = p.y + r / k;
  if (p.x + k * p.y > 0.0) p = {(p.x - k * p.y) / 2.0, (-k * p.x - p.y) / 2.0};
  p.x -= std::clamp(p.x, -2.0 * r, 0.0);
  return -length(p) * (p.y < 0 ? -1.0 : 1.0);
}

double sdf_ring(Vec2 p, double r) { return std::abs(length(p) - 0.75 * r) - 0.22 * r; }

double shape_sdf(int cls, Vec2 p, double r) {
  switch (cls) {
    case 0: return sdf_disk(p, r);
    case 1: return sdf_square(p, 0.85 * r);
    case 2: return sdf_triangle(p, 1.05 * r);
    default: return sdf_ring(p, r);
  }
}

}  // namespace

LabeledDataset gen_synthetic_shapes(std::size_t n_per_class, std::size_t size,
                                    std::size_t k, std::uint64_t seed,
                                    std::size_t channels) {
  if (size < 16) throw ParameterError("synthetic shapes: size must be >= 16");
  if (k < 1 || k > 4) throw ParameterError("synthetic shapes: k must lie in [1, 4]");
  if (n_per_class == 0) throw ParameterError("synthetic shapes: n_per_class must be >= 1");
  if (channels == 0) throw ParameterError("synthetic shapes: channels must be >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.1);
  const std::size_t n = n_per_class * k;
  const double side = static_cast<double>(size);
  std::vector<double> pix(n * channels * size * size);
  std::vector<int> labels(n);
  std::vector<double> tint(channels);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % k);
    labels[i] = cls;
    const double r = side * (0.17 + 0.1 * unit(rng));
    const double jitter = side * 0.12;
    const double cx = side / 2 + jitter * (2 * unit(rng) - 1);
    const double cy = side / 2 + jitter * (2 * unit(rng) - 1);
    const double theta = 2 * std::numbers::pi * unit(rng);
    const double intensity = 0.7 + 0.3 * unit(rng);
    for (auto& t : tint) t = channels == 1 ? 1.0 : 0.5 + 0.5 * unit(rng);
    const double c = std::cos(theta), s = std::sin(theta);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const Vec2 local{c * dx + s * dy, -s * dx + c * dy};
        const double coverage = std::clamp(0.5 - shape_sdf(cls, local, r), 0.0, 1.0);
        for (std::size_t ch = 0; ch < channels; ++ch) {
          const double v = coverage * intensity * tint[ch] + noise(rng);
          pix[((i * channels + ch) * size + y) * size + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  LabeledDataset ds{Tensor({n, channels, size, size}, std::move(pix)), std::move(labels), k,
                    "synthetic"};
  return ds;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

IdxArray parse_idx(const std::vector<std::uint8_t>& b) {
  if (b.size() < 4) {
    throw LengthError("idx: file truncated in header (" + std::to_string(b.size()) +
                      " bytes)");
  }
  if (b[0] != 0 || b[1] != 0) throw FormatError("idx: bad magic at offset 0");
  if (b[2] != 0x08) {
    char code[8];
    std::snprintf(code, sizeof(code), "0x%02x", b[2]);
    throw FormatError(std::string("idx: unsupported data type ") + code + " at offset 2");
  }
  const std::size_t rank = b[3];
  if (rank == 0) throw FormatError("idx: zero dimensions at offset 3");
  const std::size_t header = 4 + 4 * rank;
  if (b.size() < header) throw LengthError("idx: file truncated in dimension list");
  IdxArray out;
  out.dims.resize(rank);
  std::size_t total = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t o = 4 + 4 * d;
    out.dims[d] = (std::size_t{b[o]} << 24) | (std::size_t{b[o + 1]} << 16) |
                  (std::size_t{b[o + 2]} << 8) | std::size_t{b[o + 3]};
    total *= out.dims[d];
  }
  if (b.size() - header != total) {
    throw LengthError("idx: dimensions imply " + std::to_string(total) +
                      " payload bytes, file holds " + std::to_string(b.size() - header));
  }
  out.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(header), b.end());
  return out;
}

IdxArray read_idx_raw(const std::string& path) { return parse_idx(read_file_bytes(path)); }

Tensor read_idx(const std::string& path) {
  IdxArray a = read_idx_raw(path);
  std::vector<double> v(a.bytes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.bytes[i] / 255.0;
  return Tensor(Shape(a.dims.begin(), a.dims.end()), std::move(v));
}

void write_idx(const std::string& path, const IdxArray& a) {
  std::size_t total = 1;
  for (auto d : a.dims) total *= d;
  if (a.dims.empty() || a.dims.size() > 255 || total != a.bytes.size()) {
    throw ParameterError("write_idx: dims do not match payload");
  }
  std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(a.dims.size())};
  for (auto d : a.dims) {
    out.push_back(static_cast<std::uint8_t>(d >> 24));
    out.push_back(static_cast<std::uint8_t>(d >> 16));
    out.push_back(static_cast<std::uint8_t>(d >> 8));
    out.push_back(static_cast<std::uint8_t>(d));
  }
  out.insert(out.end(), a.bytes.begin(), a.bytes.end());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

LabeledDataset read_idx_dataset(const std::string& images_path,
                                const std::string& labels_path, std::size_t num_classes) {
  Tensor images = read_idx(images_path);
  IdxArray labels = read_idx_raw(labels_path);
  if (labels.dims.size() != 1) throw FormatError("idx labels: expected a 1-d array");
  Shape shape = images.shape();
  if (shape.size() == 3) shape = {shape[0], 1, shape[1], shape[2]};
  if (shape.size() != 4) throw FormatError("idx images: expected 3 or 4 dimensions");
  LabeledDataset ds{Tensor(shape, {images.data().begin(), images.data().end()}), {}, num_classes,
                    "idx"};
  ds.labels.assign(labels.bytes.begin(), labels.bytes.end());
  ds.validate();
  return ds;
}

LabeledDataset parse_cifar10(const std::vector<std::uint8_t>& b) {
  if (b.empty()) throw DatasetError("cifar10: empty file");
  if (b.size() % kCifarRecordBytes != 0) {
    throw FormatError("cifar10: length " + std::to_string(b.size()) +
                      " is not a multiple of " + std::to_string(kCifarRecordBytes));
  }
  const std::size_t n = b.size() / kCifarRecordBytes;
  std::vector<double> pix(n * 3072);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = b.data() + i * kCifarRecordBytes;
    labels[i] = rec[0];
    for (std::size_t p = 0; p < 3072; ++p) pix[i * 3072 + p] = rec[1 + p] / 255.0;
  }
  LabeledDataset ds{Tensor({n, 3, 32, 32}, std::move(pix)), std::move(labels), 10, "cifar10"};
  ds.validate();
  return ds;
}

LabeledDataset read_cifar10_bin(const std::string& path) {
  return parse_cifar10(read_file_bytes(path));
}

ChannelStats compute_channel_stats(const Tensor& images) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw DatasetError("channel stats: expected non-empty [N,C,H,W]");
  }
  const auto N = images.dim(0), C = images.dim(1), HW = images.dim(2) * images.dim(3);
  auto d = images.data();
  ChannelStats st{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
  const double count = static_cast<double>(N * HW);
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) acc += d[(n * C + c) * HW + p];
    const double mu = acc / count;
    double var = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const double e = d[(n * C + c) * HW + p] - mu;
        var += e * e;
      }
    st.mean[c] = mu;
    const double sd = std::sqrt(var / count);
    st.stddev[c] = sd > 0.0 ? sd : 1.0;
  }
  return st;
}

namespace {

template <typename Fn>
Tensor per_channel(const Tensor& images, const ChannelStats& st, Fn fn) {
  const auto N = images.dim(0), C = images.dim(1), HW = images.dim(2) * images.dim(3);
  if (st.mean.size() != C || st.stddev.size() != C) {
    throw DimensionError("channel stats do not match " + shape_str(images.shape()));
  }
  auto d = images.data();
  std::vector<double> out(d.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        const auto i = (n * C + c) * HW + p;
        out[i] = fn(d[i], st.mean[c], st.stddev[c]);
      }
  return Tensor(images.shape(), std::move(out));
}

}  // namespace

Tensor standardize(const Tensor& images, const ChannelStats& st) {
  return per_channel(images, st, [](double v, double mu, double sd) { return (v - mu) / sd; });
}

Tensor destandardize(const Tensor& images, const ChannelStats& st) {
  return per_channel(images, st, [](double v, double mu, double sd) { return v * sd + mu; });
}

std::vector<std::vector<std::size_t>> make_epoch_batches(std::size_t n, std::size_t batch_size,
                                                         Rng& rng) {
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  auto order = random_permutation(n, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> make_epoch_batches(const LabeledDataset& ds,
                                                         std::size_t batch_size, Rng& rng) {
  return make_epoch_batches(ds.size(), batch_size, rng);
}

Batch make_batch(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  const std::size_t row = ds.channels() * ds.height() * ds.width();
  std::vector<double> x(indices.size() * row);
  std::vector<int> labels(indices.size());
  auto src = ds.images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.data() + indices[i] * row, row, x.data() + i * row);
    labels[i] = ds.labels.at(indices[i]);
  }
  return {Tensor({indices.size(), ds.channels(), ds.height(), ds.width()}, std::move(x)),
          std::move(labels)};
}

Tensor augment_flip_crop(const Tensor& x, Rng& rng, std::size_t pad) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto d = x.data();
  std::vector<double> out(d.size(), 0.0);
  const long p = static_cast<long>(pad);
  std::uniform_int_distribution<long> shift(-p, p);
  std::bernoulli_distribution flip(0.5);
  for (std::size_t n = 0; n < N; ++n) {
    const bool f = flip(rng);
    const long oy = shift(rng);
    const long ox = shift(rng);
    for (std::size_t c = 0; c < C; ++c) {
      const double* in = d.data() + (n * C + c) * H * W;
      double* o = out.data() + (n * C + c) * H * W;
      for (std::size_t y = 0; y < H; ++y) {
        const long sy = static_cast<long>(y) + oy;
        if (sy < 0 || sy >= static_cast<long>(H)) continue;
        for (std::size_t xx = 0; xx < W; ++xx) {
          long sx = static_cast<long>(xx) + ox;
          if (sx < 0 || sx >= static_cast<long>(W)) continue;
          if (f) sx = static_cast<long>(W) - 1 - sx;
          o[y * W + xx] = in[sy * static_cast<long>(W) + sx];
        }
      }
    }
  }
  return Tensor(x.shape(), std::move(out));
}

std::uint64_t fingerprint(const LabeledDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (auto e : ds.images.shape()) mix(e);
  for (double v : ds.images.data()) mix(std::bit_cast<std::uint64_t>(v));
  for (int y : ds.labels) mix(static_cast<std::uint64_t>(y));
  mix(ds.num_classes);
  return h;
}

}  // namespace automix
