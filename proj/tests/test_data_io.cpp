#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "automix/data_io.hpp"
#include "automix/errors.hpp"
#include "test_util.hpp"

using namespace automix;

namespace {

std::string write_bytes(const std::string& name, const std::vector<std::uint8_t>& b) {
  std::ofstream os(name, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  return name;
}

std::vector<std::uint8_t> cifar_record(std::uint8_t label, std::uint8_t red, std::uint8_t rest) {
  std::vector<std::uint8_t> r(kCifarRecordBytes, rest);
  r[0] = label;
  std::fill(r.begin() + 1, r.begin() + 1 + 1024, red);
  return r;
}

}  // namespace

TEST_CASE("synthetic shapes construction") {
  LabeledDataset ds = gen_synthetic_shapes(10, 32, 4, 1);
  CHECK(ds.size() == 40);
  CHECK(ds.images.shape() == Shape{40, 1, 32, 32});
  std::vector<int> counts(4, 0);
  for (int y : ds.labels) ++counts[static_cast<std::size_t>(y)];
  CHECK(counts == std::vector<int>{10, 10, 10, 10});
  for (double v : ds.images.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_NOTHROW(ds.validate());

  LabeledDataset again = gen_synthetic_shapes(10, 32, 4, 1);
  CHECK(bitwise_equal(ds.images, again.images));
  CHECK(ds.labels == again.labels);
  CHECK(fingerprint(ds) == fingerprint(again));
  CHECK(fingerprint(ds) != fingerprint(gen_synthetic_shapes(10, 32, 4, 2)));
  CHECK(gen_synthetic_shapes(2, 16, 3, 1, 3).images.shape() == Shape{6, 3, 16, 16});
  CHECK_THROWS_AS(gen_synthetic_shapes(10, 15, 4, 1), ParameterError);
}

TEST_CASE("synthetic shapes are learnable by 3-NN on raw pixels") {
  LabeledDataset train = gen_synthetic_shapes(60, 32, 4, 3);
  LabeledDataset test = gen_synthetic_shapes(25, 32, 4, 4);
  const std::size_t D = 32 * 32;
  std::size_t correct = 0;
  for (std::size_t t = 0; t < test.size(); ++t) {
    std::vector<std::pair<double, int>> dist;
    for (std::size_t n = 0; n < train.size(); ++n) {
      double d = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        const double e = test.images[t * D + k] - train.images[n * D + k];
        d += e * e;
      }
      dist.emplace_back(d, train.labels[n]);
    }
    std::partial_sort(dist.begin(), dist.begin() + 3, dist.end());
    std::vector<int> votes(4, 0);
    for (int i = 0; i < 3; ++i) ++votes[static_cast<std::size_t>(dist[i].second)];
    const int pred = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    if (pred == test.labels[t]) ++correct;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(test.size()) > 0.6);
}

TEST_CASE("idx fixture") {
  const std::vector<std::uint8_t> file{0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64};
  IdxArray a = parse_idx(file);
  CHECK(a.dims == std::vector<std::size_t>{2, 2});
  Tensor t = read_idx(write_bytes("fixture.idx", file));
  CHECK(t.shape() == Shape{2, 2});
  CHECK(t[0] == 0.0);
  CHECK(t[1] == 1.0);
  CHECK(t[2] == 128.0 / 255.0);
  CHECK(t[3] == 64.0 / 255.0);

  auto short_payload = file;
  short_payload.pop_back();
  CHECK_THROWS_AS(parse_idx(short_payload), LengthError);
  auto long_payload = file;
  long_payload.push_back(1);
  CHECK_THROWS_AS(parse_idx(long_payload), LengthError);
  CHECK_THROWS_AS(parse_idx({0, 0, 8}), LengthError);
  CHECK_THROWS_AS(parse_idx({0, 0, 8, 2, 0, 0}), LengthError);
  auto bad_magic = file;
  bad_magic[1] = 1;
  CHECK_THROWS_AS(parse_idx(bad_magic), FormatError);
  auto bad_type = file;
  bad_type[2] = 0x0d;
  CHECK_THROWS_AS(parse_idx(bad_type), FormatError);
  CHECK_THROWS_AS(read_idx("missing.idx"), DatasetError);
}

TEST_CASE("idx round trip and datasets") {
  IdxArray images{{3, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}};
  write_idx("rt_images.idx", images);
  IdxArray back = read_idx_raw("rt_images.idx");
  CHECK(back.dims == images.dims);
  CHECK(back.bytes == images.bytes);
  write_idx("rt_labels.idx", IdxArray{{3}, {2, 0, 1}});
  LabeledDataset ds = read_idx_dataset("rt_images.idx", "rt_labels.idx", 3);
  CHECK(ds.images.shape() == Shape{3, 1, 2, 2});
  CHECK(ds.labels == std::vector<int>{2, 0, 1});
  CHECK(ds.images[4] == 5.0 / 255.0);
  CHECK_THROWS_AS(read_idx_dataset("rt_images.idx", "rt_labels.idx", 2), DatasetError);
  write_idx("rt_labels2.idx", IdxArray{{2}, {0, 1}});
  CHECK_THROWS_AS(read_idx_dataset("rt_images.idx", "rt_labels2.idx", 3), DatasetError);
}

TEST_CASE("cifar10 fixtures") {
  LabeledDataset one = parse_cifar10(cifar_record(7, 255, 0));
  CHECK(one.size() == 1);
  CHECK(one.labels.front() == 7);
  CHECK(one.num_classes == 10);
  CHECK(one.images.shape() == Shape{1, 3, 32, 32});
  for (std::size_t k = 0; k < 1024; ++k) {
    CHECK(one.images[k] == 1.0);
    CHECK(one.images[1024 + k] == 0.0);
  }

  auto two = cifar_record(3, 10, 20);
  auto second = cifar_record(5, 30, 40);
  two.insert(two.end(), second.begin(), second.end());
  LabeledDataset ds = read_cifar10_bin(write_bytes("two.bin", two));
  CHECK(ds.labels == std::vector<int>{3, 5});
  CHECK(ds.images[0] == 10.0 / 255.0);
  CHECK(ds.images[3 * 1024] == 30.0 / 255.0);

  CHECK_THROWS_AS(read_cifar10_bin(write_bytes("empty.bin", {})), DatasetError);
  auto ragged = cifar_record(1, 0, 0);
  ragged.push_back(0);
  CHECK_THROWS_AS(parse_cifar10(ragged), FormatError);
  auto bad_label = cifar_record(11, 0, 0);
  CHECK_THROWS_AS(parse_cifar10(bad_label), DatasetError);
}

TEST_CASE("epoch batches") {
  Rng rng(5);
  auto batches = make_epoch_batches(10, 4, rng);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen == std::multiset<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(make_epoch_batches(10, 4, rng) != batches);
  CHECK_THROWS_AS(make_epoch_batches(10, 0, rng), ParameterError);

  LabeledDataset ds = gen_synthetic_shapes(2, 16, 2, 9);
  Batch b = make_batch(ds, std::vector<std::size_t>{3, 0});
  CHECK(b.labels == std::vector<int>{ds.labels[3], ds.labels[0]});
  CHECK(b.x.shape() == Shape{2, 1, 16, 16});
  CHECK(b.x[0] == ds.images[3 * 256]);
}

TEST_CASE("standardization") {
  LabeledDataset train = gen_synthetic_shapes(20, 32, 4, 11, 3);
  ChannelStats st = compute_channel_stats(train.images);
  Tensor z = standardize(train.images, st);
  ChannelStats after = compute_channel_stats(z);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(std::abs(after.mean[c]) < 0.05);
    CHECK(std::abs(after.stddev[c] - 1.0) < 0.1);
  }
  CHECK(automix::testing::max_abs_diff(destandardize(z, st), train.images) < 1e-12);
  ChannelStats wrong{{0.0}, {1.0}};
  CHECK_THROWS_AS(standardize(train.images, wrong), DimensionError);
}

TEST_CASE("flip and crop augmentation") {
  Rng rng(12);
  Tensor x = automix::testing::random_tensor({3, 2, 8, 8}, rng);
  Tensor a = augment_flip_crop(x, rng);
  CHECK(a.shape() == x.shape());
  Rng same(0);
  Tensor none = augment_flip_crop(x, same, 0);
  // Without padding each sample is either itself or its mirror image.
  for (std::size_t n = 0; n < 3; ++n) {
    bool ident = true, mirror = true;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t q = 0; q < 8; ++q) {
          const double v = none[((n * 2 + c) * 8 + r) * 8 + q];
          ident &= v == x[((n * 2 + c) * 8 + r) * 8 + q];
          mirror &= v == x[((n * 2 + c) * 8 + r) * 8 + (7 - q)];
        }
    CHECK((ident || mirror));
  }
}
