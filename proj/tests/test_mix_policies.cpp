#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "automix/errors.hpp"
#include "automix/mix_policies.hpp"
#include "test_util.hpp"

using namespace automix;
using automix::testing::max_abs_diff;
using automix::testing::random_tensor;

TEST_CASE("sample_lambda moments") {
  Rng rng(11);
  const int n = 100000;
  for (double alpha : {1.0, 2.0}) {
    double s = 0.0, ss = 0.0;
    for (int i = 0; i < n; ++i) {
      const MixRatio r = sample_lambda(alpha, rng);
      CHECK(r.alpha == alpha);
      REQUIRE(r.lambda >= 0.0);
      REQUIRE(r.lambda <= 1.0);
      s += r.lambda;
      ss += r.lambda * r.lambda;
    }
    const double mean = s / n;
    const double var = ss / n - mean * mean;
    const double analytic = alpha * alpha / (4.0 * alpha * alpha * (2.0 * alpha + 1.0));
    CHECK(std::abs(mean - 0.5) < 0.005);
    CHECK(std::abs(var - analytic) < 0.003);
  }
  CHECK_THROWS_AS(sample_lambda(0.0, rng), ParameterError);
  CHECK_THROWS_AS(sample_lambda(-1.0, rng), ParameterError);
}

TEST_CASE("random_permutation is a permutation") {
  Rng rng(3);
  auto p = random_permutation(17, rng);
  auto sorted = p;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == identity_index(17));
  CHECK(random_permutation(1, rng) == std::vector<std::size_t>{0});
}

TEST_CASE("one_hot and mix_label") {
  const std::vector<int> labels{2, 0};
  Tensor y = one_hot(labels, 3);
  CHECK(y.shape() == Shape{2, 3});
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) ==
        std::vector<double>{0, 0, 1, 1, 0, 0});
  const std::vector<int> bad{3};
  CHECK_THROWS_AS(one_hot(bad, 3), ContractError);

  const std::vector<double> a{1, 0, 0, 0}, b{0, 1, 0, 0};
  CHECK(mix_label(a, b, 1.0) == a);
  CHECK(mix_label(a, a, 0.37) == a);
  const auto m = mix_label(a, b, 0.3);
  CHECK(m[0] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(m[1] == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(m[2] == 0.0);
  CHECK(m[3] == 0.0);
  CHECK(std::abs(m[0] + m[1] + m[2] + m[3] - 1.0) < 1e-15);
  const std::vector<double> two_hot{1, 1, 0, 0}, soft{0.5, 0.5, 0, 0};
  CHECK_THROWS_AS(mix_label(two_hot, b, 0.5), ContractError);
  CHECK_THROWS_AS(mix_label(soft, b, 0.5), ContractError);
}

TEST_CASE("mixup_linear") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  Tensor y = random_tensor({2, 3, 4, 4}, rng);
  CHECK(max_abs_diff(mixup_linear(x, x, 0.5), x) < 1e-15);
  CHECK(bitwise_equal(mixup_linear(x, y, 0.0), y));
  const double lam = 0.37;
  Tensor m = mixup_linear(x, y, lam);
  double err = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    err = std::max(err, std::abs(m[i] - (lam * x[i] + (1.0 - lam) * y[i])));
  CHECK(err < 1e-12);
  CHECK_THROWS_AS(mixup_linear(x, random_tensor({2, 3, 4, 5}, rng), 0.5), DimensionError);
}

TEST_CASE("cutmix endpoints") {
  std::mt19937_64 trng(6);
  Rng rng(6);
  Tensor x = random_tensor({2, 1, 8, 8}, trng);
  Tensor y = random_tensor({2, 1, 8, 8}, trng);
  MixedBatch keep = cutmix_box(x, y, 1.0, rng);
  CHECK(bitwise_equal(keep.x_mix, x));
  CHECK(keep.lambda_effective == std::vector<double>{1.0, 1.0});
  MixedBatch swap = cutmix_box(x, y, 0.0, rng);
  CHECK(bitwise_equal(swap.x_mix, y));
  CHECK(swap.lambda_effective == std::vector<double>{0.0, 0.0});
  CHECK_THROWS_AS(cutmix_box(random_tensor({1, 1, 1, 8}, trng),
                             random_tensor({1, 1, 1, 8}, trng), 0.5, rng),
                  DimensionError);
}

TEST_CASE("cutmix box area arithmetic") {
  Rng rng(7);
  int unclipped = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Box b = sample_cutmix_box(32, 32, 0.75, rng);
    CHECK(b.y1 <= 32);
    CHECK(b.x1 <= 32);
    CHECK(b.y1 - b.y0 <= 16);
    CHECK(b.x1 - b.x0 <= 16);
    if (b.area() == 256) ++unclipped;
  }
  CHECK(unclipped > 0);

  std::mt19937_64 trng(8);
  Tensor x = random_tensor({1, 2, 32, 32}, trng);
  Tensor y = random_tensor({1, 2, 32, 32}, trng);
  MixedBatch mb = cutmix_with_box(x, y, Box{4, 20, 10, 26});
  CHECK(mb.lambda_effective.front() == 1.0 - 256.0 / 1024.0);
  REQUIRE(mb.mask.has_value());
  const Tensor& mask = *mb.mask;
  // x_mix = m * x_i + (1 - m) * x_j with a binary box mask.
  double err = 0.0, mask_sum = 0.0;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t q = 0; q < 32; ++q) {
        const bool inside = r >= 4 && r < 20 && q >= 10 && q < 26;
        const double m = mask[r * 32 + q];
        CHECK((m == 0.0 || m == 1.0));
        CHECK((m == 0.0) == inside);
        if (c == 0) mask_sum += m;
        const std::size_t i = c * 1024 + r * 32 + q;
        err = std::max(err, std::abs(mb.x_mix[i] - (inside ? y[i] : x[i])));
      }
  CHECK(err == 0.0);
  CHECK(mask_sum / 1024.0 == mb.lambda_effective.front());
}

TEST_CASE("cutmix lambda_effective matches the clipped box") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const double lam = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    Rng probe = rng;
    Box b = sample_cutmix_box(12, 10, lam, probe);
    std::mt19937_64 trng(trial);
    Tensor x = random_tensor({3, 1, 12, 10}, trng);
    MixedBatch mb = cutmix_box(x, x, lam, rng);
    for (double le : mb.lambda_effective) CHECK(le == 1.0 - b.area() / 120.0);
  }
}
