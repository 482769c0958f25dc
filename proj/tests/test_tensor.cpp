#include <doctest.h>

#include <cmath>
#include <limits>

#include "automix/errors.hpp"
#include "automix/ops.hpp"
#include "test_util.hpp"

using namespace automix;
using automix::testing::max_abs_diff;
using automix::testing::random_tensor;

namespace {

// Direct nested-loop convolution.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, std::size_t stride,
                                std::size_t pad) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(N * F * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long ih = long(oh * stride + i) - long(pad);
                const long iw = long(ow * stride + j) - long(pad);
                if (ih < 0 || iw < 0 || ih >= long(H) || iw >= long(W)) continue;
                acc += x[((n * C + c) * H + ih) * W + iw] * w[((f * C + c) * kh + i) * kw + j];
              }
          out[((n * F + f) * Ho + oh) * Wo + ow] = acc;
        }
  return out;
}

Tensor weighted_sum(const Tensor& t, const Tensor& r) { return sum(mul(t, r)); }

}  // namespace

TEST_CASE("tensor construction and shape checks") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::scalar(1.0).dim(3), DimensionError);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("matmul") {
  std::mt19937_64 rng(1);
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {1, 2, 3, 4});
  CHECK(bitwise_equal(matmul(eye, b), b));
  CHECK(bitwise_equal(matmul(b, eye), b));
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  Tensor other = random_tensor({4, 2}, rng);
  const double err = grad_check([&](const Tensor& a) { return sum(matmul(a, other)); },
                                random_tensor({3, 4}, rng));
  CHECK(err < 1e-6);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  for (auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}, std::pair{2, 0}}) {
    Tensor y = conv2d(x, w, stride, pad);
    CHECK(max_abs_diff(y.data(), conv_oracle(x, w, stride, pad)) < 1e-12);
    CHECK(y.dim(2) == (5 + 2 * pad - 3) / stride + 1);
  }
  Tensor r = random_tensor({1, 3, 5, 5}, rng);
  CHECK(grad_check([&](const Tensor& v) { return weighted_sum(conv2d(v, w, 1, 1), r); }, x) < 1e-6);
  CHECK(grad_check([&](const Tensor& v) { return weighted_sum(conv2d(x, v, 1, 1), r); }, w) < 1e-6);
}

TEST_CASE("conv2d degenerate kernels") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 1, 4, 4}, rng);
  CHECK(bitwise_equal(conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), 1, 0), x));
  Tensor x2 = random_tensor({1, 2, 3, 3}, rng);
  Tensor summed = conv2d(x2, Tensor::full({1, 2, 1, 1}, 1.0), 1, 0);
  for (std::size_t i = 0; i < 9; ++i) CHECK(summed[i] == doctest::Approx(x2[i] + x2[9 + i]).epsilon(1e-15));
  Tensor zero = conv2d(x, Tensor::zeros({3, 1, 3, 3}), 1, 1);
  for (double v : zero.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 1, 7, 3}), 1, 1), DimensionError);
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3}), 1, 1), DimensionError);
}

TEST_CASE("softmax_rows") {
  CHECK(softmax_rows(Tensor({1, 1}, {42.0}))[0] == 1.0);
  Tensor eq = softmax_rows(Tensor({1, 2}, {3.0, 3.0}));
  CHECK(eq[0] == 0.5);
  CHECK(eq[1] == 0.5);
  Tensor p = softmax_rows(Tensor({1, 3}, {1, 2, 3}));
  const double z = std::exp(-2.0) + std::exp(-1.0) + 1.0;
  CHECK(std::abs(p[0] - std::exp(-2.0) / z) < 1e-12);
  CHECK(std::abs(p[1] - std::exp(-1.0) / z) < 1e-12);
  CHECK(std::abs(p[2] - 1.0 / z) < 1e-12);
  CHECK_THROWS_AS(softmax_rows(Tensor({1, 2}, {1.0, std::nan("")})), NumericError);

  std::mt19937_64 rng(4);
  Tensor big = random_tensor({50, 7}, rng, -300.0, 300.0);
  Tensor q = softmax_rows(big);
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += q[r * 7 + c];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("sigmoid") {
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(std::abs(sigmoid(Tensor::scalar(1e3)).item() - 1.0) < 1e-12);
  CHECK(std::abs(sigmoid(Tensor::scalar(std::log(3.0))).item() - 0.75) < 1e-15);
  Tensor r = sigmoid(Tensor({5}, {-30, -5, 0, 5, 30}));
  for (double v : r.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("concat_channels") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 3, 2, 2}, rng);
  CHECK(bitwise_equal(concat_channels(x, Tensor::zeros({2, 0, 2, 2})), x));
  Tensor c = concat_channels(Tensor::full({1, 1, 2, 2}, 1.0), Tensor::full({1, 1, 2, 2}, 2.0));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(c[i] == 1.0);
    CHECK(c[4 + i] == 2.0);
  }
  CHECK_THROWS_AS(concat_channels(x, Tensor::zeros({2, 1, 3, 2})), DimensionError);

  // Backward routes each slice of the output gradient to its source.
  Tape tape;
  Tensor a = Tensor::parameter({1, 2, 1, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::parameter({1, 1, 1, 2}, {5, 6});
  Tensor g({1, 3, 1, 2}, {10, 20, 30, 40, 50, 60});
  backward(sum(mul(concat_channels(a, b), g)));
  CHECK(a.grad() == std::vector<double>{10, 20, 30, 40});
  CHECK(b.grad() == std::vector<double>{50, 60});
}

TEST_CASE("upsample_bilinear") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 2, 3, 3}, rng);
  CHECK(bitwise_equal(upsample_bilinear(x, 1), x));
  for (std::size_t f : {2, 3, 8}) {
    Tensor c = upsample_bilinear(Tensor::full({1, 1, 2, 3}, 0.37), f);
    CHECK(c.dim(2) == 2 * f);
    for (double v : c.data()) CHECK(std::abs(v - 0.37) < 1e-15);
  }
  // Half-pixel centres: output column j samples input column (j + 0.5) / 2 - 0.5,
  // clamped to the edge.
  Tensor u = upsample_bilinear(Tensor({1, 1, 2, 2}, {0, 1, 0, 1}), 2);
  const std::vector<double> row{0.0, 0.25, 0.75, 1.0};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(u[r * 4 + c] - row[c]) < 1e-12);
  CHECK_THROWS_AS(upsample_bilinear(x, 0), ParameterError);
}

TEST_CASE("stop_gradient") {
  std::mt19937_64 rng(7);
  Tensor values = random_tensor({3, 3}, rng);
  Tape tape;
  Tensor x = Tensor::parameter({3, 3}, {values.data().begin(), values.data().end()});
  Tensor sg = stop_gradient(x);
  CHECK(bitwise_equal(sg, x));
  CHECK_FALSE(sg.on_tape());
  backward(sum(mul(sg, x)));
  CHECK(x.grad() == std::vector<double>(values.data().begin(), values.data().end()));

  Tensor w = Tensor::parameter({3, 3}, std::vector<double>(9, 0.5));
  Tensor y = Tensor::parameter({3, 3}, std::vector<double>(9, 1.0));
  backward(add(sum(stop_gradient(mul(w, w))), sum(y)));
  CHECK_FALSE(w.has_grad());
  for (double v : w.grad()) CHECK(v == 0.0);
}

TEST_CASE("backward basics") {
  std::mt19937_64 rng(8);
  Tensor v = random_tensor({4}, rng);
  {
    Tape tape;
    Tensor x = Tensor::parameter({4}, {v.data().begin(), v.data().end()});
    backward(sum(x));
    CHECK(x.grad() == std::vector<double>(4, 1.0));
  }
  {
    Tape tape;
    Tensor x = Tensor::parameter({4}, {v.data().begin(), v.data().end()});
    backward(scale(sum(mul(x, x)), 0.5));
    CHECK(max_abs_diff(x.grad(), v.data()) == 0.0);
  }
  {
    Tape tape;
    Tensor x = Tensor::parameter({4}, {v.data().begin(), v.data().end()});
    CHECK_THROWS_AS(backward(scale(x, 2.0)), ContractError);
  }
}

TEST_CASE("gradients accumulate across fan-out") {
  std::mt19937_64 rng(9);
  Tensor v = random_tensor({2, 3}, rng);
  auto grad_of = [&](auto&& f) {
    Tape tape;
    Tensor x = Tensor::parameter({2, 3}, {v.data().begin(), v.data().end()});
    backward(f(x));
    return x.grad();
  };
  auto f1 = [](const Tensor& x) { return sum(sigmoid(x)); };
  auto f2 = [](const Tensor& x) { return mean(mul(x, x)); };
  auto both = grad_of([&](const Tensor& x) { return add(f1(x), f2(x)); });
  auto g1 = grad_of(f1), g2 = grad_of(f2);
  for (std::size_t i = 0; i < both.size(); ++i) CHECK(std::abs(both[i] - (g1[i] + g2[i])) < 1e-15);
}

TEST_CASE("no recording without a tape or without grad-requiring inputs") {
  Tensor p = Tensor::parameter({2}, {1, 2});
  CHECK_FALSE(add(p, p).on_tape());
  Tape tape;
  Tensor c = Tensor({2}, {1, 2});
  CHECK_FALSE(add(c, c).on_tape());
  CHECK(add(p, c).on_tape());
  CHECK_FALSE(add(p, c).detach().on_tape());
}

TEST_CASE("composite expression over every op") {
  std::mt19937_64 rng(10);
  Tensor w = random_tensor({2, 1, 3, 3}, rng), w3 = random_tensor({2, 3, 3, 3}, rng);
  Tensor g = random_tensor({2}, rng), b = random_tensor({2}, rng);
  Tensor x2 = random_tensor({2, 1, 4, 4}, rng);
  Tensor hw = random_tensor({2, 3}, rng), hb = random_tensor({3}, rng);
  auto f = [&](const Tensor& x) {
    Tensor h = relu(channel_affine(conv2d(x, w, 1, 1), g, b));
    Tensor cat = concat_channels(h, one_minus(x2));
    Tensor up = upsample_bilinear(reshape(mean(cat), {1, 1, 1, 1}), 2);
    Tensor att = softmax_rows(
        bmm(transpose_last2(reshape(cat, {2, 3, 16})), reshape(sigmoid(cat), {2, 3, 16})));
    Tensor mixed = blend(cat, gather_batch(cat, {1, 0}), sigmoid(sub(x, x2)));
    Tensor logits = add_row_bias(matmul(global_avg_pool(conv2d(mixed, w3, 2, 1)), hw), hb);
    return add(sum(mul(logits, logits)), add(scale(sum(up), 0.1), mean(mul(att, att))));
  };
  CHECK(grad_check(f, random_tensor({2, 1, 4, 4}, rng)) < 1e-5);
}

TEST_CASE("grad_check reference cases") {
  std::mt19937_64 rng(11);
  // Integer point and a power-of-two step keep every perturbation exact.
  Tensor xi({6}, {-3, 0, 1, 4, 7, -2});
  CHECK(grad_check([](const Tensor& x) { return sum(x); }, xi, std::ldexp(1.0, -20)) == 0.0);
  CHECK(grad_check([](const Tensor& x) { return sum(sigmoid(x)); }, random_tensor({10}, rng)) < 1e-7);
  Tensor w = random_tensor({2, 1, 2, 2}, rng);
  Tensor r = random_tensor({1, 2, 3, 3}, rng);
  auto f = [&](const Tensor& x) {
    return sum(mul(softmax_rows(reshape(conv2d(x, w, 1, 0), {2, 9})), reshape(r, {2, 9})));
  };
  CHECK(grad_check(f, random_tensor({1, 1, 4, 4}, rng)) < 1e-5);
  CHECK_THROWS_AS(grad_check(f, random_tensor({1, 1, 4, 4}, rng), 0.0), ParameterError);
}
