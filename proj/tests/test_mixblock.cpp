#include <doctest.h>

#include <cmath>

#include "automix/errors.hpp"
#include "automix/mix_policies.hpp"
#include "automix/mixblock.hpp"
#include "automix/ops.hpp"
#include "test_util.hpp"

using namespace automix;
using automix::testing::max_abs_diff;
using automix::testing::random_tensor;

namespace {

MixBlockParams random_params(std::size_t c, std::mt19937_64& rng) {
  MixBlockParams p = init_mixblock(c, rng());
  p.w_z = random_tensor(p.w_z.shape(), rng);
  return p;
}

// Direct loop evaluation of the row-softmax scaled dot-product attention.
std::vector<double> attention_oracle(const Tensor& a, const Tensor& b, const Tensor& w_p) {
  const std::size_t N = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3), d = w_p.dim(0);
  std::vector<double> out(N * hw * hw);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < hw; ++r) {
      std::vector<double> score(hw);
      double mx = -INFINITY;
      for (std::size_t q = 0; q < hw; ++q) {
        double dot = 0.0;
        for (std::size_t e = 0; e < d; ++e) {
          double pa = 0.0, pb = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            pa += w_p[e * C + c] * a[(n * C + c) * hw + r];
            pb += w_p[e * C + c] * b[(n * C + c) * hw + q];
          }
          dot += pa * pb;
        }
        score[q] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, score[q]);
      }
      double z = 0.0;
      for (double& s : score) z += (s = std::exp(s - mx));
      for (std::size_t q = 0; q < hw; ++q) out[(n * hw + r) * hw + q] = score[q] / z;
    }
  return out;
}

}  // namespace

TEST_CASE("embed_lambda") {
  std::mt19937_64 rng(1);
  Tensor z = random_tensor({2, 3, 2, 2}, rng);
  Tensor e0 = embed_lambda(z, 0.0);
  CHECK(e0.shape() == Shape{2, 4, 2, 2});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(e0[(n * 4 + 3) * 4 + k] == 0.0);
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(e0[(n * 4 + c) * 4 + k] == z[(n * 3 + c) * 4 + k]);
    }
  Tensor e = embed_lambda(z, 0.3);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 4; ++k) CHECK(e[(n * 4 + 3) * 4 + k] == 0.3);
  CHECK_THROWS_AS(embed_lambda(z, 1.5), ParameterError);
  CHECK_THROWS_AS(embed_lambda(z, -0.1), ParameterError);
}

TEST_CASE("mix block parameter init") {
  CHECK(mixblock_embed_dim(64) == 32);
  CHECK(mixblock_embed_dim(6) == 4);
  MixBlockParams p = init_mixblock(16, 3);
  CHECK(p.w_p.shape() == Shape{8, 17, 1, 1});
  CHECK(p.w_z.shape() == Shape{1, 17, 1, 1});
  for (double v : p.w_z.data()) CHECK(v == 0.0);
  ParamSet ps = p.as_param_set();
  ps.at("w_z").mutable_data()[0] = 1.0;
  CHECK(p.w_z[0] == 1.0);
}

TEST_CASE("cross_attention against a loop oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    MixBlockParams p = random_params(3, rng);
    Tensor a = embed_lambda(random_tensor({2, 3, 2, 2}, rng), 0.3);
    Tensor b = embed_lambda(random_tensor({2, 3, 2, 2}, rng), 0.7);
    Tensor P = cross_attention(a, b, p);
    CHECK(P.shape() == Shape{2, 4, 4});
    CHECK(max_abs_diff(P.data(), attention_oracle(a, b, p.w_p)) < 1e-12);
  }
}

TEST_CASE("cross_attention degenerate cases") {
  std::mt19937_64 rng(3);
  MixBlockParams p = random_params(5, rng);
  Tensor s = cross_attention(embed_lambda(random_tensor({3, 5, 1, 1}, rng), 0.2),
                             embed_lambda(random_tensor({3, 5, 1, 1}, rng), 0.8), p);
  for (double v : s.data()) CHECK(v == 1.0);

  p.w_p = Tensor::zeros(p.w_p.shape());
  Tensor u = cross_attention(embed_lambda(random_tensor({1, 5, 3, 3}, rng), 0.2),
                             embed_lambda(random_tensor({1, 5, 3, 3}, rng), 0.8), p);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-15));

  CHECK_THROWS_AS(cross_attention(embed_lambda(random_tensor({1, 5, 3, 3}, rng), 0.2),
                                  embed_lambda(random_tensor({1, 5, 2, 3}, rng), 0.8), p),
                  DimensionError);
}

TEST_CASE("compute_mask") {
  std::mt19937_64 rng(4);
  MixBlockParams zero = init_mixblock(4, 1);
  Tensor a = embed_lambda(random_tensor({2, 4, 2, 2}, rng), 0.4);
  Tensor b = embed_lambda(random_tensor({2, 4, 2, 2}, rng), 0.6);
  MaskPair half = compute_mask(a, b, zero, 4);
  CHECK(half.s_i.shape() == Shape{2, 1, 8, 8});
  for (std::size_t k = 0; k < half.s_i.numel(); ++k) {
    CHECK(half.s_i[k] == 0.5);
    CHECK(half.s_j[k] == 0.5);
  }

  MixBlockParams p = random_params(4, rng);
  MaskPair m = compute_mask(a, b, p, 4);
  for (std::size_t k = 0; k < m.s_i.numel(); ++k) {
    CHECK(m.s_i[k] >= 0.0);
    CHECK(m.s_i[k] <= 1.0);
    CHECK(m.s_i[k] + m.s_j[k] == doctest::Approx(1.0).epsilon(1e-15));
  }

  // Single position: the value path is w_z . z, here ln 3 on the lambda channel.
  MixBlockParams q = init_mixblock(1, 2);
  q.w_z = Tensor({1, 2, 1, 1}, {0.0, std::log(3.0) / 0.5});
  Tensor z1 = embed_lambda(Tensor({1, 1, 1, 1}, {0.7}), 0.5);
  Tensor z2 = embed_lambda(Tensor({1, 1, 1, 1}, {-0.2}), 0.5);
  MaskPair one = compute_mask(z1, z2, q, 2);
  CHECK(one.s_i.shape() == Shape{1, 1, 2, 2});
  for (double v : one.s_i.data()) CHECK(std::abs(v - 0.75) < 1e-15);
}

TEST_CASE("compute_mask_transposed equals the swapped run") {
  std::mt19937_64 rng(5);
  MixBlockParams p = random_params(3, rng);
  Tensor zi = random_tensor({2, 3, 3, 3}, rng), zj = random_tensor({2, 3, 3, 3}, rng);
  const double lam = 0.35;
  Tensor t = compute_mask_transposed(embed_lambda(zi, lam), embed_lambda(zj, 1.0 - lam), p, 2);
  MaskPair swapped = compute_mask(embed_lambda(zj, 1.0 - lam), embed_lambda(zi, lam), p, 2);
  CHECK(max_abs_diff(t, swapped.s_i) < 1e-12);
}

TEST_CASE("mix_images") {
  std::mt19937_64 rng(6);
  Tensor xi = random_tensor({2, 3, 4, 4}, rng), xj = random_tensor({2, 3, 4, 4}, rng);
  Tensor ones = Tensor::full({2, 1, 4, 4}, 1.0);
  CHECK(bitwise_equal(mix_images(xi, xj, {ones, Tensor::zeros({2, 1, 4, 4})}), xi));
  Tensor half = Tensor::full({2, 1, 4, 4}, 0.5);
  CHECK(max_abs_diff(mix_images(xi, xj, {half, half}), mixup_linear(xi, xj, 0.5)) < 1e-12);

  Tensor m = random_tensor({2, 1, 4, 4}, rng, 0.0, 1.0);
  Tensor out = mix_images(xi, xj, {m, one_minus(m)});
  double err = 0.0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < 16; ++k) {
        const std::size_t i = (n * 3 + c) * 16 + k;
        const double w = m[n * 16 + k];
        err = std::max(err, std::abs(out[i] - (w * xi[i] + (1.0 - w) * xj[i])));
      }
  CHECK(err < 1e-12);
  CHECK_THROWS_AS(mix_images(xi, xj, {Tensor::full({2, 1, 2, 2}, 0.5), Tensor::full({2, 1, 2, 2}, 0.5)}),
                  DimensionError);
}

TEST_CASE("generate") {
  std::mt19937_64 rng(7);
  Tensor xi = random_tensor({2, 1, 8, 8}, rng), xj = random_tensor({2, 1, 8, 8}, rng);
  Tensor zi = random_tensor({2, 4, 2, 2}, rng), zj = random_tensor({2, 4, 2, 2}, rng);

  GeneratedMix zero = generate(xi, xj, zi, zj, 0.3, init_mixblock(4, 1));
  CHECK(max_abs_diff(zero.x_mix, mixup_linear(xi, xj, 0.5)) < 1e-12);
  CHECK(zero.lambda == 0.3);

  MixBlockParams p = random_params(4, rng);
  GeneratedMix same = generate(xi, xi, zi, zi, 0.6, p);
  CHECK(max_abs_diff(same.x_mix, xi) < 1e-12);

  // Swapping the pair and lambda reproduces the transposed-attention mask.
  GeneratedMix fwd = generate(xi, xj, zi, zj, 0.3, p);
  GeneratedMix rev = generate(xj, xi, zj, zi, 0.7, p);
  Tensor t = compute_mask_transposed(embed_lambda(zi, 0.3), embed_lambda(zj, 0.7), p, 4);
  CHECK(max_abs_diff(rev.mask.s_i, t) < 1e-12);
  CHECK(max_abs_diff(fwd.mask.s_j, one_minus(fwd.mask.s_i)) == 0.0);

  CHECK_THROWS_AS(generate(xi, xj, random_tensor({2, 4, 3, 3}, rng), random_tensor({2, 4, 3, 3}, rng), 0.5, p),
                  DimensionError);
}

TEST_CASE("generate gradients with respect to the mix block") {
  std::mt19937_64 rng(8);
  Tensor xi = random_tensor({2, 1, 4, 4}, rng), xj = random_tensor({2, 1, 4, 4}, rng);
  Tensor zi = random_tensor({2, 3, 2, 2}, rng), zj = random_tensor({2, 3, 2, 2}, rng);
  Tensor r = random_tensor({2, 1, 4, 4}, rng);
  MixBlockParams p = random_params(3, rng);
  auto via_wp = [&](const Tensor& w) {
    MixBlockParams q{w, p.w_z};
    return sum(mul(generate(xi, xj, zi, zj, 0.4, q).x_mix, r));
  };
  auto via_wz = [&](const Tensor& w) {
    MixBlockParams q{p.w_p, w};
    return sum(mul(generate(xi, xj, zi, zj, 0.4, q).x_mix, r));
  };
  CHECK(grad_check(via_wp, p.w_p.clone()) < 1e-5);
  CHECK(grad_check(via_wz, p.w_z.clone()) < 1e-5);
}
