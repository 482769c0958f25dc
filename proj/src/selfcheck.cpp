#include "automix/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "automix/losses.hpp"
#include "automix/mix_policies.hpp"
#include "automix/mixblock.hpp"
#include "automix/models.hpp"
#include "automix/ops.hpp"

namespace automix {

namespace {

using Fn = std::function<Tensor(const Tensor&)>;

Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Entries bounded away from zero, for ops with a kink there.
Tensor away_from_zero(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Random linear functional over every output coordinate.
Fn probe(std::function<Tensor(const Tensor&)> op, const Shape& out_shape, Rng& rng) {
  Tensor r = uniform(out_shape, rng);
  return [op = std::move(op), r](const Tensor& x) { return sum(mul(op(x), r)); };
}

struct GradCase {
  std::string name;
  // Returns (function, point) for one seed.
  std::function<std::pair<Fn, Tensor>(Rng&)> build;
};

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.input_channels = 2;
  c.stage_channels = {3, 4};
  c.stage_strides = {2, 2};
  c.num_classes = 3;
  return c;
}

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::function<std::pair<Fn, Tensor>(Rng&)> b) {
    cases.push_back({std::move(name), std::move(b)});
  };
  const Shape s34{3, 4};

  add_case("add", [=](Rng& rng) {
    Tensor b = uniform(s34, rng);
    return std::pair{probe([b](const Tensor& x) { return add(x, b); }, s34, rng), uniform(s34, rng)};
  });
  add_case("sub", [=](Rng& rng) {
    Tensor a = uniform(s34, rng);
    return std::pair{probe([a](const Tensor& x) { return add(sub(a, x), sub(x, scale(x, 3.0))); }, s34, rng),
                     uniform(s34, rng)};
  });
  add_case("mul", [=](Rng& rng) {
    Tensor b = uniform(s34, rng);
    return std::pair{probe([b](const Tensor& x) { return add(mul(x, b), mul(x, x)); }, s34, rng),
                     uniform(s34, rng)};
  });
  add_case("scale", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return scale(x, -2.5); }, s34, rng), uniform(s34, rng)};
  });
  add_case("one_minus", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return one_minus(x); }, s34, rng), uniform(s34, rng)};
  });
  add_case("sum", [=](Rng& rng) {
    return std::pair{Fn([](const Tensor& x) { return sum(mul(x, x)); }), uniform(s34, rng)};
  });
  add_case("mean", [=](Rng& rng) {
    return std::pair{Fn([](const Tensor& x) { return mean(mul(x, x)); }), uniform(s34, rng)};
  });
  add_case("relu", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return relu(x); }, s34, rng), away_from_zero(s34, rng)};
  });
  add_case("sigmoid", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return sigmoid(scale(x, 3.0)); }, s34, rng),
                     uniform(s34, rng)};
  });
  add_case("reshape", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return reshape(x, {2, 6}); }, {2, 6}, rng),
                     uniform(s34, rng)};
  });
  add_case("matmul.a", [=](Rng& rng) {
    Tensor b = uniform({4, 2}, rng);
    return std::pair{probe([b](const Tensor& x) { return matmul(x, b); }, {3, 2}, rng), uniform(s34, rng)};
  });
  add_case("matmul.b", [=](Rng& rng) {
    Tensor a = uniform({3, 4}, rng);
    return std::pair{probe([a](const Tensor& x) { return matmul(a, x); }, {3, 2}, rng),
                     uniform({4, 2}, rng)};
  });
  add_case("bmm.a", [=](Rng& rng) {
    Tensor b = uniform({2, 4, 3}, rng);
    return std::pair{probe([b](const Tensor& x) { return bmm(x, b); }, {2, 3, 3}, rng),
                     uniform({2, 3, 4}, rng)};
  });
  add_case("bmm.b", [=](Rng& rng) {
    Tensor a = uniform({2, 3, 4}, rng);
    return std::pair{probe([a](const Tensor& x) { return bmm(a, x); }, {2, 3, 3}, rng),
                     uniform({2, 4, 3}, rng)};
  });
  add_case("transpose_last2", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return transpose_last2(x); }, {2, 4, 3}, rng),
                     uniform({2, 3, 4}, rng)};
  });
  add_case("softmax_rows", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return softmax_rows(scale(x, 2.0)); }, {2, 3, 4}, rng),
                     uniform({2, 3, 4}, rng)};
  });
  add_case("conv2d.input", [=](Rng& rng) {
    Tensor w = uniform({3, 2, 3, 3}, rng);
    return std::pair{probe([w](const Tensor& x) { return conv2d(x, w, 2, 1); }, {1, 3, 3, 3}, rng),
                     uniform({1, 2, 5, 5}, rng)};
  });
  add_case("conv2d.weight", [=](Rng& rng) {
    Tensor x = uniform({2, 2, 5, 5}, rng);
    return std::pair{probe([x](const Tensor& w) { return conv2d(x, w, 1, 1); }, {2, 3, 5, 5}, rng),
                     uniform({3, 2, 3, 3}, rng)};
  });
  add_case("channel_affine.input", [=](Rng& rng) {
    Tensor g = uniform({3}, rng), b = uniform({3}, rng);
    return std::pair{probe([g, b](const Tensor& x) { return channel_affine(x, g, b); }, {2, 3, 2, 2}, rng),
                     uniform({2, 3, 2, 2}, rng)};
  });
  add_case("channel_affine.gain", [=](Rng& rng) {
    Tensor x = uniform({2, 3, 2, 2}, rng), b = uniform({3}, rng);
    return std::pair{probe([x, b](const Tensor& g) { return channel_affine(x, g, b); }, {2, 3, 2, 2}, rng),
                     uniform({3}, rng)};
  });
  add_case("channel_affine.bias", [=](Rng& rng) {
    Tensor x = uniform({2, 3, 2, 2}, rng), g = uniform({3}, rng);
    return std::pair{probe([x, g](const Tensor& b) { return channel_affine(x, g, b); }, {2, 3, 2, 2}, rng),
                     uniform({3}, rng)};
  });
  add_case("concat_channels.a", [=](Rng& rng) {
    Tensor b = uniform({2, 1, 2, 3}, rng);
    return std::pair{probe([b](const Tensor& a) { return concat_channels(a, b); }, {2, 3, 2, 3}, rng),
                     uniform({2, 2, 2, 3}, rng)};
  });
  add_case("concat_channels.b", [=](Rng& rng) {
    Tensor a = uniform({2, 2, 2, 3}, rng);
    return std::pair{probe([a](const Tensor& b) { return concat_channels(a, b); }, {2, 3, 2, 3}, rng),
                     uniform({2, 1, 2, 3}, rng)};
  });
  add_case("upsample_bilinear", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return upsample_bilinear(x, 3); }, {1, 2, 6, 9}, rng),
                     uniform({1, 2, 2, 3}, rng)};
  });
  add_case("global_avg_pool", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& x) { return global_avg_pool(x); }, {2, 3}, rng),
                     uniform({2, 3, 2, 2}, rng)};
  });
  add_case("add_row_bias", [=](Rng& rng) {
    Tensor x = uniform({3, 4}, rng);
    return std::pair{probe([x](const Tensor& b) { return add_row_bias(add_row_bias(x, b), b); }, {3, 4}, rng),
                     uniform({4}, rng)};
  });
  add_case("gather_batch", [=](Rng& rng) {
    return std::pair{
        probe([](const Tensor& x) { return gather_batch(x, {2, 0, 2, 1}); }, {4, 2, 1, 2}, rng),
        uniform({3, 2, 1, 2}, rng)};
  });
  add_case("blend.a", [=](Rng& rng) {
    Tensor b = uniform({2, 2, 3, 3}, rng), m = uniform({2, 1, 3, 3}, rng, 0.0, 1.0);
    return std::pair{probe([b, m](const Tensor& a) { return blend(a, b, m); }, {2, 2, 3, 3}, rng),
                     uniform({2, 2, 3, 3}, rng)};
  });
  add_case("blend.b", [=](Rng& rng) {
    Tensor a = uniform({2, 2, 3, 3}, rng), m = uniform({2, 1, 3, 3}, rng, 0.0, 1.0);
    return std::pair{probe([a, m](const Tensor& b) { return blend(a, b, m); }, {2, 2, 3, 3}, rng),
                     uniform({2, 2, 3, 3}, rng)};
  });
  add_case("blend.mask", [=](Rng& rng) {
    Tensor a = uniform({2, 2, 3, 3}, rng), b = uniform({2, 2, 3, 3}, rng);
    return std::pair{probe([a, b](const Tensor& m) { return blend(a, b, m); }, {2, 2, 3, 3}, rng),
                     uniform({2, 1, 3, 3}, rng, 0.0, 1.0)};
  });
  add_case("soft_cross_entropy", [=](Rng& rng) {
    Tensor t = softmax_rows(uniform({4, 3}, rng, -2.0, 2.0));
    return std::pair{Fn([t](const Tensor& x) { return soft_cross_entropy(x, t); }),
                     uniform({4, 3}, rng, -3.0, 3.0)};
  });
  add_case("mixup_ce", [=](Rng& rng) {
    std::vector<int> yi{0, 2, 1, 1}, yj{1, 2, 0, 2};
    Tensor a = one_hot(yi, 3), b = one_hot(yj, 3);
    return std::pair{Fn([a, b](const Tensor& x) { return mixup_ce(x, a, b, 0.4); }),
                     uniform({4, 3}, rng, -3.0, 3.0)};
  });
  add_case("lambda_loss", [=](Rng& rng) {
    // Residuals |lambda - mean| sit well outside the hinge margin.
    std::uniform_real_distribution<double> lo(0.0, 0.4), hi(0.6, 1.0);
    std::vector<double> m(2 * 9);
    for (std::size_t i = 0; i < 9; ++i) m[i] = lo(rng);
    for (std::size_t i = 9; i < 18; ++i) m[i] = hi(rng);
    return std::pair{Fn([](const Tensor& s) { return lambda_loss(s, 0.55, 0.1); }),
                     Tensor({2, 1, 3, 3}, std::move(m))};
  });
  add_case("embed_lambda", [=](Rng& rng) {
    return std::pair{probe([](const Tensor& z) { return embed_lambda(z, 0.3); }, {2, 3, 2, 2}, rng),
                     uniform({2, 2, 2, 2}, rng)};
  });
  add_case("cross_attention.w_p", [=](Rng& rng) {
    Tensor zi = uniform({2, 4, 2, 3}, rng), zj = uniform({2, 4, 2, 3}, rng);
    Tensor wz = uniform({1, 4, 1, 1}, rng);
    return std::pair{probe([=](const Tensor& wp) { return cross_attention(zi, zj, {wp, wz}); },
                           {2, 6, 6}, rng),
                     uniform({4, 4, 1, 1}, rng)};
  });
  add_case("compute_mask.w_z", [=](Rng& rng) {
    Tensor zi = uniform({2, 4, 2, 2}, rng), zj = uniform({2, 4, 2, 2}, rng);
    Tensor wp = uniform({4, 4, 1, 1}, rng);
    return std::pair{probe([=](const Tensor& wz) { return compute_mask(zi, zj, {wp, wz}, 2).s_i; },
                           {2, 1, 4, 4}, rng),
                     uniform({1, 4, 1, 1}, rng)};
  });
  add_case("compute_mask.features", [=](Rng& rng) {
    Tensor zj = uniform({1, 4, 2, 2}, rng);
    Tensor wp = uniform({4, 4, 1, 1}, rng), wz = uniform({1, 4, 1, 1}, rng);
    return std::pair{probe([=](const Tensor& zi) { return compute_mask(zi, zj, {wp, wz}, 2).s_j; },
                           {1, 1, 4, 4}, rng),
                     uniform({1, 4, 2, 2}, rng)};
  });
  add_case("encoder.logits.input", [=](Rng& rng) {
    const EncoderConfig c = tiny_encoder();
    ParamSet p = clone_params(init_params(c, rng()));
    return std::pair{probe([p, c](const Tensor& x) { return Encoder(c).forward_logits(p, x); }, {2, 3}, rng),
                     uniform({2, 2, 8, 8}, rng)};
  });
  add_case("encoder.features.weight", [=](Rng& rng) {
    const EncoderConfig c = tiny_encoder();
    ParamSet p = clone_params(init_params(c, rng()));
    Tensor x = uniform({2, 2, 8, 8}, rng);
    const Tensor w0 = p.at("stage1.conv.weight");
    return std::pair{probe(
                         [p, c, x](const Tensor& w) {
                           ParamSet q = p;
                           q.set("stage1.conv.weight", w);
                           return Encoder(c).forward_features(q, x, 2);
                         },
                         {2, 4, 2, 2}, rng),
                     w0};
  });
  // Mix Block end to end: generate, frozen teacher, mixed cross-entropy.
  auto mixblock_case = [](bool wrt_wp) {
    return [wrt_wp](Rng& rng) {
      const EncoderConfig c = tiny_encoder();
      ParamSet teacher = clone_params(init_params(c, rng()));
      Tensor x = uniform({3, 2, 8, 8}, rng);
      const std::vector<std::size_t> idx{2, 0, 1};
      Tensor x_j = gather_batch(x, idx);
      Encoder enc(c);
      Tensor z = enc.forward_features(teacher, x, 1);
      Tensor z_j = gather_batch(z, idx);
      std::vector<int> y{0, 1, 2}, y_j{2, 0, 1};
      Tensor yi = one_hot(y, 3), yj = one_hot(y_j, 3);
      Tensor wp = uniform({4, 4, 1, 1}, rng), wz = uniform({1, 4, 1, 1}, rng);
      Fn f = [=](const Tensor& w) {
        MixBlockParams mb = wrt_wp ? MixBlockParams{w, wz} : MixBlockParams{wp, w};
        GeneratedMix g = generate(x, x_j, z, z_j, 0.35, mb);
        return mixup_ce(enc.forward_logits(teacher, g.x_mix), yi, yj, 0.35);
      };
      return std::pair{f, wrt_wp ? wp : wz};
    };
  };
  add_case("mixblock.end_to_end.w_p", mixblock_case(true));
  add_case("mixblock.end_to_end.w_z", mixblock_case(false));
  add_case("composite", [=](Rng& rng) {
    Tensor w = uniform({2, 1, 3, 3}, rng), w3 = uniform({2, 3, 3, 3}, rng);
    Tensor g = uniform({2}, rng), b = uniform({2}, rng);
    Tensor x2 = uniform({2, 1, 4, 4}, rng);
    Tensor hw = uniform({2, 3}, rng), hb = uniform({3}, rng);
    Tensor y = one_hot(std::vector<int>{1, 2}, 3);
    Fn f = [=](const Tensor& x) {
      Tensor h = relu(channel_affine(conv2d(x, w, 1, 1), g, b));
      Tensor cat = concat_channels(h, one_minus(x2));
      Tensor up = upsample_bilinear(reshape(mean(cat), {1, 1, 1, 1}), 2);
      Tensor att = softmax_rows(bmm(transpose_last2(reshape(cat, {2, 3, 16})),
                                    reshape(sigmoid(cat), {2, 3, 16})));
      Tensor mixed = blend(cat, gather_batch(cat, {1, 0}), sigmoid(sub(x, x2)));
      Tensor logits =
          add_row_bias(matmul(global_avg_pool(conv2d(mixed, w3, 2, 1)), hw), hb);
      return add(add(cross_entropy(logits, y), scale(sum(up), 0.1)),
                 scale(mean(mul(att, att)), 2.0));
    };
    return std::pair{f, uniform({2, 1, 4, 4}, rng)};
  });
  return cases;
}

// Analytic gradient of sum(stop_gradient(x) * x) against finite differences
// of sum(x0 * x) with x0 frozen at the evaluation point.
double stop_gradient_error(Rng& rng, double h) {
  Tensor x = uniform({3, 4}, rng);
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor p = Tensor::parameter(x.shape(), {x.data().begin(), x.data().end()});
    Tensor loss = sum(mul(stop_gradient(p), p));
    backward(loss);
    analytic = p.grad();
  }
  const Tensor x0 = x.clone();
  std::vector<double> values(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto plus = values, minus = values;
    plus[i] += h;
    minus[i] -= h;
    const double numeric = (sum(mul(x0, Tensor(x.shape(), plus))).item() -
                            sum(mul(x0, Tensor(x.shape(), minus))).item()) /
                           (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

}  // namespace

std::vector<CheckResult> run_gradient_suite(const SelfcheckOptions& options) {
  std::vector<CheckResult> out;
  for (const auto& c : gradient_cases()) {
    for (auto seed : options.seeds) {
      CheckResult r;
      r.name = "grad." + c.name + ".seed" + std::to_string(seed);
      try {
        Rng rng(seed * 7919 + 17);
        auto [f, x] = c.build(rng);
        const double err = grad_check(f, x, options.step);
        r.passed = err < options.tolerance;
        r.detail = "max rel err " + fmt(err);
      } catch (const std::exception& e) {
        r.detail = std::string("exception: ") + e.what();
      }
      out.push_back(std::move(r));
    }
  }
  for (auto seed : options.seeds) {
    CheckResult r;
    r.name = "grad.stop_gradient.seed" + std::to_string(seed);
    Rng rng(seed * 7919 + 17);
    const double err = stop_gradient_error(rng, options.step);
    r.passed = err < options.tolerance;
    r.detail = "max rel err " + fmt(err);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<CheckResult> run_invariant_suite(const SelfcheckOptions& options) {
  double worst_row = 0.0, worst_complement = 0.0, worst_swap = 0.0;
  double min_mask = 1.0, max_mask = 0.0;
  bool singleton_ok = true;
  Rng rng(2024);
  std::uniform_int_distribution<std::size_t> small(1, 4), batch(1, 3);
  std::uniform_int_distribution<int> pick_factor(0, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Shape s, double sd) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = sd * normal(rng);
    return Tensor(std::move(s), std::move(v));
  };
  for (std::size_t i = 0; i < options.invariant_instances; ++i) {
    const std::size_t n = batch(rng), c = small(rng);
    const bool singleton = i % 10 == 0;
    const std::size_t h = singleton ? 1 : small(rng), w = singleton ? 1 : small(rng);
    const std::size_t factor = std::size_t{1} << pick_factor(rng);
    const double sd = 0.5 + 3.0 * unit(rng);
    const double lambda = unit(rng);
    MixBlockParams mb{randn({mixblock_embed_dim(c), c + 1, 1, 1}, sd), randn({1, c + 1, 1, 1}, sd)};
    Tensor z_i = randn({n, c, h, w}, sd), z_j = randn({n, c, h, w}, sd);
    Tensor zl_i = embed_lambda(z_i, lambda), zl_j = embed_lambda(z_j, 1.0 - lambda);

    Tensor p = cross_attention(zl_i, zl_j, mb);
    const std::size_t hw = h * w;
    auto pd = p.data();
    for (std::size_t r = 0; r < n * hw; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += pd[r * hw + k];
      worst_row = std::max(worst_row, std::abs(s - 1.0));
    }
    if (singleton) {
      for (double v : pd) singleton_ok = singleton_ok && v == 1.0;
    }

    MaskPair m = compute_mask(zl_i, zl_j, mb, factor);
    auto si = m.s_i.data(), sj = m.s_j.data();
    for (std::size_t k = 0; k < si.size(); ++k) {
      min_mask = std::min({min_mask, si[k], sj[k]});
      max_mask = std::max({max_mask, si[k], sj[k]});
      worst_complement = std::max(worst_complement, std::abs(si[k] + sj[k] - 1.0));
    }

    // Swapped run: its s_i equals the transposed-attention mask of this run.
    Tensor swapped = compute_mask(zl_j, zl_i, mb, factor).s_i;
    Tensor transposed = compute_mask_transposed(zl_i, zl_j, mb, factor);
    auto a = swapped.data(), b = transposed.data();
    for (std::size_t k = 0; k < a.size(); ++k)
      worst_swap = std::max(worst_swap, std::abs(a[k] - b[k]));
  }

  // Constant-mask degeneracy: W_Z = 0 reduces the Mix Block to MixUp at 0.5.
  double worst_degenerate = 0.0;
  for (std::size_t t = 0; t < 50; ++t) {
    const std::size_t n = batch(rng) + 1, c = small(rng), h = small(rng);
    const std::size_t factor = std::size_t{1} << pick_factor(rng);
    const std::size_t img_c = small(rng);
    MixBlockParams mb = init_mixblock(c, rng());
    Tensor x_i = randn({n, img_c, h * factor, h * factor}, 1.0);
    Tensor x_j = randn({n, img_c, h * factor, h * factor}, 1.0);
    Tensor z_i = randn({n, c, h, h}, 1.0), z_j = randn({n, c, h, h}, 1.0);
    GeneratedMix g = generate(x_i, x_j, z_i, z_j, unit(rng), mb);
    Tensor ref = mixup_linear(x_i, x_j, 0.5);
    auto a = g.x_mix.data(), b = ref.data();
    for (std::size_t k = 0; k < a.size(); ++k)
      worst_degenerate = std::max(worst_degenerate, std::abs(a[k] - b[k]));
  }

  const std::string count = std::to_string(options.invariant_instances) + " instances";
  return {
      {"invariant.attention_rows_sum_to_one", worst_row <= 1e-9,
       count + ", max |row sum - 1| " + fmt(worst_row)},
      {"invariant.mask_in_unit_interval", min_mask >= 0.0 && max_mask <= 1.0,
       "range [" + fmt(min_mask) + ", " + fmt(max_mask) + "]"},
      {"invariant.mask_complement", worst_complement <= 1e-12,
       "max |s_i + s_j - 1| " + fmt(worst_complement)},
      {"invariant.singleton_attention", singleton_ok, "h = w = 1 gives P = [[1]]"},
      {"invariant.swapped_pair_symmetry", worst_swap <= 1e-12,
       "max |s_i(j,i) - s_transposed(i,j)| " + fmt(worst_swap)},
      {"invariant.constant_mask_is_mixup", worst_degenerate <= 1e-12,
       "max |generate - mixup_linear(0.5)| " + fmt(worst_degenerate)},
  };
}

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options) {
  auto out = run_gradient_suite(options);
  auto inv = run_invariant_suite(options);
  out.insert(out.end(), inv.begin(), inv.end());
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.passed; });
}

}  // namespace automix
