#include "kriformer/attention.hpp"

#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "kriformer/errors.hpp"
#include "kriformer/rng.hpp"

using namespace kriformer;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi,
                     bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = uniform_range(rng, lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

AttentionBlockParams random_block(Rng& rng, std::size_t d, std::size_t heads,
                                  bool requires_grad = false, double span = 0.5) {
  AttentionBlockParams p;
  const std::size_t hd = d / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    p.wq.push_back(random_tensor(rng, {d, hd}, -span, span, requires_grad));
    p.wk.push_back(random_tensor(rng, {d, hd}, -span, span, requires_grad));
    p.wv.push_back(random_tensor(rng, {d, hd}, -span, span, requires_grad));
  }
  p.wo = random_tensor(rng, {d, d}, -span, span, requires_grad);
  p.ln_gamma = Tensor::full({d}, 1.0, requires_grad);
  p.ln_beta = Tensor::zeros({d}, requires_grad);
  return p;
}

FfnParams random_ffn(Rng& rng, std::size_t d, bool requires_grad = false) {
  FfnParams p;
  p.w1 = random_tensor(rng, {d, d}, -0.5, 0.5, requires_grad);
  p.b1 = random_tensor(rng, {d}, -0.2, 0.2, requires_grad);
  p.w2 = random_tensor(rng, {d, d}, -0.5, 0.5, requires_grad);
  p.b2 = random_tensor(rng, {d}, -0.2, 0.2, requires_grad);
  p.ln_gamma = Tensor::full({d}, 1.0, requires_grad);
  p.ln_beta = Tensor::zeros({d}, requires_grad);
  return p;
}

std::vector<Tensor> block_params(AttentionBlockParams& p) {
  std::vector<Tensor> out;
  for (auto& t : p.wq) out.push_back(t);
  for (auto& t : p.wk) out.push_back(t);
  for (auto& t : p.wv) out.push_back(t);
  out.push_back(p.wo);
  out.push_back(p.ln_gamma);
  out.push_back(p.ln_beta);
  return out;
}

Tensor zero_mask(std::size_t n) { return Tensor::zeros({n, n}); }

Tensor diag_only_mask(std::size_t n) {
  std::vector<double> m(n * n, kMaskedScore);
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 0.0;
  return Tensor::from_data({n, n}, std::move(m));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::fabs(a.values()[i] - b.values()[i]));
  return worst;
}

}  // namespace

TEST_CASE("scaled dot attention degenerate forms") {
  // Single query and key: the softmax weight is 1, output == V.
  Tensor q = Tensor::from_data({1, 3}, {0.3, -0.7, 2.0});
  Tensor k = Tensor::from_data({1, 3}, {1.0, 1.0, 1.0});
  Tensor v = Tensor::from_data({1, 3}, {5.0, 6.0, 7.0});
  Tensor out = scaled_dot_attention(q, k, v);
  CHECK(out.values() == v.values());

  // Query orthogonal to every key: uniform weights, output = mean of V rows.
  Tensor q2 = Tensor::from_data({1, 2}, {1.0, 0.0});
  Tensor k2 = Tensor::from_data({3, 2}, {0, 1, 0, 2, 0, -5});
  Tensor v2 = Tensor::from_data({3, 2}, {3, 9, 6, 12, 9, 15});
  Tensor out2 = scaled_dot_attention(q2, k2, v2);
  CHECK(out2.at({0, 0}) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(out2.at({0, 1}) == doctest::Approx(12.0).epsilon(1e-12));

  // Mask everything except key j: output is exactly V row j.
  std::vector<double> maskv(3, kMaskedScore);
  maskv[2] = 0.0;
  Tensor out3 = scaled_dot_attention(q2, k2, v2, Tensor::from_data({3}, maskv));
  CHECK(out3.at({0, 0}) == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(out3.at({0, 1}) == doctest::Approx(15.0).epsilon(1e-12));

  CHECK_THROWS_AS(scaled_dot_attention(q, k2, v2), ShapeError);
}

TEST_CASE("attention weights: rows sum to one under partial masks") {
  Rng rng(43);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + uniform_below(rng, 5);
    Tensor scores = random_tensor(rng, {4, n, n}, -30, 30);
    std::vector<double> maskv(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && uniform_unit(rng) < 0.5) maskv[i * n + j] = kMaskedScore;
    Tensor w = softmax_lastdim(scores, Tensor::from_data({n, n}, maskv));
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          sum += w.at({b, i, j});
          if (maskv[i * n + j] != 0.0) CHECK(w.at({b, i, j}) <= 1e-12);
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
      }
  }
}

TEST_CASE("mta handles a single node and keeps shape") {
  Rng rng(47);
  AttentionBlockParams p = random_block(rng, 8, 2);
  Tensor h1 = random_tensor(rng, {5, 1, 8}, -1, 1);
  Tensor out1 = mta(h1, p);
  CHECK(out1.shape() == h1.shape());

  Tensor h = random_tensor(rng, {4, 3, 8}, -1, 1);
  CHECK(mta(h, p).shape() == h.shape());

  AttentionBlockParams bad = random_block(rng, 8, 2);
  bad.wq.pop_back();
  CHECK_THROWS_AS(mta(h, bad), ParamError);
}

TEST_CASE("mta is equivariant under time permutation") {
  Rng rng(53);
  const std::size_t t = 5, n = 3, d = 8;
  AttentionBlockParams p = random_block(rng, d, 2);
  Tensor h = random_tensor(rng, {t, n, d}, -1, 1);
  Tensor out = mta(h, p);

  std::vector<std::size_t> perm(t);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = t; i-- > 1;) std::swap(perm[i], perm[uniform_below(rng, i + 1)]);

  std::vector<double> hp(h.numel());
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t rest = 0; rest < n * d; ++rest)
      hp[perm[ti] * n * d + rest] = h.values()[ti * n * d + rest];
  Tensor out_p = mta(Tensor::from_data({t, n, d}, std::move(hp)), p);

  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t rest = 0; rest < n * d; ++rest)
      CHECK(std::fabs(out_p.values()[perm[ti] * n * d + rest] -
                      out.values()[ti * n * d + rest]) <= 1e-12);
}

TEST_CASE("msa with diagonal-only mask matches per-node oracle") {
  Rng rng(59);
  const std::size_t t = 3, n = 4, d = 8, heads = 2, hd = d / heads;
  AttentionBlockParams p = random_block(rng, d, heads);
  Tensor h = random_tensor(rng, {t, n, d}, -1, 1);
  Tensor out = msa(h, diag_only_mask(n), p);

  // With only self-attention allowed, each position's pre-residual update is
  // concat_h(x_i W^v_h) W_O; check LN(h + update) elementwise.
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t ni = 0; ni < n; ++ni) {
      std::vector<double> concat(d, 0.0);
      for (std::size_t hh = 0; hh < heads; ++hh)
        for (std::size_t j = 0; j < hd; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < d; ++c)
            acc += h.at({ti, ni, c}) * p.wv[hh].at({c, j});
          concat[hh * hd + j] = acc;
        }
      std::vector<double> pre(d, 0.0);
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t c = 0; c < d; ++c)
          pre[j] += concat[c] * p.wo.at({c, j});
      for (std::size_t j = 0; j < d; ++j) pre[j] += h.at({ti, ni, j});
      double mean = 0.0;
      for (double v : pre) mean += v;
      mean /= d;
      double var = 0.0;
      for (double v : pre) var += (v - mean) * (v - mean);
      var /= d;
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      for (std::size_t j = 0; j < d; ++j) {
        const double want = (pre[j] - mean) * inv * p.ln_gamma.at({j}) +
                            p.ln_beta.at({j});
        CHECK(out.at({ti, ni, j}) == doctest::Approx(want).epsilon(1e-10));
      }
    }
}

TEST_CASE("msa validates the mask shape and works with one time step") {
  Rng rng(61);
  AttentionBlockParams p = random_block(rng, 8, 2);
  Tensor h = random_tensor(rng, {1, 4, 8}, -1, 1);
  CHECK(msa(h, zero_mask(4), p).shape() == h.shape());
  CHECK_THROWS_AS(msa(h, zero_mask(3), p), ShapeError);
}

TEST_CASE("msia equals unmasked msa when encoder state equals decoder state") {
  Rng rng(67);
  const std::size_t t = 4, n = 5, d = 8;
  AttentionBlockParams p = random_block(rng, d, 2);
  Tensor h = random_tensor(rng, {t, n, d}, -1, 1);
  Tensor a = msia(h, h, p);
  Tensor b = msa(h, zero_mask(n), p);
  CHECK(max_abs_diff(a, b) <= 1e-12);
}

TEST_CASE("msia responds to encoder perturbations and respects shape") {
  Rng rng(71);
  const std::size_t t = 3, n = 4, d = 8;
  AttentionBlockParams p = random_block(rng, d, 2);
  Tensor h_dec = random_tensor(rng, {t, n, d}, -1, 1);
  Tensor h_enc = random_tensor(rng, {t, n, d}, -1, 1);
  Tensor base = msia(h_dec, h_enc, p);
  CHECK(base.shape() == h_dec.shape());

  // Identical encoder input leaves the output unchanged.
  Tensor again = msia(h_dec, Tensor::from_data({t, n, d}, h_enc.values()), p);
  CHECK(max_abs_diff(base, again) == 0.0);

  // Perturbing one encoder node moves some outputs.
  std::vector<double> bumped = h_enc.values();
  bumped[2 * d + 3] += 1.0;  // node 2 at t = 0
  Tensor moved = msia(h_dec, Tensor::from_data({t, n, d}, std::move(bumped)), p);
  CHECK(max_abs_diff(base, moved) > 1e-6);

  CHECK_THROWS_AS(msia(h_dec, random_tensor(rng, {t, n + 1, d}, -1, 1), p),
                  ShapeError);
}

TEST_CASE("joint node permutation equivariance of msa and msia") {
  Rng rng(73);
  const std::size_t t = 3, n = 5, d = 8;
  AttentionBlockParams p = random_block(rng, d, 2);
  Tensor h = random_tensor(rng, {t, n, d}, -1, 1);
  Tensor enc = random_tensor(rng, {t, n, d}, -1, 1);
  std::vector<double> maskv(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && uniform_unit(rng) < 0.4) maskv[i * n + j] = kMaskedScore;
  Tensor mask = Tensor::from_data({n, n}, maskv);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[uniform_below(rng, i + 1)]);

  auto permute_nodes = [&](const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t di = 0; di < d; ++di)
          out[(ti * n + perm[ni]) * d + di] = x.values()[(ti * n + ni) * d + di];
    return Tensor::from_data({t, n, d}, std::move(out));
  };
  std::vector<double> pmask(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      pmask[perm[i] * n + perm[j]] = maskv[i * n + j];

  Tensor base_msa = msa(h, mask, p);
  Tensor perm_msa = msa(permute_nodes(h), Tensor::from_data({n, n}, pmask), p);
  CHECK(max_abs_diff(permute_nodes(base_msa), perm_msa) <= 1e-12);

  Tensor base_msia = msia(h, enc, p);
  Tensor perm_msia = msia(permute_nodes(h), permute_nodes(enc), p);
  CHECK(max_abs_diff(permute_nodes(base_msia), perm_msia) <= 1e-12);
}

TEST_CASE("ffn zero weights reduce to layer norm and positions stay independent") {
  Rng rng(79);
  const std::size_t t = 3, n = 4, d = 8;
  FfnParams zero;
  zero.w1 = Tensor::zeros({d, d});
  zero.b1 = Tensor::zeros({d});
  zero.w2 = Tensor::zeros({d, d});
  zero.b2 = Tensor::zeros({d});
  zero.ln_gamma = Tensor::full({d}, 1.0);
  zero.ln_beta = Tensor::zeros({d});
  Tensor h = random_tensor(rng, {t, n, d}, -1, 1);
  Tensor out = ffn(h, zero);
  Tensor ln = layer_norm(h, zero.ln_gamma, zero.ln_beta);
  CHECK(max_abs_diff(out, ln) == 0.0);

  FfnParams p = random_ffn(rng, d);
  Tensor base = ffn(h, p);
  std::vector<double> bumped = h.values();
  bumped[(1 * n + 2) * d + 5] += 0.25;
  Tensor moved = ffn(Tensor::from_data({t, n, d}, std::move(bumped)), p);
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t ni = 0; ni < n; ++ni) {
      const bool touched = ti == 1 && ni == 2;
      for (std::size_t di = 0; di < d; ++di) {
        const double delta = std::fabs(moved.at({ti, ni, di}) - base.at({ti, ni, di}));
        if (!touched) CHECK(delta == 0.0);
      }
    }
}

TEST_CASE("attention blocks are deterministic with dropout off and seeded with it on") {
  Rng rng(83);
  AttentionBlockParams p = random_block(rng, 8, 2);
  Tensor h = random_tensor(rng, {4, 3, 8}, -1, 1);
  CHECK(max_abs_diff(mta(h, p), mta(h, p)) == 0.0);

  Rng d1(99), d2(99);
  DropoutCtx c1{0.2, &d1}, c2{0.2, &d2};
  CHECK(max_abs_diff(mta(h, p, c1), mta(h, p, c2)) == 0.0);

  Rng d3(99), d4(100);
  DropoutCtx c3{0.2, &d3}, c4{0.2, &d4};
  CHECK(max_abs_diff(mta(h, p, c3), mta(h, p, c4)) > 0.0);
}

TEST_CASE("attention ops pass gradient checks on tiny instances") {
  // The instance is sized so every parameter's gradient sits well above the
  // central-difference noise floor: values are amplified relative to
  // queries/keys and the loss probes a handful of output positions instead
  // of summing all of them.
  Rng rng(2);
  const std::size_t t = 3, n = 3, d = 8, hd = d / 2;
  Tensor h = random_tensor(rng, {t, n, d}, -0.8, 0.8, true);
  Tensor enc = random_tensor(rng, {t, n, d}, -0.8, 0.8);
  std::vector<double> probev(t * n * d, 0.0);
  for (int i = 0; i < 6; ++i)
    probev[uniform_below(rng, t * n * d)] = uniform_range(rng, 0.5, 1.5);
  Tensor probe = Tensor::from_data({t, n, d}, probev);

  AttentionBlockParams p;
  for (std::size_t hh = 0; hh < 2; ++hh) {
    p.wq.push_back(random_tensor(rng, {d, hd}, -0.5, 0.5, true));
    p.wk.push_back(random_tensor(rng, {d, hd}, -0.5, 0.5, true));
    p.wv.push_back(random_tensor(rng, {d, hd}, -2.5, 2.5, true));
  }
  p.wo = random_tensor(rng, {d, d}, -0.5, 0.5, true);
  p.ln_gamma = Tensor::full({d}, 1.0, true);
  p.ln_beta = Tensor::zeros({d}, true);
  FfnParams f = random_ffn(rng, d, true);

  // Partial mask keeps gradients flowing through the masked softmax.
  std::vector<double> maskv(n * n, 0.0);
  maskv[1] = kMaskedScore;
  maskv[5] = kMaskedScore;
  Tensor mask = Tensor::from_data({n, n}, maskv);

  auto wrap = [&](Tensor out) { return sum_all(mul(out, probe)); };

  std::vector<Tensor> wrt = block_params(p);
  wrt.push_back(h);
  CHECK(grad_check([&]() { return wrap(mta(h, p)); }, wrt) < 1e-6);
  CHECK(grad_check([&]() { return wrap(msa(h, mask, p)); }, wrt) < 1e-6);
  CHECK(grad_check([&]() { return wrap(msia(h, enc, p)); }, wrt) < 1e-6);

  std::vector<Tensor> fwrt{f.w1, f.b1, f.w2, f.b2, f.ln_gamma, f.ln_beta, h};
  CHECK(grad_check([&]() { return wrap(ffn(h, f)); }, fwrt) < 1e-6);

  Tensor head_probe = random_tensor(rng, {t, n, hd}, 0.5, 1.5);
  double err_sda = grad_check(
      [&]() {
        Tensor q = matmul(h, p.wq[0]);
        Tensor k = matmul(h, p.wk[0]);
        Tensor v = matmul(h, p.wv[0]);
        return sum_all(mul(scaled_dot_attention(q, k, v), head_probe));
      },
      {h});
  CHECK(err_sda < 1e-6);
}
