#include "kriformer/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "kriformer/errors.hpp"

using namespace kriformer;

namespace {

SensorGraph ring_graph(std::size_t n, Rng& rng) {
  std::vector<double> d(n * n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 0.0;
  auto link = [&](std::size_t i, std::size_t j) {
    const double dist = uniform_range(rng, 0.5, 2.0);
    d[i * n + j] = dist;
    d[j * n + i] = dist;
  };
  for (std::size_t i = 0; i < n; ++i) link(i, (i + 1) % n);
  for (std::size_t i = 0; i + 3 < n; i += 3) link(i, i + 3);
  SensorGraph g;
  for (std::size_t i = 0; i < n; ++i) g.node_ids.push_back("s" + std::to_string(i));
  g.distances = Tensor::from_data({n, n}, std::move(d));
  g.sigma = 1.0;
  g.epsilon = 0.01;
  return g;
}

ModelHyper tiny_hyper() {
  ModelHyper h;
  h.channels = 1;
  h.model_dim = 8;
  h.heads = 2;
  h.encoder_layers = 1;
  h.decoder_layers = 1;
  h.dropout = 0.0;
  return h;
}

Tensor random_window(Rng& rng, std::size_t t, std::size_t n, std::size_t c) {
  std::vector<double> v(t * n * c);
  for (double& x : v) x = uniform_range(rng, -1.5, 1.5);
  return Tensor::from_data({t, n, c}, std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

}  // namespace

TEST_CASE("init_model defaults and determinism") {
  Rng rng(1);
  SensorGraph g = ring_graph(8, rng);
  SpatialContext ctx = make_spatial_context(g);

  ModelHyper defaults;
  KriformerModel m = init_model(defaults, ctx, 42);
  CHECK(m.hyper.model_dim == 64);
  CHECK(m.hyper.heads == 4);
  CHECK(m.hyper.encoder_layers == 2);
  CHECK(m.hyper.decoder_layers == 2);
  CHECK(m.hyper.dropout == 0.2);
  CHECK(m.hyper.eigen_dim == 7);  // min(16, N-1) with N = 8
  CHECK(m.nodes() == 8);

  KriformerModel m2 = init_model(defaults, ctx, 42);
  auto p1 = m.named_parameters();
  auto p2 = m2.named_parameters();
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].first == p2[i].first);
    CHECK(p1[i].second.values() == p2[i].second.values());
  }

  KriformerModel m3 = init_model(defaults, ctx, 43);
  CHECK(m3.input_weight.values() != m.input_weight.values());

  ModelHyper bad = defaults;
  bad.model_dim = 10;
  bad.heads = 4;
  CHECK_THROWS_AS(init_model(bad, ctx, 1), ParamError);
}

TEST_CASE("forward contract: shape and eval determinism") {
  Rng rng(3);
  SensorGraph g = ring_graph(6, rng);
  KriformerModel m = init_model(tiny_hyper(), make_spatial_context(g), 7);
  Tensor x = random_window(rng, 8, 6, 1);
  Tensor out = forward(m, x, false);
  REQUIRE(out.shape() == Shape{8, 6, 1});
  CHECK(bitwise_equal(out, forward(m, x, false)));
  for (double v : out.values()) CHECK(std::isfinite(v));

  CHECK_THROWS_AS(forward(m, random_window(rng, 8, 5, 1), false), ShapeError);
  CHECK_THROWS_AS(forward(m, x, true, nullptr), ParamError);

  Rng d1(5), d2(5);
  CHECK(bitwise_equal(forward(m, x, true, &d1), forward(m, x, true, &d2)));
}

TEST_CASE("parameter count closed form matches enumeration") {
  Rng rng(5);
  SensorGraph g = ring_graph(7, rng);
  for (MergeMode mode : {MergeMode::add, MergeMode::concat, MergeMode::multiply}) {
    ModelHyper h = tiny_hyper();
    h.merge_mode = mode;
    h.encoder_layers = 2;
    h.decoder_layers = 1;
    KriformerModel m = init_model(h, make_spatial_context(g, 3), 11);
    std::size_t total = 0;
    for (Tensor& p : m.parameters()) total += p.numel();
    CHECK(total == parameter_count(m.hyper, m.hyper.eigen_dim));
  }
}

TEST_CASE("no_STE ablation ignores embedding parameters") {
  Rng rng(7);
  SensorGraph g = ring_graph(6, rng);
  KriformerModel m = init_model(tiny_hyper(), make_spatial_context(g), 13);
  Tensor x = random_window(rng, 4, 6, 1);

  KriformerModel ablated = apply_ablation(m, "no_STE");
  Tensor base = forward(ablated, x, false);
  // Scrambling the STE parameters must not change the output.
  for (double& v : ablated.ste.se_weight.mutable_values()) v += 3.5;
  for (double& v : ablated.ste.ste_weight.mutable_values()) v -= 1.25;
  Tensor scrambled = forward(ablated, x, false);
  CHECK(bitwise_equal(base, scrambled));

  // The full model does react to those parameters.
  KriformerModel full = clone_model(m);
  Tensor full_base = forward(full, x, false);
  for (double& v : full.ste.ste_weight.mutable_values()) v += 0.5;
  CHECK_FALSE(bitwise_equal(full_base, forward(full, x, false)));
}

TEST_CASE("ablation variants change the forward output; none is identity") {
  Rng rng(11);
  SensorGraph g = ring_graph(6, rng);
  KriformerModel m = init_model(tiny_hyper(), make_spatial_context(g), 17);
  Tensor x = random_window(rng, 5, 6, 1);
  Tensor base = forward(m, x, false);

  CHECK(bitwise_equal(base, forward(apply_ablation(m, "none"), x, false)));
  for (const std::string& variant : ablation_variant_names()) {
    KriformerModel v = apply_ablation(m, variant);
    CHECK(ablation_name(v.ablation) == variant);
    CHECK_FALSE(bitwise_equal(base, forward(v, x, false)));
  }
  CHECK_THROWS_AS(apply_ablation(m, "no_everything"), ParamError);

  // no_TE keeps spatial structure: outputs still vary across nodes.
  KriformerModel no_te = apply_ablation(m, "no_TE");
  Tensor out = forward(no_te, x, false);
  bool varies = false;
  for (std::size_t t = 0; t < 5 && !varies; ++t)
    for (std::size_t i = 1; i < 6 && !varies; ++i)
      varies = out.at({t, i, 0}) != out.at({t, 0, 0});
  CHECK(varies);
}

TEST_CASE("joint node permutation equivariance of the forward pass") {
  Rng rng(13);
  const std::size_t n = 6, t = 5;
  SensorGraph g = ring_graph(n, rng);
  SpatialContext ctx = make_spatial_context(g);
  KriformerModel m = init_model(tiny_hyper(), ctx, 19);
  Tensor x = random_window(rng, t, n, 1);
  Tensor base = forward(m, x, false);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n; i-- > 1;) std::swap(perm[i], perm[uniform_below(rng, i + 1)]);

  // Permute the input, the eigenmap rows, and the mask consistently.
  SpatialContext permuted = ctx;
  const std::size_t k = ctx.se_raw.shape()[1];
  std::vector<double> se(n * k), mask(n * n), xin(x.numel());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j)
      se[perm[i] * k + j] = ctx.se_raw.at({i, j});
    for (std::size_t j = 0; j < n; ++j)
      mask[perm[i] * n + perm[j]] = ctx.spatial_mask.at({i, j});
  }
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t i = 0; i < n; ++i)
      xin[ti * n + perm[i]] = x.at({ti, i, 0});
  permuted.se_raw = Tensor::from_data({n, k}, std::move(se));
  permuted.spatial_mask = Tensor::from_data({n, n}, std::move(mask));

  KriformerModel mp = init_model(tiny_hyper(), permuted, 19);
  // Same seed initializes identical parameters; swap in the permuted buffers.
  Tensor out = forward(mp, Tensor::from_data({t, n, 1}, std::move(xin)), false);
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t i = 0; i < n; ++i)
      CHECK(std::fabs(out.at({ti, perm[i], 0}) - base.at({ti, i, 0})) <= 1e-9);
}

TEST_CASE("zeroing a connected node changes some prediction") {
  Rng rng(17);
  const std::size_t n = 6;
  SensorGraph g = ring_graph(n, rng);
  KriformerModel m = init_model(tiny_hyper(), make_spatial_context(g), 23);
  Tensor x = random_window(rng, 4, n, 1);
  Tensor base = forward(m, x, false);

  std::vector<double> zeroed = x.values();
  for (std::size_t ti = 0; ti < 4; ++ti) zeroed[ti * n + 2] = 0.0;
  Tensor out = forward(m, Tensor::from_data({4, n, 1}, std::move(zeroed)), false);
  double delta = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i)
    delta = std::max(delta, std::fabs(out.values()[i] - base.values()[i]));
  CHECK(delta > 1e-9);
}

TEST_CASE("checkpoint round trip preserves forward bitwise") {
  Rng rng(19);
  SensorGraph g = ring_graph(6, rng);
  ModelHyper h = tiny_hyper();
  h.dropout = 0.2;
  KriformerModel m = init_model(h, make_spatial_context(g), 29);
  m.norm_mean = 57.25;
  m.norm_std = 11.5;
  m.provenance_json = R"({"kind":"test"})";
  Tensor x = random_window(rng, 6, 6, 1);
  Tensor base = forward(m, x, false);

  const std::string path = "test_model_ckpt.bin";
  save_checkpoint(m, path);
  KriformerModel loaded = load_checkpoint(path);
  CHECK(loaded.norm_mean == 57.25);
  CHECK(loaded.norm_std == 11.5);
  CHECK(loaded.graph_fingerprint == m.graph_fingerprint);
  CHECK(loaded.hyper.dropout == h.dropout);
  CHECK(bitwise_equal(base, forward(loaded, x, false)));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint detects truncation and restores ablation flags") {
  Rng rng(23);
  SensorGraph g = ring_graph(6, rng);
  KriformerModel m = init_model(tiny_hyper(), make_spatial_context(g), 31);
  KriformerModel ablated = apply_ablation(m, "no_MSIA");

  const std::string path = "test_model_ckpt2.bin";
  save_checkpoint(ablated, path);
  KriformerModel loaded = load_checkpoint(path);
  CHECK(ablation_name(loaded.ablation) == "no_MSIA");

  // Truncate and expect a load error.
  std::string data;
  {
    std::ifstream in(path, std::ios::binary);
    data.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);

  // Corrupt one payload byte: the checksum must catch it.
  data[data.size() / 2] = static_cast<char>(data[data.size() / 2] ^ 0x40);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::remove(path.c_str());

  CHECK_THROWS_AS(load_checkpoint("no_such_file.bin"), DataError);
}
