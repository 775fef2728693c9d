#include "asea/intra_gcn.hpp"
#include "test_util.hpp"

using namespace asea;
using asea::test::require_close;
using asea::test::weighted_sum;

namespace {

Tensor random_a0(Rng& rng, std::size_t n) { return rng.uniform_tensor({n, n}, 0.0, 0.5); }

// Per-pair oracle for the channel correlation, written directly from the definition.
Tensor correlation_oracle(const Tensor& x, const GcnBlockParams& p) {
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), N = x.dim(3);
  const Tensor& wpsi = p.psi.weight.value();
  const Tensor& bpsi = p.psi.bias->value();
  const Tensor& wphi = p.phi.weight.value();
  const Tensor& bphi = p.phi.bias->value();
  const Tensor& wd = p.delta.weight.value();
  const Tensor& bd = p.delta.bias->value();
  const std::size_t Cr = wpsi.dim(0), Co = wd.dim(0);
  Tensor q(Shape{B, Co, N, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        std::vector<double> xi(C, 0.0), xj(C, 0.0);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t t = 0; t < T; ++t) {
            xi[c] += x.at({b, c, t, i}) / static_cast<double>(T);
            xj[c] += x.at({b, c, t, j}) / static_cast<double>(T);
          }
        std::vector<double> h(Cr);
        for (std::size_t r = 0; r < Cr; ++r) {
          double a = bpsi[r], d = bphi[r];
          for (std::size_t c = 0; c < C; ++c) {
            a += wpsi.at({r, c}) * xi[c];
            d += wphi.at({r, c}) * xj[c];
          }
          h[r] = std::tanh(a - d);
        }
        for (std::size_t o = 0; o < Co; ++o) {
          double v = bd[o];
          for (std::size_t r = 0; r < Cr; ++r) v += wd.at({o, r}) * h[r];
          q.at({b, o, i, j}) = v;
        }
      }
  return q;
}

// Loop oracle for spatial aggregation with batch-statistic normalization.
Tensor aggregate_oracle(const Tensor& x, const Tensor& r, const GcnBlockParams& p) {
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), N = x.dim(3);
  const Tensor& wf = p.feat.weight.value();
  const Tensor& bf = p.feat.bias->value();
  const std::size_t Co = wf.dim(0);
  Tensor e(Shape{B, Co, T, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < N; ++n) {
          double v = bf[o];
          for (std::size_t c = 0; c < C; ++c) v += wf.at({o, c}) * x.at({b, c, t, n});
          e.at({b, o, t, n}) = v;
        }
  Tensor agg(Shape{B, Co, T, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < N; ++i) {
          double v = 0;
          for (std::size_t j = 0; j < N; ++j) v += r.at({b, o, i, j}) * e.at({b, o, t, j});
          agg.at({b, o, t, i}) = v;
        }
  Tensor out(agg.shape());
  const double cnt = static_cast<double>(B * T * N);
  for (std::size_t o = 0; o < Co; ++o) {
    double mu = 0, var = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < N; ++n) mu += agg.at({b, o, t, n}) / cnt;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < N; ++n) var += std::pow(agg.at({b, o, t, n}) - mu, 2) / cnt;
    const double g = p.norm.gamma.value()[o], be = p.norm.beta.value()[o];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t n = 0; n < N; ++n)
          out.at({b, o, t, n}) = std::max(0.0, g * (agg.at({b, o, t, n}) - mu) / std::sqrt(var + 1e-5) + be);
  }
  return out;
}

// [B*M, C, T, N] with person m of sample b at row b*M+m; swaps the two persons.
Tensor swap_persons(const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t rows = x.dim(0), inner = x.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t src = r ^ 1u;
    std::copy(x.ptr() + src * inner, x.ptr() + (src + 1) * inner, y.ptr() + r * inner);
  }
  return y;
}

}  // namespace

TEST_CASE("identical joints give a pair-constant correlation", "[gcn]") {
  Rng rng(1);
  GcnBlockParams p(rng, 3, 8, random_a0(rng, 5));
  Tensor x(Shape{2, 3, 4, 5});
  Tensor per_frame = rng.uniform_tensor({2, 3, 4}, -1, 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t n = 0; n < 5; ++n) x.at({b, c, t, n}) = per_frame.at({b, c, t});
  Tensor q = channel_correlation(Var::constant(x), p).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) REQUIRE(q.at({b, c, i, j}) == q.at({b, c, 0, 0}));
}

TEST_CASE("pre-expansion correlations lie strictly inside (-1, 1)", "[gcn]") {
  Rng rng(2);
  GcnBlockParams p(rng, 4, 2, random_a0(rng, 3));
  // delta replaced by the identity so the output is the activation itself.
  p.delta.weight = Var::constant(Tensor::identity(2));
  p.delta.bias = Var::constant(Tensor(Shape{2}, 0.0));
  Tensor x = rng.uniform_tensor({3, 4, 6, 3}, -3, 3);
  for (double v : test::values(channel_correlation(Var::constant(x), p))) {
    REQUIRE(v > -1.0);
    REQUIRE(v < 1.0);
  }
}

TEST_CASE("channel correlation matches the per-pair loop oracle", "[gcn]") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    GcnBlockParams p(rng, 2, 4, random_a0(rng, 3));
    Tensor x = rng.uniform_tensor({2, 2, 5, 3}, -1, 1);
    require_close(channel_correlation(Var::constant(x), p).value(), correlation_oracle(x, p), 1e-12);
  }
}

TEST_CASE("topology refinement special cases and oracle", "[gcn]") {
  Rng rng(3);
  Tensor a = rng.uniform_tensor({4, 4}, -1, 1);
  Tensor q = rng.uniform_tensor({2, 3, 4, 4}, -1, 1);
  Tensor r0 = refine_topology(Var::constant(a), Var::constant(q), Var::constant(Tensor::scalar(0.0))).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) REQUIRE(r0.at({b, c, i, j}) == a.at({i, j}));
  Tensor rz =
      refine_topology(Var::constant(a), Var::constant(Tensor(q.shape(), 0.0)), Var::constant(Tensor::scalar(0.7)))
          .value();
  for (std::size_t k = 0; k < rz.size(); ++k) REQUIRE(rz[k] == a[k % 16]);
  Tensor r = refine_topology(Var::constant(a), Var::constant(q), Var::constant(Tensor::scalar(0.3))).value();
  for (std::size_t k = 0; k < r.size(); ++k) REQUIRE(std::abs(r[k] - (a[k % 16] + 0.3 * q[k])) <= 1e-15);
  REQUIRE_THROWS_AS(refine_topology(Var::constant(Tensor({3, 3})), Var::constant(q), Var::constant(Tensor::scalar(1))),
                    DimensionError);
}

TEST_CASE("identity topology and identity features reduce to relu(norm(x))", "[gcn]") {
  Rng rng(4);
  GcnBlockParams p(rng, 3, 3, random_a0(rng, 4));
  p.feat.weight = Var::constant(Tensor::identity(3));
  p.feat.bias.reset();
  p.norm.gamma = Var::constant(rng.uniform_tensor({3}, 0.5, 1.5));
  p.norm.beta = Var::constant(rng.uniform_tensor({3}, -0.5, 0.5));
  Tensor x = rng.uniform_tensor({2, 3, 5, 4}, -1, 1);
  Tensor eye(Shape{2, 3, 4, 4});
  for (std::size_t bc = 0; bc < 6; ++bc)
    for (std::size_t i = 0; i < 4; ++i) eye[bc * 16 + i * 4 + i] = 1.0;
  Tensor got = spatial_aggregate(Var::constant(x), Var::constant(eye), p, true).value();
  ChannelNorm fresh(3);
  fresh.gamma = p.norm.gamma;
  fresh.beta = p.norm.beta;
  Tensor expect = relu(fresh(Var::constant(x), true)).value();
  REQUIRE(got == expect);
}

TEST_CASE("a zero topology row leaves only the normalization bias", "[gcn]") {
  Rng rng(5);
  GcnBlockParams p(rng, 3, 4, random_a0(rng, 4));
  p.norm.beta = Var::constant(Tensor::vector({0.3, -0.2, 0.0, 1.1}));
  Tensor x = rng.uniform_tensor({1, 3, 5, 4}, -1, 1);
  Tensor r = rng.uniform_tensor({1, 4, 4, 4}, -1, 1);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t j = 0; j < 4; ++j) r.at({0, c, 2, j}) = 0.0;
  Tensor out = spatial_aggregate(Var::constant(x), Var::constant(r), p, false).value();
  const double beta[] = {0.3, 0.0, 0.0, 1.1};
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 5; ++t) REQUIRE(out.at({0, c, t, 2}) == beta[c]);
}

TEST_CASE("spatial aggregation matches the triple-loop oracle", "[gcn]") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    Rng rng(seed);
    GcnBlockParams p(rng, 3, 4, random_a0(rng, 4));
    p.norm.gamma = Var::parameter(rng.uniform_tensor({4}, 0.5, 1.5));
    p.norm.beta = Var::parameter(rng.uniform_tensor({4}, -0.5, 0.5));
    Tensor x = rng.uniform_tensor({2, 3, 5, 4}, -1, 1);
    Tensor r = rng.uniform_tensor({2, 4, 4, 4}, -1, 1);
    require_close(spatial_aggregate(Var::constant(x), Var::constant(r), p, true).value(), aggregate_oracle(x, r, p),
                  1e-12);
  }
}

TEST_CASE("encoder shares weights across persons", "[gcn][encoder]") {
  Rng rng(6);
  EncoderConfig cfg;
  cfg.widths = {8, 8};
  auto blocks = make_encoder(rng, cfg, init_adjacency(build_graph(SkeletonKind::Sbu15)));

  Tensor zero(Shape{4, 3, 6, 15});
  Tensor z = encoder_forward(Var::constant(zero), blocks, false).value();
  const std::size_t inner = z.size() / 4;
  for (std::size_t k = 0; k < inner; ++k) {
    REQUIRE(z[k] == z[inner + k]);
    REQUIRE(z[k] == z[3 * inner + k]);
  }

  Tensor x = rng.uniform_tensor({4, 3, 6, 15}, -1, 1);
  for (bool training : {false, true}) {
    Tensor e = encoder_forward(Var::constant(x), blocks, training).value();
    Tensor es = encoder_forward(Var::constant(swap_persons(x)), blocks, training).value();
    REQUIRE(es == swap_persons(e));
  }
}

TEST_CASE("a depth-1 encoder equals the manual composition of its layers", "[gcn][encoder]") {
  Rng rng(7);
  EncoderConfig cfg;
  cfg.widths = {8};
  auto blocks = make_encoder(rng, cfg, init_adjacency(build_graph(SkeletonKind::Sbu15)));
  Tensor x = rng.uniform_tensor({2, 3, 7, 15}, -1, 1);
  Var xv = Var::constant(x);
  Tensor got = encoder_forward(xv, blocks, false).value();
  auto& b = blocks[0];
  Var q = channel_correlation(xv, b.gcn);
  Var r = add(b.gcn.adjacency, mul(b.gcn.alpha_refine, q));
  Var s = relu(channel_norm(graph_aggregate(r, b.gcn.feat(xv)), b.gcn.norm.gamma, b.gcn.norm.beta, false,
                            b.gcn.norm.running_mean, b.gcn.norm.running_var));
  Var h = ms_temporal_forward(s, b.tcn);
  Tensor expect = relu(add(h, (*b.residual)(xv))).value();
  REQUIRE(got == expect);
}

TEST_CASE("with zero refinement the Q branch has no effect", "[gcn]") {
  Rng rng(8);
  GcnBlockParams p(rng, 3, 4, random_a0(rng, 5), 2, 0.0);
  Tensor x = rng.uniform_tensor({2, 3, 4, 5}, -1, 1);
  Tensor before = gcn_forward(Var::constant(x), p, false).value();
  p.psi = Linear(rng, 3, p.reduced_channels());
  p.phi = Linear(rng, 3, p.reduced_channels());
  p.delta = Linear(rng, p.reduced_channels(), 4);
  REQUIRE(gcn_forward(Var::constant(x), p, false).value() == before);
}

TEST_CASE("every block parameter receives nonzero gradient", "[gcn][grad]") {
  Rng rng(9);
  EncoderConfig cfg;
  cfg.widths = {8, 12};
  auto blocks = make_encoder(rng, cfg, init_adjacency(build_graph(SkeletonKind::Sbu15)));
  ParamSet ps;
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("block" + std::to_string(i), ps);
  Tensor x = rng.uniform_tensor({4, 3, 8, 15}, -1, 1);
  backward(weighted_sum(encoder_forward(Var::constant(x), blocks, true), 3));
  for (const auto& p : ps.params) {
    INFO(p.name);
    double mag = 0;
    for (double g : p.var.grad().data()) mag += std::abs(g);
    REQUIRE(mag > 0.0);
  }
}

TEST_CASE("gcn block gradients match finite differences", "[gcn][grad]") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    GcnBlockParams p(rng, 3, 4, random_a0(rng, 4));
    Var x = Var::parameter(rng.uniform_tensor({2, 3, 3, 4}, -1, 1));
    ParamSet ps;
    p.collect("gcn", ps);
    std::vector<std::pair<std::string, Var>> check{{"x", x}};
    for (const auto& np : ps.params) check.emplace_back(np.name, np.var);
    // A smooth head keeps the check away from the relu kink.
    test::require_gradients_match(check, [&] {
      Var q = channel_correlation(x, p);
      Var r = refine_topology(p.adjacency, q, p.alpha_refine);
      return weighted_sum(asea::tanh(p.norm(graph_aggregate(r, p.feat(x)), true)), seed);
    });
  }
}

TEST_CASE("a gradient step changes the shared adjacency", "[gcn][graph]") {
  Rng rng(10);
  GcnBlockParams p(rng, 3, 4, init_adjacency(build_graph(SkeletonKind::Sbu15)));
  Tensor before = p.adjacency.value();
  Tensor x = rng.uniform_tensor({2, 3, 4, 15}, -1, 1);
  backward(weighted_sum(gcn_forward(Var::constant(x), p, true), 1));
  Tensor& a = p.adjacency.mutable_value();
  Tensor g = p.adjacency.grad();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] -= 0.1 * g[i];
  REQUIRE(max_abs_diff(a, before) > 0.0);
}
