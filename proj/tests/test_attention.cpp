#include "asea/attention.hpp"
#include "test_util.hpp"

using namespace asea;
using asea::test::require_close;

namespace {

Var cst(Tensor t) { return Var::constant(std::move(t)); }

Tensor random_masks(Rng& rng, std::size_t B, std::size_t N, std::size_t lo, std::size_t hi) {
  Tensor m(Shape{B, 2, N});
  for (std::size_t r = 0; r < 2 * B; ++r) {
    std::vector<std::size_t> idx(N);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    const std::size_t k = lo + rng.index(hi - lo + 1);
    for (std::size_t i = 0; i < k; ++i) m[r * N + idx[i]] = 1.0;
  }
  return m;
}

std::vector<double> project(const Tensor& w, const std::vector<double>& v, const Tensor* bias = nullptr) {
  std::vector<double> out(w.dim(0), 0.0);
  for (std::size_t o = 0; o < w.dim(0); ++o) {
    out[o] = bias ? (*bias)[o] : 0.0;
    for (std::size_t i = 0; i < w.dim(1); ++i) out[o] += w.at({o, i}) * v[i];
  }
  return out;
}

// Gather the active nodes of each person, attend among the gathered sets, scatter back.
Tensor gather_oracle(const Tensor& x, const Tensor& masks, const EaParams& p) {
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), N = x.dim(4);
  const double sd = std::sqrt(static_cast<double>(p.key_dim()));
  Tensor y = x;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t m = 0; m < 2; ++m) {
        const std::size_t o = 1 - m;
        std::vector<std::size_t> qs, ks;
        for (std::size_t n = 0; n < N; ++n) {
          if (masks.at({b, m, n}) > 0.5) qs.push_back(n);
          if (masks.at({b, o, n}) > 0.5) ks.push_back(n);
        }
        auto feat = [&](std::size_t person, std::size_t n) {
          std::vector<double> f(C);
          for (std::size_t c = 0; c < C; ++c) f[c] = x.at({b, c, t, person, n});
          return f;
        };
        for (auto i : qs) {
          auto q = project(p.wq.weight.value(), feat(m, i));
          std::vector<double> sc;
          for (auto j : ks) {
            auto k = project(p.wk.weight.value(), feat(o, j));
            double d = 0;
            for (std::size_t c = 0; c < q.size(); ++c) d += q[c] * k[c];
            sc.push_back(d / sd);
          }
          const double mx = *std::max_element(sc.begin(), sc.end());
          double z = 0;
          for (double& s : sc) z += (s = std::exp(s - mx));
          std::vector<double> acc(q.size(), 0.0);
          for (std::size_t a = 0; a < ks.size(); ++a) {
            auto v = project(p.wv.weight.value(), feat(o, ks[a]));
            for (std::size_t c = 0; c < v.size(); ++c) acc[c] += sc[a] / z * v[c];
          }
          const Tensor bo = p.wo.bias->value();
          auto u = project(p.wo.weight.value(), acc, &bo);
          for (std::size_t c = 0; c < C; ++c) y.at({b, c, t, m, i}) += u[c];
        }
      }
  return y;
}

Tensor swap_persons5(const Tensor& x) {
  Tensor y(x.shape());
  const std::size_t outer = x.dim(0) * x.dim(1) * x.dim(2), N = x.dim(4);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t n = 0; n < N; ++n) y[(o * 2 + m) * N + n] = x[(o * 2 + (1 - m)) * N + n];
  return y;
}

Tensor swap_mask(const Tensor& m) {
  Tensor y(m.shape());
  const std::size_t B = m.dim(0), N = m.dim(2);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t n = 0; n < N; ++n) y.at({b, p, n}) = m.at({b, 1 - p, n});
  return y;
}

}  // namespace

TEST_CASE("one active node per person: single-key attention", "[ea]") {
  Rng rng(1);
  EaParams p(rng, 4);
  Tensor x = rng.uniform_tensor({1, 4, 3, 2, 5}, -1, 1);
  Tensor masks(Shape{1, 2, 5});
  masks.at({0, 0, 1}) = 1.0;
  masks.at({0, 1, 3}) = 1.0;
  AttentionRecord rec;
  Tensor y = ea_forward(cst(x), cst(masks), p, &rec).value();
  for (std::size_t t = 0; t < 3; ++t) {
    REQUIRE(rec.alpha[0].at({0, t, 1, 3}) == 1.0);
    REQUIRE(rec.alpha[1].at({0, t, 3, 1}) == 1.0);
    // out for the active query is the other person's value vector at its active node.
    std::vector<double> f(4);
    for (std::size_t c = 0; c < 4; ++c) f[c] = x.at({0, c, t, 1, 3});
    auto v = project(p.wv.weight.value(), f);
    for (std::size_t c = 0; c < v.size(); ++c) REQUIRE(std::abs(rec.out[0].at({0, c, t, 1}) - v[c]) <= 1e-12);
  }
}

TEST_CASE("identical keys give uniform attention over the active keys", "[ea]") {
  Rng rng(2);
  EaParams p(rng, 4);
  Tensor x = rng.uniform_tensor({1, 4, 2, 2, 6}, -1, 1);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t n = 0; n < 6; ++n) x.at({0, c, t, 1, n}) = 0.1 * static_cast<double>(c + t);
  Tensor masks(Shape{1, 2, 6}, 1.0);
  masks.at({0, 1, 0}) = 0.0;
  masks.at({0, 1, 4}) = 0.0;  // J2 = 4
  AttentionRecord rec;
  ea_forward(cst(x), cst(masks), p, &rec);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        REQUIRE(std::abs(rec.alpha[0].at({0, t, i, j}) - (masks.at({0, 1, j}) > 0 ? 0.25 : 0.0)) <= 1e-12);
}

TEST_CASE("masked attention equals the gather-then-attend oracle", "[ea]") {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Rng rng(seed);
    EaParams p(rng, 4, seed % 2 ? 1 : 4);
    Tensor x = rng.uniform_tensor({2, 4, 3, 2, 5}, -1, 1);
    Tensor masks = random_masks(rng, 2, 5, 2, 3);
    require_close(ea_forward(cst(x), cst(masks), p).value(), gather_oracle(x, masks, p), 1e-9);
  }
}

TEST_CASE("attention rows are stochastic and inactive rows/queries are untouched", "[ea]") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    EaParams p(rng, 6);
    Tensor x = rng.uniform_tensor({2, 6, 4, 2, 7}, -1, 1);
    Tensor masks = random_masks(rng, 2, 7, 1, 6);
    AttentionRecord rec;
    Tensor y = ea_forward(cst(x), cst(masks), p, &rec).value();
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t < 4; ++t)
          for (std::size_t i = 0; i < 7; ++i) {
            double row = 0;
            for (std::size_t j = 0; j < 7; ++j) {
              const double a = rec.alpha[m].at({b, t, i, j});
              if (masks.at({b, 1 - m, j}) == 0.0) REQUIRE(a == 0.0);
              row += a;
            }
            if (masks.at({b, m, i}) > 0) {
              REQUIRE(std::abs(row - 1.0) <= 1e-9);
            } else {
              REQUIRE(row == 0.0);
              for (std::size_t c = 0; c < 6; ++c) REQUIRE(y.at({b, c, t, m, i}) == x.at({b, c, t, m, i}));
            }
          }
  }
}

TEST_CASE("swapping persons and masks swaps the outputs exactly", "[ea]") {
  Rng rng(3);
  EaParams p(rng, 4);
  Tensor x = rng.uniform_tensor({2, 4, 3, 2, 5}, -1, 1);
  Tensor masks = random_masks(rng, 2, 5, 1, 4);
  AttentionRecord r1, r2;
  Tensor y = ea_forward(cst(x), cst(masks), p, &r1).value();
  Tensor ys = ea_forward(cst(swap_persons5(x)), cst(swap_mask(masks)), p, &r2).value();
  REQUIRE(ys == swap_persons5(y));
  REQUIRE(r2.alpha[0] == r1.alpha[1]);
  REQUIRE(r2.out[1] == r1.out[0]);
}

TEST_CASE("an all-inactive person violates the contract", "[ea]") {
  Rng rng(4);
  EaParams p(rng, 4);
  Tensor masks(Shape{1, 2, 5}, 1.0);
  for (std::size_t n = 0; n < 5; ++n) masks.at({0, 1, n}) = 0.0;
  REQUIRE_THROWS_AS(ea_forward(cst(rng.uniform_tensor({1, 4, 2, 2, 5}, -1, 1)), cst(masks), p), ContractError);
}

TEST_CASE("person concatenation is a pure axis permutation", "[ea]") {
  Rng rng(5);
  Tensor y = rng.uniform_tensor({2, 8, 4, 2, 15}, -1, 1);
  Var c = concat_persons(cst(y));
  REQUIRE(c.shape() == Shape{2, 8, 4, 15, 2});
  REQUIRE(permute(c.value(), {0, 1, 2, 4, 3}) == y);
  EaParams p(rng, 8);
  Tensor ones(Shape{2, 2, 15}, 1.0);
  Var out = ea_forward(cst(y), cst(ones), p);
  REQUIRE(concat_persons(out).value() == permute(out.value(), {0, 1, 2, 4, 3}));
}

TEST_CASE("attention gradients match finite differences, including soft masks", "[ea][grad]") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    EaParams p(rng, 4);
    Var x = Var::parameter(rng.uniform_tensor({1, 4, 2, 2, 4}, -1, 1));
    Var m = Var::parameter(rng.uniform_tensor({1, 2, 4}, 0.2, 1.0));
    ParamSet ps;
    p.collect("ea", ps);
    std::vector<std::pair<std::string, Var>> check{{"x", x}, {"mask", m}};
    for (const auto& np : ps.params) check.emplace_back(np.name, np.var);
    test::require_gradients_match(check, [&] { return test::weighted_sum(ea_forward(x, m, p), seed); });
  }
}

TEST_CASE("attention export lists active query weights", "[ea][json]") {
  Rng rng(6);
  EaParams p(rng, 4);
  Tensor masks(Shape{1, 2, 3});
  masks.at({0, 0, 0}) = masks.at({0, 1, 1}) = masks.at({0, 1, 2}) = 1.0;
  AttentionRecord rec;
  ea_forward(cst(rng.uniform_tensor({1, 4, 2, 2, 3}, -1, 1)), cst(masks), p, &rec);
  auto j = attention_to_json(rec, 0);
  REQUIRE(j["frames"].size() == 2);
  // person 0: one query x two keys; person 1: two queries x one key
  REQUIRE(j["frames"][0]["entries"].size() == 4);
  double total = 0;
  for (const auto& e : j["frames"][1]["entries"])
    if (e["query_person"] == 0) total += e["weight"].get<double>();
  REQUIRE(std::abs(total - 1.0) <= 1e-9);
}
