#include "asea/model.hpp"
#include "test_util.hpp"

using namespace asea;

namespace {

AseaConfig tiny_config(Strategy s = Strategy::Atnac, bool ea = true) {
  AseaConfig c;
  c.widths = {8, 8};
  c.num_classes = 4;
  c.strategy = s;
  c.use_ea = ea;
  return c;
}

Batch random_batch(Rng& rng, std::size_t B, std::size_t T, std::size_t N = 15) {
  Batch b;
  b.data = rng.uniform_tensor({B, 3, T, 2, N}, -1, 1);
  b.pad_mask = Tensor(Shape{B, T}, 1.0);
  for (std::size_t i = 0; i < B; ++i) b.labels.push_back(i % 4);
  return b;
}

Tensor swap_persons(const Tensor& data) {
  Tensor y(data.shape());
  const std::size_t outer = data.dim(0) * data.dim(1) * data.dim(2), N = data.dim(4);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t n = 0; n < N; ++n) y[(o * 2 + m) * N + n] = data[(o * 2 + 1 - m) * N + n];
  return y;
}

std::size_t linear_count(std::size_t i, std::size_t o, bool bias = true) { return i * o + (bias ? o : 0); }

// Parameter count written out from the architecture definition.
std::size_t expected_count(const AseaConfig& c, std::size_t N) {
  std::size_t total = 0, cin = 3;
  auto tcn = [&](std::size_t ci, std::size_t co) {
    const std::size_t cb = co / 4;
    std::size_t n = 4 * linear_count(ci, cb);
    n += 3 * (cb * cb * 5 + cb) * (c.double_tconv ? 2 : 1);
    return n;
  };
  for (std::size_t w : c.widths) {
    const std::size_t cr = std::max<std::size_t>(cin / c.reduction, 1);
    total += 2 * linear_count(cin, cr) + linear_count(cr, w) + linear_count(cin, w) + 2 * w + N * N + 1;
    total += tcn(w, w);
    if (cin != w) total += linear_count(cin, w);
    cin = w;
  }
  if (c.strategy != Strategy::None) total += 1;
  if (c.use_ea) {
    const std::size_t d = c.attn_dim ? c.attn_dim : cin / 2;
    total += 3 * cin * d + linear_count(d, cin);
  }
  total += tcn(cin, cin) + linear_count(cin, c.num_classes);
  return total;
}

}  // namespace

TEST_CASE("logits have one row per sample and one column per class", "[model]") {
  Rng rng(1);
  AseaModel m(tiny_config());
  auto fr = m.forward(random_batch(rng, 2, 6), false);
  REQUIRE(fr.logits.shape() == Shape{2, 4});
  REQUIRE(fr.logits.value().all_finite());
  REQUIRE_THROWS_AS(m.forward(random_batch(rng, 2, 6, 10), false), ConfigError);
}

TEST_CASE("duplicated samples give identical logits at inference", "[model]") {
  Rng rng(2);
  AseaModel m(tiny_config());
  Batch b = random_batch(rng, 1, 6);
  Batch d;
  d.data = Tensor(Shape{2, 3, 6, 2, 15});
  for (std::size_t i = 0; i < b.data.size(); ++i) d.data[i] = d.data[b.data.size() + i] = b.data[i];
  d.pad_mask = Tensor(Shape{2, 6}, 1.0);
  Tensor l = m.forward(d, false).logits.value();
  for (std::size_t k = 0; k < 4; ++k) REQUIRE(l.at({0, k}) == l.at({1, k}));
}

TEST_CASE("swapping the persons leaves inference logits unchanged", "[model]") {
  for (auto s : {Strategy::Atnac, Strategy::Velocity, Strategy::None}) {
    for (bool ea : {true, false}) {
      Rng rng(3);
      AseaModel m(tiny_config(s, ea));
      Batch b = random_batch(rng, 3, 7);
      Tensor a = m.forward(b.data, b.pad_mask, false).logits.value();
      Tensor c = m.forward(swap_persons(b.data), b.pad_mask, false).logits.value();
      INFO(to_string(s) << " ea=" << ea);
      REQUIRE(max_abs_diff(a, c) <= 1e-9);
    }
  }
}

TEST_CASE("padding frames do not change the pooled prediction of a clip", "[model]") {
  Rng rng(4);
  AseaConfig c = tiny_config();
  c.widths = {8};
  AseaModel m(c);
  Batch b = random_batch(rng, 1, 6);
  ForwardResult fr = m.forward(b, false);
  REQUIRE(fr.pool_weights.shape() == Shape{1, 6, 30});
  Batch p;
  p.data = Tensor(Shape{1, 3, 9, 2, 15});
  for (std::size_t c2 = 0; c2 < 3; ++c2)
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t k = 0; k < 30; ++k) p.data[(c2 * 9 + t) * 30 + k] = b.data[(c2 * 6 + t) * 30 + k];
  p.pad_mask = Tensor(Shape{1, 9}, 0.0);
  for (std::size_t t = 0; t < 6; ++t) p.pad_mask[t] = 1.0;
  ForwardResult fp = m.forward(p, false);
  for (std::size_t t = 6; t < 9; ++t)
    for (std::size_t k = 0; k < 30; ++k) REQUIRE(fp.pool_weights.at({0, t, k}) == 0.0);
  // Temporal weights of node selection ignore the pad frames.
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t t = 6; t < 9; ++t) REQUIRE(fp.selection.weights.value().at({r, t}) == 0.0);
}

TEST_CASE("loss parts", "[model][loss]") {
  Var uni = Var::constant(Tensor(Shape{3, 4}, 0.7));
  Var alpha = Var::parameter(Tensor::scalar(0.5));
  LossParts lp = total_loss(uni, {0, 1, 3}, alpha, 0.1, 0.5);
  REQUIRE(lp.reg == 0.0);
  REQUIRE(std::abs(lp.task - std::log(4.0)) <= 1e-12);
  REQUIRE(std::abs(lp.task - 1.3863) <= 1e-4);

  Var a2 = Var::parameter(Tensor::scalar(0.8));
  LossParts l0 = total_loss(uni, {0, 1, 3}, a2, 0.0, 0.5);
  REQUIRE(l0.total.value().item() == l0.task);
  LossParts l2 = total_loss(uni, {0, 1, 3}, a2, 2.0, 0.5);
  REQUIRE(std::abs(l2.reg - 2.0 * 0.3 * 0.3) <= 1e-15);
  REQUIRE(l2.total.value().item() == l2.task + l2.reg);

  REQUIRE_THROWS_AS(total_loss(uni, {0, 4, 1}, alpha, 0.1, 0.5), DataError);

  // Cross-entropy against a direct log-sum-exp evaluation.
  Rng rng(5);
  Tensor lg = rng.uniform_tensor({5, 3}, -3, 3);
  std::vector<std::size_t> y{0, 2, 1, 1, 0};
  double expect = 0;
  for (std::size_t b = 0; b < 5; ++b) {
    double z = 0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(lg.at({b, k}));
    expect += (std::log(z) - lg.at({b, y[b]})) / 5;
  }
  REQUIRE(std::abs(cross_entropy(Var::constant(lg), y).value().item() - expect) <= 1e-12);
}

TEST_CASE("parameter accounting", "[model][params]") {
  Rng rng(6);
  ParamSet ps;
  Linear(rng, 8, 4).collect("l", ps);
  REQUIRE(ps.count() == 36);

  AseaModel m(tiny_config());
  ParamSet all = m.parameters();
  REQUIRE(all.find("encoder0.gcn.alpha_refine")->var.value().size() == 1);
  REQUIRE(all.find("atnac.alpha_thresh")->var.value().size() == 1);

  for (auto s : {Strategy::Atnac, Strategy::None}) {
    for (bool ea : {true, false}) {
      for (bool dbl : {false, true}) {
        AseaConfig c;
        c.strategy = s;
        c.use_ea = ea;
        c.double_tconv = dbl;
        ParamCount pc = count_params(c);
        REQUIRE(pc.total == expected_count(c, 15));
        std::size_t sum = 0;
        for (const auto& [k, v] : pc.by_module) sum += v;
        REQUIRE(sum == pc.total);
      }
    }
  }
}

TEST_CASE("config validation and JSON round trip", "[model][config]") {
  AseaConfig c;
  c.widths = {8, 12};
  c.strategy = Strategy::Velocity;
  c.training_mask = MaskMode::Hard;
  AseaConfig r = config_from_json(config_to_json(c));
  REQUIRE(config_to_json(r) == config_to_json(c));
  c.num_classes = 1;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c.num_classes = 4;
  c.widths = {6};
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  REQUIRE_THROWS_AS(parse_strategy("random"), ConfigError);
}

TEST_CASE("end-to-end gradients match finite differences on a tiny model", "[model][grad]") {
  AseaConfig c;
  c.skeleton = SkeletonKind::Custom;
  c.custom_graph = {{"names", {"a", "b", "c", "d", "e"}}, {"edges", {{0, 1}, {1, 2}, {2, 3}, {1, 4}}}};
  c.widths = {8};
  c.num_classes = 3;
  c.training_mask = MaskMode::Soft;
  c.seed = 11;
  AseaModel m(c);
  Rng rng(12);
  Batch b = random_batch(rng, 2, 6, 5);
  b.labels = {0, 2};
  ParamSet ps = m.parameters();
  std::vector<std::pair<std::string, Var>> check;
  for (const auto& p : ps.params) check.emplace_back(p.name, p.var);
  GradCheckOptions opt;
  auto entries = check_gradients(check, [&] { return total_loss(m, m.forward(b, true), b.labels).total; }, opt);
  for (const auto& e : entries) {
    INFO(e.name << " worst " << e.worst_index << " analytic " << e.analytic << " numeric " << e.numeric << " rel "
                 << e.max_rel_error);
    CHECK(e.passed());
  }
}
