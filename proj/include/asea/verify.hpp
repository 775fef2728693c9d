#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "asea/gradcheck.hpp"
#include "asea/model.hpp"

namespace asea {

/// Central-difference check of a vector-Jacobian product: the analytic side
/// seeds `f`'s output with a fixed random adjoint u, the numeric side
/// differentiates <u, f> evaluated without the autodiff graph.
inline std::vector<GradCheckEntry> check_vjp(const std::vector<std::pair<std::string, Var>>& params,
                                             const std::function<Var()>& f, std::uint64_t seed,
                                             const GradCheckOptions& opt = {}) {
  for (const auto& [name, p] : params) p.node()->grad = Tensor();
  Tensor u;
  {
    Var y = f();
    Rng rng(seed);
    u = rng.uniform_tensor(y.shape(), -1.0, 1.0);
    backward(y, u);
  }
  std::vector<Tensor> analytic;
  for (const auto& [name, p] : params) analytic.push_back(p.grad());
  return detail::compare(params, analytic, [&] {
    NoGradGuard ng;
    const Tensor y = f().value();
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += u[i] * y[i];
    return s;
  }, opt);
}

struct ModuleCheck {
  std::string module;
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const {
    for (const auto& e : entries)
      if (!e.passed()) return false;
    return true;
  }
  std::vector<std::string> failing() const {
    std::vector<std::string> f;
    for (const auto& e : entries)
      if (!e.passed()) f.push_back(e.name);
    return f;
  }
};

namespace detail {

// Values bounded away from zero, so kinks (relu, max) sit far from every probe.
inline Tensor away_from_zero(Rng& rng, const Shape& s, double gap = 0.1) {
  Tensor t = rng.uniform_tensor(s, -1.0, 1.0);
  for (double& v : t.storage()) v = v < 0 ? v - gap : v + gap;
  return t;
}

inline Tensor distinct_values(Rng& rng, const Shape& s) {
  // A shuffled ladder with spacing far above the probe step, so the max is never tied.
  Tensor t(s);
  std::vector<double> ladder(t.size());
  for (std::size_t i = 0; i < ladder.size(); ++i) ladder[i] = 0.05 * static_cast<double>(i) - 1.0;
  rng.shuffle(ladder);
  for (std::size_t i = 0; i < ladder.size(); ++i) t[i] = ladder[i];
  return t;
}

inline nlohmann::json tiny_graph_json() {
  return {{"names", {"a", "b", "c", "d", "e"}}, {"edges", {{0, 1}, {1, 2}, {2, 3}, {1, 4}}}};
}

}  // namespace detail

/// The small end-to-end configuration used for gradient checking.
inline AseaConfig gradcheck_config(std::uint64_t seed) {
  AseaConfig c;
  c.skeleton = SkeletonKind::Custom;
  c.custom_graph = detail::tiny_graph_json();
  c.widths = {8};
  c.num_classes = 3;
  c.training_mask = MaskMode::Soft;
  c.seed = seed;
  return c;
}

inline ModuleCheck check_ops(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(seed);
  ModuleCheck mc{"tensor-ops", {}};
  using Params = std::vector<std::pair<std::string, Var>>;
  std::uint64_t k = 0;
  auto run = [&](const std::string& op, const Params& ps, const std::function<Var()>& f) {
    for (auto e : check_vjp(ps, f, seed * 1000 + (++k), opt)) {
      e.name = "op:" + op + (ps.size() > 1 ? "/" + e.name : "");
      mc.entries.push_back(e);
    }
  };
  auto P = [&](const Shape& s) { return Var::parameter(rng.uniform_tensor(s, -1.0, 1.0)); };
  auto Ppos = [&](const Shape& s) { return Var::parameter(rng.uniform_tensor(s, 0.5, 1.5)); };

  Var a = P({2, 3, 4}), b = P({3, 1}), bp = Ppos({3, 1});
  run("add", {{"a", a}, {"b", b}}, [&] { return add(a, b); });
  run("sub", {{"a", a}, {"b", b}}, [&] { return sub(a, b); });
  run("mul", {{"a", a}, {"b", b}}, [&] { return mul(a, b); });
  run("div", {{"a", a}, {"b", bp}}, [&] { return div(a, bp); });
  run("neg", {{"x", a}}, [&] { return neg(a); });
  run("scale", {{"x", a}}, [&] { return scale(a, 1.7); });
  Var az = Var::parameter(detail::away_from_zero(rng, {2, 3, 4}));
  run("relu", {{"x", az}}, [&] { return relu(az); });
  run("tanh", {{"x", a}}, [&] { return asea::tanh(a); });
  run("sigmoid", {{"x", a}}, [&] { return sigmoid(a); });
  run("exp", {{"x", a}}, [&] { return asea::exp(a); });
  Var pos = Ppos({2, 3, 4});
  run("log", {{"x", pos}}, [&] { return asea::log(pos); });
  run("square", {{"x", a}}, [&] { return square(a); });
  run("sum", {{"x", a}}, [&] { return sum(a, {0, 2}); });
  run("broadcast_to", {{"x", b}}, [&] { return broadcast_to(b, {2, 3, 4}); });
  run("reshape", {{"x", a}}, [&] { return reshape(a, {6, 4}); });
  run("permute", {{"x", a}}, [&] { return permute(a, {2, 0, 1}); });
  run("slice", {{"x", a}}, [&] { return slice(a, 2, 1, 2); });
  Var c = P({2, 2, 4});
  run("concat", {{"a", a}, {"b", c}}, [&] { return concat({a, c}, 1); });
  Tensor keep(Shape{2, 3, 4});
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (i % 3 == 0) ? 0.0 : 1.0;
  run("mask_fill", {{"x", a}}, [&] { return mask_fill(a, keep, 0.3); });
  Var m2 = P({4, 5});
  run("matmul", {{"a", a}, {"b", m2}}, [&] { return matmul(a, m2); });
  run("softmax", {{"x", a}}, [&] { return softmax(a, 1); });
  run("log_softmax", {{"x", a}}, [&] { return log_softmax(a, -1); });
  Var w = Ppos({2, 3, 4});
  run("weighted_softmax", {{"x", a}, {"w", w}}, [&] { return weighted_softmax(a, w); });
  run("finite_softmax", {{"x", a}}, [&] { return finite_softmax(a, 2, 0.7); });
  run("l2_norm", {{"x", az}}, [&] { return l2_norm(az, 1); });

  Var x4 = P({2, 3, 7, 4}), wl = P({5, 3}), bl = P({5});
  run("channel_linear", {{"x", x4}, {"weight", wl}, {"bias", bl}}, [&] { return channel_linear(x4, wl, bl); });
  Var kc = P({2, 3, 3}), bc = P({2});
  run("temporal_conv", {{"x", x4}, {"kernel", kc}, {"bias", bc}}, [&] { return temporal_conv(x4, kc, 2, 1, bc); });
  Var gm = Ppos({3}), bt = P({3});
  const std::vector<double> rm(3, 0.0), rv(3, 1.0);
  run("channel_norm", {{"x", x4}, {"gamma", gm}, {"beta", bt}},
      [&] { return channel_norm(x4, gm, bt, true, rm, rv); });
  Var xd = Var::parameter(detail::distinct_values(rng, {2, 3, 7, 4}));
  run("max_pool_time", {{"x", xd}}, [&] { return max_pool_time(xd, 3); });
  Var topo = P({2, 3, 4, 4});
  run("graph_aggregate", {{"topology", topo}, {"features", x4}}, [&] { return graph_aggregate(topo, x4); });
  return mc;
}

inline ModuleCheck check_intra_gcn(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(seed + 11);
  SkeletonGraph g = graph_from_json(detail::tiny_graph_json());
  GcnBlockParams p(rng, 4, 8, init_adjacency(g), 2, 0.3);
  Var x = Var::parameter(rng.uniform_tensor({2, 4, 6, 5}, -1, 1));
  ParamSet ps;
  p.collect("gcn", ps);
  std::vector<std::pair<std::string, Var>> check{{"input", x}};
  for (const auto& e : ps.params) check.emplace_back(e.name, e.var);
  return {"intra-gcn", check_vjp(check, [&] { return gcn_forward(x, p, true); }, seed + 12, opt)};
}

inline ModuleCheck check_temporal(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(seed + 21);
  MsTemporalParams p(rng, 4, 8, true);
  Var x = Var::parameter(rng.uniform_tensor({2, 4, 9, 3}, -1, 1));
  ParamSet ps;
  p.collect("tcn", ps);
  std::vector<std::pair<std::string, Var>> check{{"input", x}};
  for (const auto& e : ps.params) check.emplace_back(e.name, e.var);
  return {"temporal", check_vjp(check, [&] { return ms_temporal_forward(x, p); }, seed + 22, opt)};
}

inline ModuleCheck check_atnac(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(seed + 31);
  AtnacParams p;
  p.alpha_thresh = Var::parameter(Tensor::scalar(0.3 + 0.4 * rng.uniform()));
  Var x = Var::parameter(rng.uniform_tensor({3, 4, 6, 5}, -1, 1));
  Tensor pad(Shape{3, 6}, 1.0);
  pad.at({1, 5}) = 0.0;
  std::vector<std::pair<std::string, Var>> check{{"input", x}, {"alpha_thresh", p.alpha_thresh}};
  ModuleCheck mc{"atnac", {}};
  for (auto e : check_vjp(check, [&] { return select_nodes(x, &pad, p, true).effective_mask; }, seed + 32, opt)) {
    e.name = "mask/" + e.name;
    mc.entries.push_back(e);
  }
  for (auto e : check_vjp(check, [&] { return select_nodes(x, &pad, p, true).amplitude; }, seed + 33, opt)) {
    e.name = "amplitude/" + e.name;
    mc.entries.push_back(e);
  }
  return mc;
}

inline ModuleCheck check_attention(std::uint64_t seed, const GradCheckOptions& opt) {
  Rng rng(seed + 41);
  EaParams p(rng, 4);
  Var x = Var::parameter(rng.uniform_tensor({2, 4, 3, 2, 5}, -1, 1));
  Var masks = Var::parameter(rng.uniform_tensor({2, 2, 5}, 0.2, 1.0));
  ParamSet ps;
  p.collect("ea", ps);
  std::vector<std::pair<std::string, Var>> check{{"input", x}, {"masks", masks}};
  for (const auto& e : ps.params) check.emplace_back(e.name, e.var);
  return {"attention", check_vjp(check, [&] { return ea_forward(x, masks, p); }, seed + 42, opt)};
}

/// d(L_total)/d(every parameter) of the tiny model (N=5, T=6, B=2, one block, soft masks).
inline ModuleCheck check_model(std::uint64_t seed, const GradCheckOptions& opt) {
  AseaModel m(gradcheck_config(seed));
  Rng rng(seed + 51);
  Batch b;
  b.data = rng.uniform_tensor({2, 3, 6, 2, 5}, -1, 1);
  b.pad_mask = Tensor(Shape{2, 6}, 1.0);
  b.labels = {rng.index(3), rng.index(3)};
  ParamSet ps = m.parameters();
  std::vector<std::pair<std::string, Var>> check;
  for (const auto& p : ps.params) check.emplace_back(p.name, p.var);
  return {"model", check_gradients(check, [&] { return total_loss(m, m.forward(b, true), b.labels).total; }, opt)};
}

inline std::vector<ModuleCheck> run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  return {check_ops(seed, opt),       check_intra_gcn(seed, opt), check_temporal(seed, opt),
          check_atnac(seed, opt),     check_attention(seed, opt), check_model(seed, opt)};
}

inline nlohmann::json gradcheck_to_json(const std::vector<ModuleCheck>& checks, std::uint64_t seed) {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : checks) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
      entries.push_back({{"name", e.name},
                         {"count", e.count},
                         {"max_rel_error", e.max_rel_error},
                         {"worst_index", e.worst_index},
                         {"analytic", e.analytic},
                         {"numeric", e.numeric},
                         {"refined", e.refined},
                         {"passed", e.passed()}});
    }
    mods.push_back({{"module", m.module}, {"max_rel_error", m.max_rel_error()}, {"passed", m.passed()},
                    {"entries", entries}});
  }
  return {{"seed", seed}, {"modules", mods}};
}

}  // namespace asea
