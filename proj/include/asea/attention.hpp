#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "asea/layers.hpp"

namespace asea {

/// Single-head cross-person attention. Queries, keys and values are 1x1 maps
/// shared by all nodes; a shared output map returns d_v channels to C.
struct EaParams {
  Linear wq, wk, wv;  // C -> d, no bias
  Linear wo;          // d -> C

  EaParams() = default;
  EaParams(Rng& rng, std::size_t channels, std::size_t d = 0) {
    if (d == 0) d = std::max<std::size_t>(channels / 2, 1);
    wq = Linear(rng, channels, d, false);
    wk = Linear(rng, channels, d, false);
    wv = Linear(rng, channels, d, false);
    wo = Linear(rng, d, channels, true);
  }
  std::size_t key_dim() const { return wq.out_channels(); }

  void collect(const std::string& prefix, ParamSet& ps) const {
    wq.collect(prefix + ".wq", ps);
    wk.collect(prefix + ".wk", ps);
    wv.collect(prefix + ".wv", ps);
    wo.collect(prefix + ".wo", ps);
  }
};

/// alpha[m]: [B,T,N,N] with person m's nodes as queries and the other person's
/// as keys, zero on inactive query rows. out[m]: [B,d_v,T,N] before projection.
struct AttentionRecord {
  std::array<Tensor, 2> alpha;
  std::array<Tensor, 2> out;
  Tensor query_mask;  // [B,M,N] hard mask the record was gated with
};

namespace detail {

inline Var person_slice(const Var& x5, std::size_t m) {
  const Shape& s = x5.shape();
  return reshape(slice(x5, 3, m, 1), {s[0], s[1], s[2], s[4]});
}

// [B,d,T,N] -> [B,T,N,d]
inline Var node_major(const Var& x) { return permute(x, {0, 2, 3, 1}); }

}  // namespace detail

/// x [B,C,T,M=2,N], masks [B,M,N] (0/1 or a soft relaxation in (0,1]).
/// Returns x + mask_query * W_o(attention) per person.
inline Var ea_forward(const Var& x, const Var& masks, const EaParams& p, AttentionRecord* record = nullptr) {
  const Shape& xs = x.shape();
  if (xs.size() != 5 || xs[3] != 2) throw DimensionError("ea_forward: expected [B,C,T,2,N], got " + shape_str(xs));
  const std::size_t B = xs[0], T = xs[2], N = xs[4];
  if (masks.shape() != Shape{B, 2, N}) {
    throw DimensionError("ea_forward: masks " + shape_str(masks.shape()) + " vs input " + shape_str(xs));
  }
  const Tensor& mv = masks.value();
  for (std::size_t r = 0; r < 2 * B; ++r) {
    bool any = false;
    for (std::size_t n = 0; n < N; ++n) any |= mv[r * N + n] > 0.0;
    if (!any) {
      throw ContractError("ea_forward: sample " + std::to_string(r / 2) + " person " + std::to_string(r % 2) +
                          " has no active node");
    }
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.key_dim()));
  if (record) {
    record->query_mask = Tensor(Shape{B, 2, N});
    for (std::size_t i = 0; i < mv.size(); ++i) record->query_mask[i] = mv[i] > 0.5 ? 1.0 : 0.0;
  }

  std::array<Var, 2> xp = {detail::person_slice(x, 0), detail::person_slice(x, 1)};
  std::array<Var, 2> mp;
  for (std::size_t m = 0; m < 2; ++m) mp[m] = reshape(slice(masks, 1, m, 1), {B, 1, 1, N});

  std::vector<Var> ys;
  for (std::size_t m = 0; m < 2; ++m) {
    const std::size_t o = 1 - m;
    Var q = detail::node_major(p.wq(xp[m]));                // [B,T,N,d]
    Var kt = permute(p.wk(xp[o]), {0, 2, 1, 3});            // [B,T,d,N]
    Var v = detail::node_major(p.wv(xp[o]));                // [B,T,N,d]
    Var scores = scale(matmul(q, kt), inv_sqrt_d);          // [B,T,N,N]
    Var keys = broadcast_to(mp[o], {B, T, N, N});
    Var alpha = weighted_softmax(scores, keys);
    Var out = permute(matmul(alpha, v), {0, 3, 1, 2});      // [B,d,T,N]
    Var update = mul(p.wo(out), mp[m]);                     // zero at inactive queries
    Var y = add(xp[m], update);
    ys.push_back(reshape(y, {B, xs[1], T, 1, N}));
    if (record) {
      Tensor a = alpha.value();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t i = 0; i < N; ++i) {
            const double g = record->query_mask.at({b, m, i});
            for (std::size_t j = 0; j < N; ++j) a.at({b, t, i, j}) *= g;
          }
      record->alpha[m] = std::move(a);
      record->out[m] = out.value();
    }
  }
  return concat(ys, 3);
}

/// [B,C,T,M,N] -> [B,C,T,N,M].
inline Var concat_persons(const Var& y) {
  if (y.rank() != 5) throw DimensionError("concat_persons: expected [B,C,T,M,N], got " + shape_str(y.shape()));
  return permute(y, {0, 1, 2, 4, 3});
}

/// Attention weights of active queries, one entry per (frame, query, key) with nonzero weight.
inline nlohmann::json attention_to_json(const AttentionRecord& rec, std::size_t sample,
                                        const std::vector<std::string>& joint_names = {}, double min_weight = 0.0) {
  nlohmann::json frames = nlohmann::json::array();
  const std::size_t T = rec.alpha[0].dim(1), N = rec.alpha[0].dim(2);
  for (std::size_t t = 0; t < T; ++t) {
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t i = 0; i < N; ++i) {
        if (rec.query_mask.at({sample, m, i}) < 0.5) continue;
        for (std::size_t j = 0; j < N; ++j) {
          const double w = rec.alpha[m].at({sample, t, i, j});
          if (w <= min_weight) continue;
          nlohmann::json e = {{"query_person", m}, {"query_joint", i}, {"key_joint", j}, {"weight", w}};
          if (!joint_names.empty()) {
            e["query_name"] = joint_names.at(i);
            e["key_name"] = joint_names.at(j);
          }
          entries.push_back(std::move(e));
        }
      }
    frames.push_back({{"frame", t}, {"entries", std::move(entries)}});
  }
  return {{"sample", sample}, {"frames", std::move(frames)}};
}

}  // namespace asea
