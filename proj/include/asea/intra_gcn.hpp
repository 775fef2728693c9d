#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "asea/graph.hpp"
#include "asea/layers.hpp"
#include "asea/temporal.hpp"

namespace asea {

/// Spatial half of an encoder block. Topologies are stored channel-first:
/// Q and R are [B, C', N, N].
struct GcnBlockParams {
  Linear psi, phi;  // C -> C_r
  Linear delta;     // C_r -> C'
  Linear feat;      // C -> C'
  ChannelNorm norm;
  Var adjacency;     // [N, N], learnable
  Var alpha_refine;  // scalar

  GcnBlockParams() = default;
  GcnBlockParams(Rng& rng, std::size_t cin, std::size_t cout, const Tensor& a0, std::size_t reduction = 2,
                 double alpha0 = 0.1) {
    if (reduction == 0) throw ConfigError("reduction ratio must be positive");
    const std::size_t cr = std::max<std::size_t>(cin / reduction, 1);
    psi = Linear(rng, cin, cr);
    phi = Linear(rng, cin, cr);
    delta = Linear(rng, cr, cout);
    feat = Linear(rng, cin, cout);
    norm = ChannelNorm(cout);
    adjacency = Var::parameter(a0);
    alpha_refine = Var::parameter(Tensor::scalar(alpha0));
  }

  std::size_t reduced_channels() const { return psi.out_channels(); }

  void collect(const std::string& prefix, ParamSet& ps) {
    psi.collect(prefix + ".psi", ps);
    phi.collect(prefix + ".phi", ps);
    delta.collect(prefix + ".delta", ps);
    feat.collect(prefix + ".feat", ps);
    norm.collect(prefix + ".norm", ps);
    ps.add(prefix + ".adjacency", adjacency);
    ps.add(prefix + ".alpha_refine", alpha_refine, false);
  }
};

/// Q[b,c,i,j] = delta(tanh(psi(xbar_i) - phi(xbar_j)))_c with xbar the temporal mean.
inline Var channel_correlation(const Var& x, const GcnBlockParams& p) {
  if (x.rank() != 4) throw DimensionError("channel_correlation: expected [B,C,T,N], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), N = x.dim(3);
  Var xbar = mean(x, {2});  // [B,C,N]
  Var a = p.psi(xbar);      // [B,Cr,N]
  Var b = p.phi(xbar);
  const std::size_t cr = a.dim(1);
  Var diff = sub(reshape(a, {B, cr, N, 1}), reshape(b, {B, cr, 1, N}));  // [B,Cr,N,N]
  return p.delta(asea::tanh(diff));
}

/// R = A + alpha * Q, A broadcast over batch and channels.
inline Var refine_topology(const Var& adjacency, const Var& q, const Var& alpha_refine) {
  if (adjacency.rank() != 2 || q.rank() != 4 || q.dim(2) != adjacency.dim(0) || q.dim(3) != adjacency.dim(1)) {
    throw DimensionError("refine_topology: adjacency " + shape_str(adjacency.shape()) + " vs Q " + shape_str(q.shape()));
  }
  return add(adjacency, mul(alpha_refine, q));
}

/// relu(norm(sum_j R[b,c,i,j] * W_feat(x)[b,c,t,j])).
inline Var spatial_aggregate(const Var& x, const Var& r, GcnBlockParams& p, bool training) {
  return relu(p.norm(graph_aggregate(r, p.feat(x)), training));
}

inline Var gcn_forward(const Var& x, GcnBlockParams& p, bool training) {
  Var q = channel_correlation(x, p);
  return spatial_aggregate(x, refine_topology(p.adjacency, q, p.alpha_refine), p, training);
}

struct EncoderBlock {
  GcnBlockParams gcn;
  MsTemporalParams tcn;
  std::optional<Linear> residual;  // 1x1 projection when channel counts differ

  void collect(const std::string& prefix, ParamSet& ps) {
    gcn.collect(prefix + ".gcn", ps);
    tcn.collect(prefix + ".tcn", ps);
    if (residual) residual->collect(prefix + ".residual", ps);
  }
};

struct EncoderConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths = {16, 16, 32, 32};
  std::size_t reduction = 2;
  bool double_tconv = false;
  double alpha_refine_init = 0.1;
};

inline std::vector<EncoderBlock> make_encoder(Rng& rng, const EncoderConfig& cfg, const Tensor& a0) {
  if (cfg.widths.empty()) throw ConfigError("encoder needs at least one block");
  std::vector<EncoderBlock> blocks;
  std::size_t cin = cfg.in_channels;
  for (std::size_t w : cfg.widths) {
    EncoderBlock b;
    b.gcn = GcnBlockParams(rng, cin, w, a0, cfg.reduction, cfg.alpha_refine_init);
    b.tcn = MsTemporalParams(rng, w, w, cfg.double_tconv);
    if (cin != w) b.residual = Linear(rng, cin, w);
    blocks.push_back(std::move(b));
    cin = w;
  }
  return blocks;
}

/// relu(tcn(gcn(x)) + residual(x)).
inline Var encoder_block_forward(const Var& x, EncoderBlock& blk, bool training) {
  Var h = ms_temporal_forward(gcn_forward(x, blk.gcn, training), blk.tcn);
  Var skip = blk.residual ? (*blk.residual)(x) : x;
  return relu(add(h, skip));
}

/// Blocks applied in sequence. Persons share weights: callers stack them on the batch axis.
inline Var encoder_forward(const Var& x, std::vector<EncoderBlock>& blocks, bool training) {
  Var h = x;
  for (auto& b : blocks) h = encoder_block_forward(h, b, training);
  return h;
}

}  // namespace asea
