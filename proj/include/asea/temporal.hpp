#pragma once

#include <array>
#include <string>
#include <vector>

#include "asea/layers.hpp"

namespace asea {

struct TemporalBranch {
  Linear reduce;
  std::vector<TemporalConv> convs;  // empty for the reduce-only branch
  bool pool = false;
};

/// Four branches: three (reduce, dilated kernel-5 conv, max-pool) with dilations
/// 1, 2, 3 and one reduce-only branch. Each yields C_out/4 channels.
struct MsTemporalParams {
  std::array<TemporalBranch, 4> branches;
  std::size_t kernel = 5;
  std::size_t pool_window = 3;

  MsTemporalParams() = default;
  MsTemporalParams(Rng& rng, std::size_t cin, std::size_t cout, bool double_tconv = false, std::size_t kernel_size = 5)
      : kernel(kernel_size) {
    if (cout % 4 != 0 || cout == 0) {
      throw ConfigError("multi-scale temporal module needs output channels divisible by 4, got " + std::to_string(cout));
    }
    const std::size_t cb = cout / 4;
    for (std::size_t i = 0; i < 4; ++i) {
      TemporalBranch& br = branches[i];
      br.reduce = Linear(rng, cin, cb);
      if (i < 3) {
        const std::size_t d = i + 1;
        br.convs.emplace_back(rng, cb, cb, kernel, d);
        if (double_tconv) br.convs.emplace_back(rng, cb, cb, kernel, d + 1);
        br.pool = true;
      }
    }
  }

  std::size_t out_channels() const { return 4 * branches[0].reduce.out_channels(); }

  void collect(const std::string& prefix, ParamSet& ps) const {
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string p = prefix + ".branch" + std::to_string(i);
      branches[i].reduce.collect(p + ".reduce", ps);
      for (std::size_t k = 0; k < branches[i].convs.size(); ++k)
        branches[i].convs[k].collect(p + ".tconv" + std::to_string(k), ps);
    }
  }
};

inline Var temporal_branch_forward(const Var& x, const TemporalBranch& br, std::size_t pool_window) {
  Var h = br.reduce(x);
  for (const auto& conv : br.convs) h = conv(relu(h));
  if (br.pool) h = max_pool_time(h, pool_window);
  return h;
}

inline Var ms_temporal_forward(const Var& x, const MsTemporalParams& p) {
  if (x.rank() != 4) throw DimensionError("ms_temporal_forward: expected [B,C,T,N], got " + shape_str(x.shape()));
  std::vector<Var> outs;
  outs.reserve(4);
  for (const auto& br : p.branches) outs.push_back(temporal_branch_forward(x, br, p.pool_window));
  return concat(outs, 1);
}

}  // namespace asea
