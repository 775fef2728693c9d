#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "asea/nn_ops.hpp"
#include "asea/rng.hpp"

namespace asea {

struct NamedParam {
  std::string name;
  Var var;
  bool decay = true;  // subject to L2 weight decay
};

struct NamedBuffer {
  std::string name;
  std::vector<double>* data;
};

/// Flat view of every trainable tensor and non-trainable buffer of a model.
struct ParamSet {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;

  void add(std::string name, const Var& v, bool decay = true) { params.push_back({std::move(name), v, decay}); }
  void add_buffer(std::string name, std::vector<double>& b) { buffers.push_back({std::move(name), &b}); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.var.value().size();
    return n;
  }
  const NamedParam* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
  void zero_grad() {
    for (auto& p : params) p.var.zero_grad();
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor fan_in_uniform(Rng& rng, const Shape& shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor(shape, -bound, bound);
}

/// 1x1 map over the channel axis.
struct Linear {
  Var weight;
  std::optional<Var> bias;

  Linear() = default;
  Linear(Rng& rng, std::size_t cin, std::size_t cout, bool with_bias = true)
      : weight(Var::parameter(fan_in_uniform(rng, {cout, cin}, cin))) {
    if (with_bias) bias = Var::parameter(fan_in_uniform(rng, {cout}, cin));
  }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  Var operator()(const Var& x) const { return channel_linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamSet& ps) const {
    ps.add(prefix + ".weight", weight);
    if (bias) ps.add(prefix + ".bias", *bias);
  }
};

struct TemporalConv {
  Var weight;  // [Cout, Cin, K]
  std::optional<Var> bias;
  std::size_t dilation = 1;

  TemporalConv() = default;
  TemporalConv(Rng& rng, std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t dil, bool with_bias = true)
      : weight(Var::parameter(fan_in_uniform(rng, {cout, cin, kernel}, cin * kernel))), dilation(dil) {
    if (with_bias) bias = Var::parameter(fan_in_uniform(rng, {cout}, cin * kernel));
  }
  Var operator()(const Var& x) const { return temporal_conv(x, weight, dilation, 1, bias); }
  void collect(const std::string& prefix, ParamSet& ps) const {
    ps.add(prefix + ".weight", weight);
    if (bias) ps.add(prefix + ".bias", *bias);
  }
};

/// Per-channel normalization with running statistics for inference.
struct ChannelNorm {
  Var gamma, beta;
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  ChannelNorm() = default;
  explicit ChannelNorm(std::size_t channels)
      : gamma(Var::parameter(Tensor(Shape{channels}, 1.0))),
        beta(Var::parameter(Tensor(Shape{channels}, 0.0))),
        running_mean(channels, 0.0),
        running_var(channels, 1.0) {}

  /// Training mode normalizes with batch statistics and folds them into the
  /// running averages (unbiased variance), except under NoGradGuard.
  Var operator()(const Var& x, bool training) {
    ChannelStats stats;
    Var y = channel_norm(x, gamma, beta, training, running_mean, running_var, eps, training ? &stats : nullptr);
    if (training && grad_enabled()) {
      const double n = static_cast<double>(stats.count);
      const double unbias = n > 1 ? n / (n - 1) : 1.0;
      for (std::size_t c = 0; c < running_mean.size(); ++c) {
        running_mean[c] = (1 - momentum) * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = (1 - momentum) * running_var[c] + momentum * stats.var[c] * unbias;
      }
    }
    return y;
  }
  void collect(const std::string& prefix, ParamSet& ps) {
    ps.add(prefix + ".gamma", gamma, false);
    ps.add(prefix + ".beta", beta, false);
    ps.add_buffer(prefix + ".running_mean", running_mean);
    ps.add_buffer(prefix + ".running_var", running_var);
  }
};

}  // namespace asea
