#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "asea/layers.hpp"

namespace asea {

enum class MaskMode { Soft, Hard };

struct AtnacParams {
  double gamma = 1.0;       // temperature of the temporal softmax
  double beta_scale = 0.1;  // soft-mask temperature as a fraction of the amplitude spread
  double beta_floor = 1e-6;
  MaskMode training_mask = MaskMode::Soft;
  Var alpha_thresh = Var::parameter(Tensor::scalar(0.5));

  void collect(const std::string& prefix, ParamSet& ps) const { ps.add(prefix + ".alpha_thresh", alpha_thresh, false); }
};

/// Every intermediate of the node selection, one row per (sample, person).
struct NodeSelection {
  Var energy;     // [R,T,N]
  Var variance;   // [R,T], -inf on pad frames
  Var weights;    // [R,T]
  Var amplitude;  // [R,N]
  Var mean, stddev, threshold;  // [R]
  Tensor mask;                  // [R,N] hard 0/1
  Var effective_mask;           // [R,N] mask used downstream: soft relaxation or the hard mask
  std::vector<bool> safeguarded;  // row needed the highest-amplitude fallback

  std::size_t rows() const { return mask.dim(0); }
  std::size_t joints() const { return mask.dim(1); }
  std::vector<std::size_t> active(std::size_t r) const {
    std::vector<std::size_t> idx;
    for (std::size_t n = 0; n < joints(); ++n)
      if (mask.at({r, n}) > 0.5) idx.push_back(n);
    return idx;
  }
};

/// E[r,t,n] = ||x[r,:,t,n]||_2.
inline Var joint_energy(const Var& x) {
  if (x.rank() != 4) throw DimensionError("joint_energy: expected [B,C,T,N], got " + shape_str(x.shape()));
  return l2_norm(x, 1);
}

/// Population variance over joints per frame; pad frames (pad == 0) become -inf.
inline Var frame_variance(const Var& energy, const Tensor* pad = nullptr) {
  if (energy.rank() != 3) throw DimensionError("frame_variance: expected [B,T,N], got " + shape_str(energy.shape()));
  Var mu = mean(energy, {2}, true);
  Var v = mean(square(sub(energy, mu)), {2});
  if (!pad) return v;
  if (pad->shape() != v.shape()) {
    throw DimensionError("frame_variance: pad mask " + shape_str(pad->shape()) + " vs " + shape_str(v.shape()));
  }
  return mask_fill(v, *pad, -std::numeric_limits<double>::infinity());
}

/// softmax(gamma * V) over real frames; pad frames get exactly 0.
inline Var temporal_weights(const Var& variance, double gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw ConfigError("temporal weight temperature gamma must be >= 0, got " + std::to_string(gamma));
  }
  return finite_softmax(variance, 1, gamma);
}

/// S[r,n] = sum_t W[r,t] E[r,t,n].
inline Var node_amplitude(const Var& energy, const Var& weights) {
  if (energy.rank() != 3 || weights.rank() != 2 || weights.dim(0) != energy.dim(0) || weights.dim(1) != energy.dim(1)) {
    throw DimensionError("node_amplitude: energy " + shape_str(energy.shape()) + " vs weights " +
                         shape_str(weights.shape()));
  }
  return sum(mul(energy, reshape(weights, {weights.dim(0), weights.dim(1), 1})), {1});
}

struct Threshold {
  Var mean, stddev, threshold;
};

/// mu, sigma (population) over joints and tau = mu + alpha * sigma.
inline Threshold amplitude_threshold(const Var& amplitude, const Var& alpha_thresh) {
  const std::size_t R = amplitude.dim(0), N = amplitude.dim(1);
  Var mu = mean(amplitude, {1});
  Var sigma = scale(l2_norm(sub(amplitude, reshape(mu, {R, 1})), 1), 1.0 / std::sqrt(static_cast<double>(N)));
  Var tau = add(mu, mul(alpha_thresh, sigma));
  return {mu, sigma, tau};
}

/// Strict S > tau, falling back to the highest-amplitude joint (lowest index on ties).
inline Tensor hard_mask(const Tensor& amplitude, const Tensor& tau, std::vector<bool>* safeguarded = nullptr) {
  const std::size_t R = amplitude.dim(0), N = amplitude.dim(1);
  Tensor m(Shape{R, N});
  if (safeguarded) safeguarded->assign(R, false);
  for (std::size_t r = 0; r < R; ++r) {
    std::size_t count = 0, best = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const double s = amplitude.at({r, n});
      if (s > tau[r]) {
        m.at({r, n}) = 1.0;
        ++count;
      }
      if (s > amplitude.at({r, best})) best = n;
    }
    if (count == 0) {
      m.at({r, best}) = 1.0;
      if (safeguarded) (*safeguarded)[r] = true;
    }
  }
  if (tracing_branches())
    for (double v : m.data()) note_branch(v > 0.0);
  return m;
}

/// sigmoid((S - tau) / beta) with a per-row beta [R].
inline Var soft_mask(const Var& amplitude, const Var& tau, const Var& beta) {
  const std::size_t R = amplitude.dim(0);
  if (beta.shape() != Shape{R}) throw DimensionError("soft_mask: beta must be [" + std::to_string(R) + "]");
  for (double b : beta.value().data())
    if (!(b > 0.0)) throw ConfigError("soft mask temperature must be positive");
  return sigmoid(div(sub(amplitude, reshape(tau, {R, 1})), reshape(beta, {R, 1})));
}

inline Var soft_mask(const Var& amplitude, const Var& tau, double beta) {
  return soft_mask(amplitude, tau, Var::constant(Tensor(Shape{amplitude.dim(0)}, beta)));
}

/// beta = beta_scale * sigma, replaced by the constant floor where it would fall below it.
inline Var soft_temperature(const Var& stddev, double beta_scale, double floor) {
  Var beta = scale(stddev, beta_scale);
  Tensor keep(stddev.shape(), 1.0);
  bool clipped = false;
  for (std::size_t r = 0; r < keep.size(); ++r)
    if (!(beta.value()[r] >= floor)) {
      keep[r] = 0.0;
      clipped = true;
    }
  return clipped ? mask_fill(beta, keep, floor) : beta;
}

/// Full selection from an energy map E[R,T,N].
inline NodeSelection select_from_energy(const Var& energy, const Tensor* pad, const AtnacParams& p, bool training) {
  NodeSelection s;
  s.energy = energy;
  s.variance = frame_variance(energy, pad);
  s.weights = temporal_weights(s.variance, p.gamma);
  s.amplitude = node_amplitude(energy, s.weights);
  Threshold th = amplitude_threshold(s.amplitude, p.alpha_thresh);
  s.mean = th.mean;
  s.stddev = th.stddev;
  s.threshold = th.threshold;
  s.mask = hard_mask(s.amplitude.value(), s.threshold.value(), &s.safeguarded);
  if (training && p.training_mask == MaskMode::Soft) {
    const std::size_t R = s.rows(), N = s.joints();
    Var soft = soft_mask(s.amplitude, s.threshold, soft_temperature(s.stddev, p.beta_scale, p.beta_floor));
    // The safeguarded joint stays fully active in the relaxation as well.
    Tensor keep(Shape{R, N}, 1.0);
    bool any = false;
    for (std::size_t r = 0; r < R; ++r) {
      if (!s.safeguarded[r]) continue;
      for (std::size_t n = 0; n < N; ++n)
        if (s.mask.at({r, n}) > 0.5) keep.at({r, n}) = 0.0;
      any = true;
    }
    s.effective_mask = any ? mask_fill(soft, keep, 1.0) : soft;
  } else {
    s.effective_mask = Var::constant(s.mask);
  }
  return s;
}

/// Node selection on encoder features x[R,C,T,N].
inline NodeSelection select_nodes(const Var& x, const Tensor* pad, const AtnacParams& p, bool training) {
  return select_from_energy(joint_energy(x), pad, p, training);
}

/// Frame-to-frame joint speeds of raw coordinates [R,3,T,N] -> [R,T-1,N].
inline Var joint_speeds(const Tensor& coords) {
  if (coords.rank() != 4 || coords.dim(1) != 3) {
    throw DimensionError("joint_speeds: expected [B,3,T,N], got " + shape_str(coords.shape()));
  }
  const std::size_t T = coords.dim(2);
  if (T < 2) throw LengthError("velocity amplitudes need at least 2 frames, got " + std::to_string(T));
  Var c = Var::constant(coords);
  return l2_norm(sub(slice(c, 2, 1, T - 1), slice(c, 2, 0, T - 1)), 1);
}

/// A speed sample is real only when both of its frames are.
inline Tensor speed_pad(const Tensor& pad) {
  const std::size_t R = pad.dim(0), T = pad.dim(1);
  Tensor out(Shape{R, T - 1});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t t = 0; t + 1 < T; ++t) out.at({r, t}) = pad.at({r, t}) * pad.at({r, t + 1});
  return out;
}

/// Velocity strategy: the selection pipeline applied to joint speeds.
inline NodeSelection select_by_velocity(const Tensor& coords, const Tensor* pad, const AtnacParams& p, bool training) {
  Var e = joint_speeds(coords);
  if (!pad) return select_from_energy(e, nullptr, p, training);
  Tensor sp = speed_pad(*pad);
  return select_from_energy(e, &sp, p, training);
}

inline Var velocity_amplitude(const Tensor& coords, const Tensor* pad = nullptr, double gamma = 1.0) {
  Var e = joint_speeds(coords);
  Tensor sp;
  if (pad) sp = speed_pad(*pad);
  return node_amplitude(e, temporal_weights(frame_variance(e, pad ? &sp : nullptr), gamma));
}

/// All-active selection used when node selection is disabled.
inline NodeSelection select_all(std::size_t rows, std::size_t joints) {
  NodeSelection s;
  s.mask = Tensor(Shape{rows, joints}, 1.0);
  s.effective_mask = Var::constant(s.mask);
  s.safeguarded.assign(rows, false);
  return s;
}

/// Rows are (sample, person) pairs, person-minor.
inline nlohmann::json selection_to_json(const NodeSelection& s, std::size_t persons,
                                        const std::vector<std::string>& joint_names = {},
                                        const std::vector<std::size_t>& sample_ids = {}) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t r = 0; r < s.rows(); ++r) {
    const std::size_t sample = r / persons;
    nlohmann::json e;
    e["sample"] = sample_ids.empty() ? sample : sample_ids.at(sample);
    e["person"] = r % persons;
    if (s.amplitude.defined()) {
      std::vector<double> amp(s.joints());
      for (std::size_t n = 0; n < s.joints(); ++n) amp[n] = s.amplitude.value().at({r, n});
      e["amplitude"] = amp;
      e["threshold"] = s.threshold.value()[r];
      e["mean"] = s.mean.value()[r];
      e["std"] = s.stddev.value()[r];
    }
    e["active"] = s.active(r);
    if (!joint_names.empty()) {
      std::vector<std::string> names;
      for (auto n : s.active(r)) names.push_back(joint_names.at(n));
      e["active_names"] = names;
    }
    e["safeguard"] = static_cast<bool>(s.safeguarded[r]);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace asea
