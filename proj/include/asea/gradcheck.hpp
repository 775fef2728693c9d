#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "asea/autodiff.hpp"

namespace asea {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error denominators never drop below this magnitude, so
  // gradients that are zero up to rounding compare on an absolute scale.
  double floor = 1e-6;
  // A probe pair that crosses a kink (relu sign flip, argmax change) is
  // repeated at step/4, up to this many times, until both sides share the
  // base point's smooth piece.
  std::size_t max_refinements = 8;
};

struct GradCheckEntry {
  std::string name;
  std::size_t count = 0;       // elements checked
  double max_rel_error = 0.0;  // worst element
  std::size_t worst_index = 0;
  double analytic = 0.0;  // values at the worst element
  double numeric = 0.0;
  std::size_t refined = 0;  // elements whose probes were shrunk off a kink
  bool passed() const;
  double tolerance = 1e-4;
};

inline bool GradCheckEntry::passed() const { return max_rel_error <= tolerance; }

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

/// Central difference of `eval` with respect to `slot`, shrinking the step while
/// either probe leaves the smooth piece identified by `base_signature`.
inline double probe(double& slot, const std::function<double()>& eval, std::uint64_t base_signature,
                    const GradCheckOptions& opt, bool& refined) {
  const double orig = slot;
  double h = opt.step;
  refined = false;
  for (std::size_t attempt = 0;; ++attempt) {
    std::uint64_t sp = 0, sm = 0;
    double fp = 0.0, fm = 0.0;
    {
      BranchTrace trace;
      slot = orig + h;
      fp = eval();
      sp = trace.signature();
    }
    {
      BranchTrace trace;
      slot = orig - h;
      fm = eval();
      sm = trace.signature();
    }
    slot = orig;
    if ((sp == base_signature && sm == base_signature) || attempt == opt.max_refinements) return (fp - fm) / (2.0 * h);
    refined = true;
    h /= 4.0;
  }
}

inline std::uint64_t base_signature(const std::function<double()>& eval) {
  BranchTrace trace;
  eval();
  return trace.signature();
}

inline std::vector<GradCheckEntry> compare(const std::vector<std::pair<std::string, Var>>& params,
                                           const std::vector<Tensor>& analytic, const std::function<double()>& eval,
                                           const GradCheckOptions& opt) {
  const std::uint64_t base = base_signature(eval);
  std::vector<GradCheckEntry> out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& [name, p] = params[k];
    GradCheckEntry e;
    e.name = name;
    e.tolerance = opt.tolerance;
    Tensor& v = p.node()->value;
    e.count = v.size();
    for (std::size_t i = 0; i < v.size(); ++i) {
      bool refined = false;
      const double numeric = probe(v[i], eval, base, opt, refined);
      e.refined += refined;
      const double rel = relative_error(analytic[k][i], numeric, opt.floor);
      if (i == 0 || rel > e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_index = i;
        e.analytic = analytic[k][i];
        e.numeric = numeric;
      }
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace detail

/// Compares reverse-mode gradients of `loss` with central differences for
/// every element of each named parameter. `loss` must rebuild the graph from
/// the parameters' current values on every call.
inline std::vector<GradCheckEntry> check_gradients(const std::vector<std::pair<std::string, Var>>& params,
                                                   const std::function<Var()>& loss,
                                                   const GradCheckOptions& opt = {}) {
  for (const auto& [name, p] : params) p.node()->grad = Tensor();
  {
    Var root = loss();
    backward(root);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) analytic.push_back(p.grad());
  return detail::compare(params, analytic, [&loss] {
    NoGradGuard guard;
    return loss().value().item();
  }, opt);
}

}  // namespace asea
