#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <string>

#include "asea/gradcheck.hpp"
#include "asea/ops.hpp"
#include "asea/rng.hpp"

namespace asea::test {

inline void require_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    INFO("element " << i << ": " << a[i] << " vs " << b[i]);
    REQUIRE(std::abs(a[i] - b[i]) <= tol);
  }
}

inline void require_gradients_match(const std::vector<std::pair<std::string, Var>>& params,
                                    const std::function<Var()>& loss, double tol = 1e-4) {
  GradCheckOptions opt;
  opt.tolerance = tol;
  for (const auto& e : check_gradients(params, loss, opt)) {
    INFO(e.name << " worst element " << e.worst_index << ": analytic " << e.analytic << " numeric " << e.numeric
                << " rel " << e.max_rel_error);
    CHECK(e.passed());
  }
}

// Copy of a result's elements; safe to iterate when the Var is a temporary.
inline std::vector<double> values(const Var& v) { return v.value().storage(); }

// Scalar reduction that weights every element differently, so gradient checks
// see a non-uniform upstream adjoint.
inline Var weighted_sum(const Var& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Var w = Var::constant(rng.uniform_tensor(y.shape(), -1.0, 1.0));
  return sum_all(mul(y, w));
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("asea_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace asea::test
