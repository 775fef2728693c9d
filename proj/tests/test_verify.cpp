#include <algorithm>

#include "asea/verify.hpp"
#include "test_util.hpp"

using namespace asea;

namespace {

struct CorruptionScope {
  explicit CorruptionScope(Op op) { set_corrupted_backward(op); }
  ~CorruptionScope() { set_corrupted_backward(std::nullopt); }
};

bool names(const std::vector<ModuleCheck>& checks, const std::string& entry) {
  for (const auto& m : checks)
    for (const auto& f : m.failing())
      if (f == entry || f.rfind(entry + "/", 0) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("gradcheck suite passes for five seeds") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto checks = run_gradcheck_suite(seed);
    REQUIRE(checks.size() == 6);
    for (const auto& m : checks) {
      INFO("seed " << seed << " module " << m.module << " max rel " << m.max_rel_error());
      CHECK(m.passed());
      CHECK(m.max_rel_error() <= 1e-4);
    }
  }
}

TEST_CASE("every differentiable op has an isolated check") {
  const auto ops = check_ops(1, {});
  for (int o = 0; o <= static_cast<int>(Op::GraphAggregate); ++o) {
    const std::string n(op_name(static_cast<Op>(o)));
    if (n == "leaf") continue;
    const bool found = std::any_of(ops.entries.begin(), ops.entries.end(), [&](const GradCheckEntry& e) {
      return e.name == "op:" + n || e.name.rfind("op:" + n + "/", 0) == 0;
    });
    INFO(n);
    CHECK(found);
  }
}

TEST_CASE("corrupted backward is reported under the op's name") {
  for (Op op : {Op::Softmax, Op::TemporalConv, Op::GraphAggregate, Op::Relu}) {
    CorruptionScope scope(op);
    const auto checks = run_gradcheck_suite(1);
    INFO(op_name(op));
    CHECK(names(checks, "op:" + std::string(op_name(op))));
    for (const auto& e : checks.front().entries) {
      const bool own = e.name == "op:" + std::string(op_name(op)) || e.name.rfind("op:" + std::string(op_name(op)) + "/", 0) == 0;
      if (!own) CHECK(e.passed());
    }
  }
}

TEST_CASE("kink-crossing probes are shrunk onto the base piece") {
  Var x = Var::parameter(Tensor(Shape{3}, std::vector<double>{2e-6, -0.5, 0.7}));
  auto f = [&] { return sum(relu(x), {0}); };
  GradCheckOptions plain;
  plain.max_refinements = 0;
  const auto raw = check_gradients({{"x", x}}, f, plain);
  CHECK_FALSE(raw[0].passed());
  const auto fixed = check_gradients({{"x", x}}, f);
  CHECK(fixed[0].passed());
  CHECK(fixed[0].refined == 1);
}

TEST_CASE("branch traces differ exactly when a kink side changes") {
  auto sig = [](double v) {
    Var x(Tensor(Shape{1}, std::vector<double>{v}));
    BranchTrace t;
    relu(x);
    return t.signature();
  };
  CHECK(sig(0.1) == sig(0.2));
  CHECK(sig(0.1) != sig(-0.1));
  CHECK_FALSE(tracing_branches());
}

TEST_CASE("gradcheck JSON lists every module") {
  const auto j = gradcheck_to_json(run_gradcheck_suite(2), 2);
  CHECK(j["seed"] == 2);
  REQUIRE(j["modules"].size() == 6);
  for (const auto& m : j["modules"]) CHECK(m["passed"] == true);
}
