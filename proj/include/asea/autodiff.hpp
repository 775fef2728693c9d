#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "asea/tensor.hpp"

namespace asea {

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  Relu,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  Square,
  Sum,
  BroadcastTo,
  Reshape,
  Permute,
  Slice,
  Concat,
  MaskFill,
  Matmul,
  Softmax,
  LogSoftmax,
  WeightedSoftmax,
  FiniteSoftmax,
  L2Norm,
  ChannelLinear,
  TemporalConv,
  ChannelNorm,
  MaxPoolTime,
  GraphAggregate,
};

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Square: return "square";
    case Op::Sum: return "sum";
    case Op::BroadcastTo: return "broadcast_to";
    case Op::Reshape: return "reshape";
    case Op::Permute: return "permute";
    case Op::Slice: return "slice";
    case Op::Concat: return "concat";
    case Op::MaskFill: return "mask_fill";
    case Op::Matmul: return "matmul";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::WeightedSoftmax: return "weighted_softmax";
    case Op::FiniteSoftmax: return "finite_softmax";
    case Op::L2Norm: return "l2_norm";
    case Op::ChannelLinear: return "channel_linear";
    case Op::TemporalConv: return "temporal_conv";
    case Op::ChannelNorm: return "channel_norm";
    case Op::MaxPoolTime: return "max_pool_time";
    case Op::GraphAggregate: return "graph_aggregate";
  }
  return "unknown";
}

struct Node {
  Op op = Op::Leaf;
  Tensor value;
  Tensor grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
  bool has_grad() const { return grad.size() != 0 && grad.shape() == value.shape(); }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline std::optional<Op>& corrupted_op_slot() {
  static std::optional<Op> slot;
  return slot;
}
inline std::uint64_t*& branch_trace_slot() {
  thread_local std::uint64_t* slot = nullptr;
  return slot;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Test hook: scales the adjoint entering every node of `op` by 1.5 during backward.
inline void set_corrupted_backward(std::optional<Op> op) { detail::corrupted_op_slot() = op; }
inline std::optional<Op> corrupted_backward() { return detail::corrupted_op_slot(); }

inline bool tracing_branches() { return detail::branch_trace_slot() != nullptr; }

/// Folds one discrete choice (active side of a kink, argmax) into the current branch trace.
inline void note_branch(std::uint64_t choice) {
  if (std::uint64_t* s = detail::branch_trace_slot()) *s = (*s ^ (choice + 0x9e3779b97f4a7c15ull)) * 0x100000001b3ull;
}

/// Records a signature of every piecewise choice made by forward passes on this
/// thread while alive. Two evaluations with equal signatures lie on the same smooth piece.
class BranchTrace {
 public:
  BranchTrace() : prev_(detail::branch_trace_slot()) { detail::branch_trace_slot() = &signature_; }
  ~BranchTrace() { detail::branch_trace_slot() = prev_; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  std::uint64_t signature() const { return signature_; }

 private:
  std::uint64_t signature_ = 0xcbf29ce484222325ull;
  std::uint64_t* prev_;
};

/// Handle to a node in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor t) { return Var(std::move(t), false); }
  static Var parameter(Tensor t) { return Var(std::move(t), true); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t a) const { return node_->value.dim(a); }
  std::size_t rank() const { return node_->value.rank(); }
  bool requires_grad() const { return node_->requires_grad; }
  Op op() const { return node_->op; }

  /// Adjoint after backward(); zeros when nothing reached this node.
  Tensor grad() const { return node_->has_grad() ? node_->grad : Tensor(node_->value.shape(), 0.0); }
  void zero_grad() { node_->grad = Tensor(); }

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a result node; the backward closure is kept only when some input needs gradients.
inline Var make_result(Op op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->value = std::move(value);
  bool any = false;
  if (grad_enabled()) {
    for (const Var& v : inputs) any = any || v.requires_grad();
  }
  node->requires_grad = any;
  if (any) {
    node->inputs.reserve(inputs.size());
    for (const Var& v : inputs) node->inputs.push_back(v.shared());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

/// Accumulates into the adjoint of input `i` only if it participates in differentiation.
inline Tensor* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

/// Reverse-mode sweep seeded with the adjoint `seed` of `root` (a
/// vector-Jacobian product); every reachable node with requires_grad ends up
/// with its adjoint in `grad`.
inline void backward(const Var& root, const Tensor& seed) {
  if (!root.defined()) throw ContractError("backward on undefined variable");
  if (seed.shape() != root.shape()) {
    throw ContractError("backward seed " + shape_str(seed.shape()) + " does not match root " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  Tensor& g0 = root.node()->grad_buffer();
  for (std::size_t i = 0; i < g0.size(); ++i) g0[i] += seed[i];
  const auto corrupted = corrupted_backward();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (!n.backward || !n.has_grad()) continue;
    if (corrupted && *corrupted == n.op) {
      for (double& g : n.grad.storage()) g *= 1.5;
    }
    n.backward(n);
  }
}

/// Reverse-mode sweep from a scalar root.
inline void backward(const Var& root) {
  if (!root.defined()) throw ContractError("backward on undefined variable");
  if (root.value().size() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  }
  backward(root, Tensor(root.shape(), 1.0));
}

}  // namespace asea
