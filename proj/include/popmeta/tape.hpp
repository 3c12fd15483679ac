#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "popmeta/kernels.hpp"
#include "popmeta/tensor.hpp"

namespace popmeta::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives and
/// has not been cleared.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  const Tensor& value() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kAddRow,
  kScale,
  kAddScalar,
  kTanh,
  kSigmoid,
  kExp,
  kLogSoftmax,
  kSumAll,
  kSumRows,
  kSumCols,
  kBroadcastScalar,
  kBroadcastRows,
  kBroadcastCols,
  kSliceCols,
  kPadCols,
  kConcatCols,
  kGatherRows,
  kScatterRows,
  kPick,
  kScatterPick,
  kReshape,
};

const char* op_name(Op op);

using Indices = std::shared_ptr<const std::vector<std::size_t>>;

/// Append-only record of primitive operations. Nodes are stored in creation
/// order, which is a topological order. Gradients are themselves built from
/// the same primitives, so a backward pass run with create_graph=true leaves
/// a differentiable record behind and can be differentiated again.
class Tape {
public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
  /// Inputs that `output` does not depend on get a zero tensor. With
  /// create_graph the returned Vars are differentiable functions of the
  /// tape's leaves.
  std::vector<Var> gradients(Var output, std::span<const Var> wrt, bool create_graph = false);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  const Tensor& value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(std::int32_t id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  Op op(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].op; }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  // Used by the primitive implementations.
  struct Node {
    Tensor value;
    Op op = Op::kLeaf;
    bool requires_grad = false;
    std::int32_t in0 = -1;
    std::int32_t in1 = -1;
    double scalar = 0.0;
    std::size_t a = 0;
    std::size_t b = 0;
    kernels::Trans trans = kernels::Trans::kNone;
    Indices idx;
  };
  Var push(Node node);
  const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }

private:
  void backprop_node(std::int32_t id, Var g, std::vector<std::int32_t>& grads);

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

/// Disables gradient recording on a tape for the guard's lifetime.
class NoGradGuard {
public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.grad_enabled()) {
    tape_.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape_.set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  Tape& tape_;
  bool prev_;
};

// Primitives. Shape errors throw std::invalid_argument naming the primitive.
Var matmul(Var a, Var b, kernels::Trans trans = kernels::Trans::kNone);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var x, Var row);  // x (n x m) + row (1 x m) broadcast over rows
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var tanh(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var log_softmax(Var x);  // row-wise
Var softmax(Var x);      // row-wise, exp(log_softmax(x))
Var sum(Var x);          // all elements -> 1x1
Var mean(Var x);
Var sum_rows(Var x);  // n x m -> 1 x m
Var sum_cols(Var x);  // n x m -> n x 1
Var broadcast_scalar(Var x, std::size_t rows, std::size_t cols);
Var broadcast_rows(Var x, std::size_t rows);  // 1 x m -> rows x m
Var broadcast_cols(Var x, std::size_t cols);  // n x 1 -> n x cols
Var slice_cols(Var x, std::size_t start, std::size_t len);
Var pad_cols(Var x, std::size_t start, std::size_t total);
Var concat_cols(Var a, Var b);
Var gather_rows(Var table, Indices idx);  // embedding lookup
Var scatter_rows(Var x, Indices idx, std::size_t rows);
Var pick(Var x, Indices idx);  // out[i] = x[i, idx[i]], n x 1
Var scatter_pick(Var x, Indices idx, std::size_t cols);
Var reshape(Var x, std::size_t rows, std::size_t cols);

inline Indices make_indices(std::vector<std::size_t> v) {
  return std::make_shared<const std::vector<std::size_t>>(std::move(v));
}

}  // namespace popmeta::ad
