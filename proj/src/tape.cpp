#include "popmeta/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace popmeta::ad {

#if defined(__GLIBC__)
namespace {
// Tape tensors are a few hundred KB and die young. With glibc's default
// dynamic mmap threshold each one is mapped and unmapped, which costs more
// than the arithmetic.
const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
}  // namespace
#endif

using kernels::Trans;

const Tensor& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAddRow: return "add_row";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kSumAll: return "sum";
    case Op::kSumRows: return "sum_rows";
    case Op::kSumCols: return "sum_cols";
    case Op::kBroadcastScalar: return "broadcast_scalar";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kBroadcastCols: return "broadcast_cols";
    case Op::kSliceCols: return "slice_cols";
    case Op::kPadCols: return "pad_cols";
    case Op::kConcatCols: return "concat_cols";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kPick: return "pick";
    case Op::kScatterPick: return "scatter_pick";
    case Op::kReshape: return "reshape";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op_name(op)) + ": incompatible shapes " + a.shape_str() +
                              " and " + b.shape_str());
}

[[noreturn]] void shape_error(Op op, const Tensor& a, const std::string& what) {
  throw std::invalid_argument(std::string(op_name(op)) + ": input " + a.shape_str() + " " + what);
}

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw std::invalid_argument("operands live on different tapes");
  }
  return *a.tape;
}

Tape::Node unary(Op op, Var x, Tensor value) {
  Tape::Node n;
  n.value = std::move(value);
  n.op = op;
  n.in0 = x.id;
  n.requires_grad = x.requires_grad();
  return n;
}

Tape::Node binary(Op op, Var x, Var y, Tensor value) {
  Tape::Node n;
  n.value = std::move(value);
  n.op = op;
  n.in0 = x.id;
  n.in1 = y.id;
  n.requires_grad = x.requires_grad() || y.requires_grad();
  return n;
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.op = Op::kLeaf;
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::push(Node node) {
#ifndef NDEBUG
  for (double v : node.value.data()) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by ") + op_name(node.op));
    }
  }
#endif
  if (!grad_enabled_) {
    node.requires_grad = false;
  }
  if (!node.requires_grad) {
    node.in0 = node.in1 = -1;
    node.idx.reset();
  }
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

// ---------------------------------------------------------------------------
// Forward primitives

Var matmul(Var a, Var b, Trans trans) {
  Tape& t = same_tape(a, b);
  auto n = binary(Op::kMatMul, a, b, kernels::gemm(a.value(), b.value(), trans));
  n.trans = trans;
  return t.push(std::move(n));
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) shape_error(Op::kAdd, x, y);
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return t.push(binary(Op::kAdd, a, b, std::move(out)));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) shape_error(Op::kSub, x, y);
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return t.push(binary(Op::kSub, a, b, std::move(out)));
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) shape_error(Op::kMul, x, y);
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return t.push(binary(Op::kMul, a, b, std::move(out)));
}

Var add_row(Var a, Var r) {
  Tape& t = same_tape(a, r);
  const Tensor& x = a.value();
  const Tensor& row = r.value();
  if (row.rows() != 1 || row.cols() != x.cols()) shape_error(Op::kAddRow, x, row);
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) + row[j];
  }
  return t.push(binary(Op::kAddRow, a, r, std::move(out)));
}

Var scale(Var a, double c) {
  auto n = unary(Op::kScale, a, map(a.value(), [c](double v) { return v * c; }));
  n.scalar = c;
  return a.tape->push(std::move(n));
}

Var add_scalar(Var a, double c) {
  auto n = unary(Op::kAddScalar, a, map(a.value(), [c](double v) { return v + c; }));
  n.scalar = c;
  return a.tape->push(std::move(n));
}

Var tanh(Var a) {
  return a.tape->push(unary(Op::kTanh, a, map(a.value(), [](double v) { return std::tanh(v); })));
}

Var sigmoid(Var a) {
  auto f = [](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  return a.tape->push(unary(Op::kSigmoid, a, map(a.value(), f)));
}

Var exp(Var a) {
  return a.tape->push(unary(Op::kExp, a, map(a.value(), [](double v) { return std::exp(v); })));
}

Var log_softmax(Var a) {
  const Tensor& x = a.value();
  if (x.cols() == 0) shape_error(Op::kLogSoftmax, x, "has no columns");
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* r = x.row(i);
    const double mx = *std::max_element(r, r + x.cols());
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += std::exp(r[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = r[j] - lse;
  }
  return a.tape->push(unary(Op::kLogSoftmax, a, std::move(out)));
}

Var softmax(Var a) { return exp(log_softmax(a)); }

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->push(unary(Op::kSumAll, a, Tensor::scalar(s)));
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) shape_error(Op::kSumAll, a.value(), "is empty");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(Var a) {
  const Tensor& x = a.value();
  Tensor out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  }
  return a.tape->push(unary(Op::kSumRows, a, std::move(out)));
}

Var sum_cols(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j);
    out[i] = s;
  }
  return a.tape->push(unary(Op::kSumCols, a, std::move(out)));
}

Var broadcast_scalar(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& x = a.value();
  if (x.size() != 1) shape_error(Op::kBroadcastScalar, x, "is not a scalar");
  return a.tape->push(unary(Op::kBroadcastScalar, a, Tensor(rows, cols, x[0])));
}

Var broadcast_rows(Var a, std::size_t rows) {
  const Tensor& x = a.value();
  if (x.rows() != 1) shape_error(Op::kBroadcastRows, x, "is not a row vector");
  Tensor out(rows, x.cols());
  for (std::size_t i = 0; i < rows; ++i) std::copy(x.row(0), x.row(0) + x.cols(), out.row(i));
  return a.tape->push(unary(Op::kBroadcastRows, a, std::move(out)));
}

Var broadcast_cols(Var a, std::size_t cols) {
  const Tensor& x = a.value();
  if (x.cols() != 1) shape_error(Op::kBroadcastCols, x, "is not a column vector");
  Tensor out(x.rows(), cols);
  for (std::size_t i = 0; i < x.rows(); ++i) std::fill(out.row(i), out.row(i) + cols, x[i]);
  return a.tape->push(unary(Op::kBroadcastCols, a, std::move(out)));
}

Var slice_cols(Var a, std::size_t start, std::size_t len) {
  const Tensor& x = a.value();
  if (start + len > x.cols()) {
    shape_error(Op::kSliceCols, x,
                "cannot slice columns [" + std::to_string(start) + ", " +
                    std::to_string(start + len) + ")");
  }
  Tensor out(x.rows(), len);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::copy(x.row(i) + start, x.row(i) + start + len, out.row(i));
  }
  auto n = unary(Op::kSliceCols, a, std::move(out));
  n.a = start;
  n.b = x.cols();
  return a.tape->push(std::move(n));
}

Var pad_cols(Var a, std::size_t start, std::size_t total) {
  const Tensor& x = a.value();
  if (start + x.cols() > total) {
    shape_error(Op::kPadCols, x, "does not fit in " + std::to_string(total) + " columns");
  }
  Tensor out(x.rows(), total);
  for (std::size_t i = 0; i < x.rows(); ++i) std::copy(x.row(i), x.row(i) + x.cols(), out.row(i) + start);
  auto n = unary(Op::kPadCols, a, std::move(out));
  n.a = start;
  n.b = x.cols();
  return a.tape->push(std::move(n));
}

Var concat_cols(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rows() != y.rows()) shape_error(Op::kConcatCols, x, y);
  Tensor out(x.rows(), x.cols() + y.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::copy(x.row(i), x.row(i) + x.cols(), out.row(i));
    std::copy(y.row(i), y.row(i) + y.cols(), out.row(i) + x.cols());
  }
  return t.push(binary(Op::kConcatCols, a, b, std::move(out)));
}

Var gather_rows(Var a, Indices idx) {
  const Tensor& x = a.value();
  Tensor out(idx->size(), x.cols());
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::size_t r = (*idx)[i];
    if (r >= x.rows()) shape_error(Op::kGatherRows, x, "has no row " + std::to_string(r));
    std::copy(x.row(r), x.row(r) + x.cols(), out.row(i));
  }
  auto n = unary(Op::kGatherRows, a, std::move(out));
  n.a = x.rows();
  n.idx = std::move(idx);
  return a.tape->push(std::move(n));
}

Var scatter_rows(Var a, Indices idx, std::size_t rows) {
  const Tensor& x = a.value();
  if (idx->size() != x.rows()) shape_error(Op::kScatterRows, x, "row count differs from indices");
  Tensor out(rows, x.cols());
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::size_t r = (*idx)[i];
    if (r >= rows) shape_error(Op::kScatterRows, x, "index out of range");
    for (std::size_t j = 0; j < x.cols(); ++j) out(r, j) += x(i, j);
  }
  auto n = unary(Op::kScatterRows, a, std::move(out));
  n.idx = std::move(idx);
  return a.tape->push(std::move(n));
}

Var pick(Var a, Indices idx) {
  const Tensor& x = a.value();
  if (idx->size() != x.rows()) shape_error(Op::kPick, x, "row count differs from indices");
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const std::size_t c = (*idx)[i];
    if (c >= x.cols()) shape_error(Op::kPick, x, "has no column " + std::to_string(c));
    out[i] = x(i, c);
  }
  auto n = unary(Op::kPick, a, std::move(out));
  n.a = x.cols();
  n.idx = std::move(idx);
  return a.tape->push(std::move(n));
}

Var scatter_pick(Var a, Indices idx, std::size_t cols) {
  const Tensor& x = a.value();
  if (x.cols() != 1 || idx->size() != x.rows()) shape_error(Op::kScatterPick, x, "mismatches indices");
  Tensor out(x.rows(), cols);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const std::size_t c = (*idx)[i];
    if (c >= cols) shape_error(Op::kScatterPick, x, "index out of range");
    out(i, c) = x[i];
  }
  auto n = unary(Op::kScatterPick, a, std::move(out));
  n.idx = std::move(idx);
  return a.tape->push(std::move(n));
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& x = a.value();
  if (rows * cols != x.size()) {
    shape_error(Op::kReshape, x,
                "cannot be viewed as " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  auto n = unary(Op::kReshape, a, Tensor(rows, cols, x.data()));
  n.a = x.rows();
  n.b = x.cols();
  return a.tape->push(std::move(n));
}

// ---------------------------------------------------------------------------
// Reverse mode

void Tape::backprop_node(std::int32_t id, Var g, std::vector<std::int32_t>& grads) {
  // Copy what we need: pushing new nodes may reallocate nodes_.
  const Op op = nodes_[static_cast<std::size_t>(id)].op;
  const std::int32_t i0 = nodes_[static_cast<std::size_t>(id)].in0;
  const std::int32_t i1 = nodes_[static_cast<std::size_t>(id)].in1;
  const double c = nodes_[static_cast<std::size_t>(id)].scalar;
  const std::size_t na = nodes_[static_cast<std::size_t>(id)].a;
  const std::size_t nb = nodes_[static_cast<std::size_t>(id)].b;
  const Trans trans = nodes_[static_cast<std::size_t>(id)].trans;
  const Indices idx = nodes_[static_cast<std::size_t>(id)].idx;

  Var x{this, i0};
  Var y{this, i1};
  Var out{this, id};

  auto accumulate = [&](std::int32_t target, Var contrib) {
    if (target < 0 || !requires_grad(target)) return;
    auto& slot = grads[static_cast<std::size_t>(target)];
    if (slot < 0) {
      slot = contrib.id;
    } else {
      slot = add(Var{this, slot}, contrib).id;
    }
  };
  auto wants = [&](std::int32_t target) { return target >= 0 && requires_grad(target); };

  switch (op) {
    case Op::kLeaf:
      break;
    case Op::kMatMul:
      switch (trans) {
        case Trans::kNone:
          if (wants(i0)) accumulate(i0, matmul(g, y, Trans::kRight));
          if (wants(i1)) accumulate(i1, matmul(x, g, Trans::kLeft));
          break;
        case Trans::kLeft:
          if (wants(i0)) accumulate(i0, matmul(y, g, Trans::kRight));
          if (wants(i1)) accumulate(i1, matmul(x, g, Trans::kNone));
          break;
        case Trans::kRight:
          if (wants(i0)) accumulate(i0, matmul(g, y, Trans::kNone));
          if (wants(i1)) accumulate(i1, matmul(g, x, Trans::kLeft));
          break;
      }
      break;
    case Op::kAdd:
      accumulate(i0, g);
      accumulate(i1, g);
      break;
    case Op::kSub:
      accumulate(i0, g);
      if (wants(i1)) accumulate(i1, scale(g, -1.0));
      break;
    case Op::kMul:
      if (wants(i0)) accumulate(i0, mul(g, y));
      if (wants(i1)) accumulate(i1, mul(g, x));
      break;
    case Op::kAddRow:
      accumulate(i0, g);
      if (wants(i1)) accumulate(i1, sum_rows(g));
      break;
    case Op::kScale:
      accumulate(i0, scale(g, c));
      break;
    case Op::kAddScalar:
      accumulate(i0, g);
      break;
    case Op::kTanh:
      // (1 - y^2) g
      accumulate(i0, mul(g, add_scalar(scale(mul(out, out), -1.0), 1.0)));
      break;
    case Op::kSigmoid:
      // y (1 - y) g
      accumulate(i0, mul(g, mul(out, add_scalar(scale(out, -1.0), 1.0))));
      break;
    case Op::kExp:
      accumulate(i0, mul(g, out));
      break;
    case Op::kLogSoftmax: {
      const std::size_t cols = out.value().cols();
      accumulate(i0, sub(g, mul(exp(out), broadcast_cols(sum_cols(g), cols))));
      break;
    }
    case Op::kSumAll: {
      const Tensor& xv = x.value();
      accumulate(i0, broadcast_scalar(g, xv.rows(), xv.cols()));
      break;
    }
    case Op::kSumRows:
      accumulate(i0, broadcast_rows(g, x.value().rows()));
      break;
    case Op::kSumCols:
      accumulate(i0, broadcast_cols(g, x.value().cols()));
      break;
    case Op::kBroadcastScalar:
      accumulate(i0, sum(g));
      break;
    case Op::kBroadcastRows:
      accumulate(i0, sum_rows(g));
      break;
    case Op::kBroadcastCols:
      accumulate(i0, sum_cols(g));
      break;
    case Op::kSliceCols:
      accumulate(i0, pad_cols(g, na, nb));
      break;
    case Op::kPadCols:
      accumulate(i0, slice_cols(g, na, nb));
      break;
    case Op::kConcatCols: {
      const std::size_t ca = x.value().cols();
      const std::size_t cb = y.value().cols();
      if (wants(i0)) accumulate(i0, slice_cols(g, 0, ca));
      if (wants(i1)) accumulate(i1, slice_cols(g, ca, cb));
      break;
    }
    case Op::kGatherRows:
      accumulate(i0, scatter_rows(g, idx, na));
      break;
    case Op::kScatterRows:
      accumulate(i0, gather_rows(g, idx));
      break;
    case Op::kPick:
      accumulate(i0, scatter_pick(g, idx, na));
      break;
    case Op::kScatterPick:
      accumulate(i0, pick(g, idx));
      break;
    case Op::kReshape:
      accumulate(i0, reshape(g, na, nb));
      break;
  }
}

std::vector<Var> Tape::gradients(Var output, std::span<const Var> wrt, bool create_graph) {
  if (output.tape != this) throw std::invalid_argument("gradients: output is on another tape");
  const Tensor& ov = output.value();
  if (ov.size() != 1) {
    throw std::invalid_argument("gradients: output must be scalar, got " + ov.shape_str());
  }

  const bool prev = grad_enabled_;
  grad_enabled_ = create_graph && prev;

  // Node ids created from here on belong to the gradient computation and are
  // never visited by this pass.
  const auto n = static_cast<std::int32_t>(nodes_.size());
  std::vector<std::int32_t> grads(static_cast<std::size_t>(n), -1);
  if (requires_grad(output.id)) {
    grads[static_cast<std::size_t>(output.id)] = constant(Tensor::scalar(1.0)).id;
    for (std::int32_t id = output.id; id >= 0; --id) {
      const std::int32_t gid = grads[static_cast<std::size_t>(id)];
      if (gid < 0 || !requires_grad(id)) continue;
      backprop_node(id, Var{this, gid}, grads);
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.tape != this) {
      grad_enabled_ = prev;
      throw std::invalid_argument("gradients: wrt variable is on another tape");
    }
    const std::int32_t gid = w.id < n ? grads[static_cast<std::size_t>(w.id)] : -1;
    if (gid >= 0) {
      result.push_back(Var{this, gid});
    } else {
      const Tensor& wv = w.value();
      result.push_back(constant(Tensor(wv.rows(), wv.cols())));
    }
  }
  grad_enabled_ = prev;
  return result;
}

}  // namespace popmeta::ad
