#pragma once

#include "popmeta/tensor.hpp"

namespace popmeta::kernels {

enum class Trans { kNone, kLeft, kRight };

/// C = op(A) * op(B) where kLeft transposes A and kRight transposes B.
/// Rows of C are distributed over OpenMP threads when the product is large
/// enough and we are not already inside a parallel region. Every output
/// element is accumulated by a single thread in a fixed order, so results do
/// not depend on the thread count.
Tensor gemm(const Tensor& a, const Tensor& b, Trans trans);

/// Straightforward triple loop kept as the reference for tests and benches.
Tensor gemm_reference(const Tensor& a, const Tensor& b, Trans trans);

/// Output shape of gemm, throwing with both operand shapes on mismatch.
std::array<std::size_t, 2> gemm_shape(const Tensor& a, const Tensor& b, Trans trans);

// Parallel-threshold control. Products with fewer multiply-adds than this
// run serially.
void set_parallel_threshold(std::size_t flops);
std::size_t parallel_threshold();

/// Number of threads available to the kernels (1 without OpenMP).
int max_threads();
void set_num_threads(int n);

}  // namespace popmeta::kernels
