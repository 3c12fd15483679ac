#include "popmeta/kernels.hpp"

#include <algorithm>
#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace popmeta::kernels {

namespace {
std::atomic<std::size_t> g_threshold{1u << 16};
}

void set_parallel_threshold(std::size_t flops) { g_threshold = flops; }
std::size_t parallel_threshold() { return g_threshold; }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

std::array<std::size_t, 2> gemm_shape(const Tensor& a, const Tensor& b, Trans trans) {
  std::size_t m = 0, k1 = 0, k2 = 0, n = 0;
  switch (trans) {
    case Trans::kNone:
      m = a.rows(), k1 = a.cols(), k2 = b.rows(), n = b.cols();
      break;
    case Trans::kLeft:
      m = a.cols(), k1 = a.rows(), k2 = b.rows(), n = b.cols();
      break;
    case Trans::kRight:
      m = a.rows(), k1 = a.cols(), k2 = b.cols(), n = b.rows();
      break;
  }
  if (k1 != k2) {
    throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " and " +
                                b.shape_str());
  }
  return {m, n};
}

Tensor gemm_reference(const Tensor& a, const Tensor& b, Trans trans) {
  auto [m, n] = gemm_shape(a, b, trans);
  const std::size_t k = trans == Trans::kLeft ? a.rows() : a.cols();
  Tensor c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans == Trans::kLeft ? a(p, i) : a(i, p);
        const double bv = trans == Trans::kRight ? b(j, p) : b(p, j);
        acc += av * bv;
      }
      c(i, j) = acc;
    }
  }
  return c;
}

namespace {

Tensor transposed(const Tensor& t) {
  Tensor out(t.cols(), t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const double* row = t.row(i);
    for (std::size_t j = 0; j < t.cols(); ++j) out(j, i) = row[j];
  }
  return out;
}

// C (m x n) = A (m x k) * B (k x n), all row-major. Every C entry is
// accumulated over p in ascending order, as in gemm_reference, so the result
// is bitwise identical to it for any thread count. Rows are processed four
// at a time so each B row is loaded once per block.
void gemm_rows(const Tensor& a, const Tensor& b, Tensor& c, bool par) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const auto blocks = static_cast<std::ptrdiff_t>((m + 3) / 4);
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * 4;
    const std::size_t rows = std::min<std::size_t>(4, m - i0);
    if (rows == 4) {
      double* c0 = c.row(i0);
      double* c1 = c.row(i0 + 1);
      double* c2 = c.row(i0 + 2);
      double* c3 = c.row(i0 + 3);
      const double* a0 = a.row(i0);
      const double* a1 = a.row(i0 + 1);
      const double* a2 = a.row(i0 + 2);
      const double* a3 = a.row(i0 + 3);
      for (std::size_t p = 0; p < k; ++p) {
        const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        const double* brow = b.row(p);
        for (std::size_t j = 0; j < n; ++j) {
          const double bv = brow[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    } else {
      for (std::size_t i = i0; i < i0 + rows; ++i) {
        double* crow = c.row(i);
        const double* arow = a.row(i);
        for (std::size_t p = 0; p < k; ++p) {
          const double av = arow[p];
          const double* brow = b.row(p);
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

}  // namespace

Tensor gemm(const Tensor& a, const Tensor& b, Trans trans) {
  auto [m, n] = gemm_shape(a, b, trans);
  const std::size_t k = trans == Trans::kLeft ? a.rows() : a.cols();
  Tensor c(m, n);
  bool par = m > 1 && m * n * k >= g_threshold.load(std::memory_order_relaxed);
#ifdef _OPENMP
  par = par && !omp_in_parallel() && omp_get_max_threads() > 1;
#else
  par = false;
#endif
  if (m == 0 || n == 0) return c;
  switch (trans) {
    case Trans::kNone: gemm_rows(a, b, c, par); break;
    case Trans::kLeft: gemm_rows(transposed(a), b, c, par); break;
    case Trans::kRight: gemm_rows(a, transposed(b), c, par); break;
  }
  return c;
}

}  // namespace popmeta::kernels
