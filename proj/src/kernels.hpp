#pragma once

// Row-major dense kernels shared by the layers. Loop orders are fixed so
// results are bitwise reproducible.

#include <cstddef>

namespace capgen::kernels {

// C(m,n) += A(m,k) B(k,n)
template <typename Real>
void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* c_row = c + i * n;
    const Real* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real a_ip = a_row[p];
      if (a_ip == Real(0)) continue;
      const Real* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += a_ip * b_row[j];
    }
  }
}

// C(m,k) += A(m,n) B(k,n)^T
template <typename Real>
void gemm_acc_bt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* a_row = a + i * n;
    Real* c_row = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real* b_row = b + p * n;
      Real acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += a_row[j] * b_row[j];
      c_row[p] += acc;
    }
  }
}

// C(k,n) += A(m,k)^T B(m,n)
template <typename Real>
void gemm_acc_at(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* a_row = a + i * k;
    const Real* b_row = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real a_ip = a_row[p];
      if (a_ip == Real(0)) continue;
      Real* c_row = c + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += a_ip * b_row[j];
    }
  }
}

// Adds `bias` (n) to every row of C(m,n).
template <typename Real>
void add_rows(const Real* bias, Real* c, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* c_row = c + i * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += bias[j];
  }
}

// out(n) += column sums of A(m,n)
template <typename Real>
void sum_rows(const Real* a, Real* out, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* a_row = a + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += a_row[j];
  }
}

}  // namespace capgen::kernels
