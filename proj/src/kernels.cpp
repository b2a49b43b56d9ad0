#include "caddi/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace caddi::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 14;

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

// Strided view of a row-major matrix: element (r, p) sits at data[r * rs + p * ps].
template <class Real>
struct View {
  const Real* data;
  std::size_t rs;
  std::size_t ps;
  Real at(std::size_t r, std::size_t p) const { return data[r * rs + p * ps]; }
};

// C[R x C] += A[R x k] B[k x C] with the accumulators held in registers. Each
// output sums its initial value then p = 0..k-1 in order.
template <std::size_t R, std::size_t C, class Real>
void gemm_tile(View<Real> a, const Real* __restrict__ b, std::size_t ldb, Real* __restrict__ c,
               std::size_t ldc, std::size_t k) {
  Real acc[R][C];
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < C; ++j) acc[r][j] = c[r * ldc + j];
  }
  for (std::size_t p = 0; p < k; ++p) {
    const Real* __restrict__ br = b + p * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const Real av = a.at(r, p);
#pragma omp simd
      for (std::size_t j = 0; j < C; ++j) acc[r][j] += av * br[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t j = 0; j < C; ++j) c[r * ldc + j] = acc[r][j];
  }
}

template <std::size_t R, class Real>
void gemm_strip(View<Real> a, const Real* b, std::size_t ldb, Real* c, std::size_t ldc,
                std::size_t k, std::size_t m) {
  std::size_t j = 0;
  for (; j + 32 <= m; j += 32) gemm_tile<R, 32>(a, b + j, ldb, c + j, ldc, k);
  for (; j + 16 <= m; j += 16) gemm_tile<R, 16>(a, b + j, ldb, c + j, ldc, k);
  for (; j + 8 <= m; j += 8) gemm_tile<R, 8>(a, b + j, ldb, c + j, ldc, k);
  for (; j < m; ++j) gemm_tile<R, 1>(a, b + j, ldb, c + j, ldc, k);
}

// C[n x m] += A[n x k] B[k x m]; row blocks are split across threads when
// parallel is set.
template <class Real>
void gemm(View<Real> a, const Real* b, std::size_t ldb, Real* c, std::size_t ldc, std::size_t n,
          std::size_t k, std::size_t m, bool parallel) {
  constexpr std::size_t kRows = 4;
  const auto blocks = static_cast<std::ptrdiff_t>(n / kRows);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i = static_cast<std::size_t>(blk) * kRows;
    gemm_strip<kRows>(View<Real>{a.data + i * a.rs, a.rs, a.ps}, b, ldb, c + i * ldc, ldc, k, m);
  }
  for (std::size_t i = n / kRows * kRows; i < n; ++i) {
    gemm_strip<1>(View<Real>{a.data + i * a.rs, a.rs, a.ps}, b, ldb, c + i * ldc, ldc, k, m);
  }
}

template <class Real>
std::vector<Real> transpose(const Real* m, std::size_t rows, std::size_t cols, std::size_t ld) {
  std::vector<Real> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = m[r * ld + c];
  }
  return out;
}

template <class Real>
Real attention_scale(const AttentionShape& s) {
  return Real(1) / std::sqrt(static_cast<Real>(s.d_head));
}

// One head of the forward pass. Scores are accumulated over all columns and
// masked entries are zeroed afterwards.
template <class Real>
void attention_head_forward(std::span<const Real> Q, std::span<const Real> K,
                            std::span<const Real> V, std::span<const std::uint8_t> mask,
                            std::span<Real> probs, std::span<Real> out, const AttentionShape& s,
                            std::size_t h) {
  const std::size_t n = s.n, width = s.width(), dh = s.d_head, off = h * dh;
  const Real scale = attention_scale<Real>(s);
  Real* p = probs.data() + h * n * n;
  std::fill(p, p + n * n, Real(0));
  const std::vector<Real> kt = transpose(K.data() + off, n, dh, width);
  gemm(View<Real>{Q.data() + off, width, 1}, kt.data(), n, p, n, n, dh, n, false);
  for (std::size_t r = 0; r < n; ++r) {
    Real* pr = p + r * n;
    const std::uint8_t* mr = mask.data() + r * n;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      pr[c] = mr[c] ? pr[c] * scale : Real(0);
      if (mr[c]) mx = std::max(mx, pr[c]);
    }
    Real sum = 0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!mr[c]) continue;
      pr[c] = std::exp(pr[c] - mx);
      sum += pr[c];
    }
    if (sum == Real(0)) continue;  // fully masked row
    const Real inv = Real(1) / sum;
    for (std::size_t c = 0; c < n; ++c) pr[c] *= inv;
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t d = 0; d < dh; ++d) out[r * width + off + d] = 0;
  }
  gemm(View<Real>{p, n, 1}, V.data() + off, width, out.data() + off, width, n, n, dh, false);
}

template <class Real>
void attention_head_backward(std::span<const Real> Q, std::span<const Real> K,
                             std::span<const Real> V, std::span<const Real> probs,
                             std::span<const Real> dOut, std::span<Real> dQ, std::span<Real> dK,
                             std::span<Real> dV, const AttentionShape& s, std::size_t h) {
  const std::size_t n = s.n, width = s.width(), dh = s.d_head, off = h * dh;
  const Real scale = attention_scale<Real>(s);
  const Real* p = probs.data() + h * n * n;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t d = 0; d < dh; ++d) {
      dQ[r * width + off + d] = 0;
      dK[r * width + off + d] = 0;
      dV[r * width + off + d] = 0;
    }
  }
  gemm(View<Real>{p, 1, n}, dOut.data() + off, width, dV.data() + off, width, n, n, dh, false);
  std::vector<Real> ds(n * n, Real(0));
  const std::vector<Real> vt = transpose(V.data() + off, n, dh, width);
  gemm(View<Real>{dOut.data() + off, width, 1}, vt.data(), n, ds.data(), n, n, dh, n, false);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* pr = p + r * n;
    Real* dr = ds.data() + r * n;
    Real dot = 0;
    for (std::size_t c = 0; c < n; ++c) dot += pr[c] * dr[c];
    for (std::size_t c = 0; c < n; ++c) dr[c] = pr[c] * (dr[c] - dot) * scale;
  }
  gemm(View<Real>{ds.data(), n, 1}, K.data() + off, width, dQ.data() + off, width, n, n, dh, false);
  gemm(View<Real>{ds.data(), 1, n}, Q.data() + off, width, dK.data() + off, width, n, n, dh, false);
}

}  // namespace

template <class Real>
void linear_forward(std::span<const Real> X, std::span<const Real> W, std::span<const Real> b,
                    std::span<Real> Y, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) Y[i * m + j] = b.empty() ? Real(0) : b[j];
  }
  gemm(View<Real>{X.data(), k, 1}, W.data(), m, Y.data(), m, n, k, m, n * k * m > kParallelWork);
}

template <class Real>
void linear_backward(std::span<const Real> X, std::span<const Real> W, std::span<const Real> dY,
                     std::span<Real> dX, std::span<Real> dW, std::span<Real> db, std::size_t n,
                     std::size_t k, std::size_t m) {
  const bool parallel = n * k * m > kParallelWork;
  if (!dX.empty()) {
    std::fill(dX.begin(), dX.end(), Real(0));
    const std::vector<Real> wt = transpose(W.data(), k, m, m);
    gemm(View<Real>{dY.data(), m, 1}, wt.data(), k, dX.data(), k, n, m, k, parallel);
  }
  gemm(View<Real>{X.data(), 1, k}, dY.data(), m, dW.data(), m, k, n, m, parallel);
  if (!db.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) db[j] += dY[i * m + j];
    }
  }
}

template <class Real>
void attention_forward(std::span<const Real> Q, std::span<const Real> K, std::span<const Real> V,
                       std::span<const std::uint8_t> mask, std::span<Real> probs, std::span<Real> out,
                       const AttentionShape& shape) {
  const auto heads = static_cast<std::ptrdiff_t>(shape.heads);
  const bool parallel = shape.n * shape.n * shape.width() > kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t h = 0; h < heads; ++h) {
    attention_head_forward(Q, K, V, mask, probs, out, shape, static_cast<std::size_t>(h));
  }
}

template <class Real>
void attention_backward(std::span<const Real> Q, std::span<const Real> K, std::span<const Real> V,
                        std::span<const Real> probs, std::span<const std::uint8_t> /*mask*/,
                        std::span<const Real> dOut, std::span<Real> dQ, std::span<Real> dK,
                        std::span<Real> dV, const AttentionShape& shape) {
  const auto heads = static_cast<std::ptrdiff_t>(shape.heads);
  const bool parallel = shape.n * shape.n * shape.width() > kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t h = 0; h < heads; ++h) {
    attention_head_backward(Q, K, V, probs, dOut, dQ, dK, dV, shape, static_cast<std::size_t>(h));
  }
}

// Plain loops with the same per-element summation order as the blocked
// kernels above, so both produce identical results.
namespace serial {

template <class Real>
void linear_forward(std::span<const Real> X, std::span<const Real> W, std::span<const Real> b,
                    std::span<Real> Y, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      Real acc = b.empty() ? Real(0) : b[j];
      for (std::size_t p = 0; p < k; ++p) acc += X[i * k + p] * W[p * m + j];
      Y[i * m + j] = acc;
    }
  }
}

template <class Real>
void linear_backward(std::span<const Real> X, std::span<const Real> W, std::span<const Real> dY,
                     std::span<Real> dX, std::span<Real> dW, std::span<Real> db, std::size_t n,
                     std::size_t k, std::size_t m) {
  if (!dX.empty()) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        Real acc = 0;
        for (std::size_t j = 0; j < m; ++j) acc += dY[i * m + j] * W[p * m + j];
        dX[i * k + p] = acc;
      }
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < m; ++j) {
      Real acc = dW[p * m + j];
      for (std::size_t i = 0; i < n; ++i) acc += X[i * k + p] * dY[i * m + j];
      dW[p * m + j] = acc;
    }
  }
  if (!db.empty()) {
    for (std::size_t j = 0; j < m; ++j) {
      Real acc = db[j];
      for (std::size_t i = 0; i < n; ++i) acc += dY[i * m + j];
      db[j] = acc;
    }
  }
}

template <class Real>
void attention_forward(std::span<const Real> Q, std::span<const Real> K, std::span<const Real> V,
                       std::span<const std::uint8_t> mask, std::span<Real> probs, std::span<Real> out,
                       const AttentionShape& s) {
  const std::size_t n = s.n, width = s.width(), dh = s.d_head;
  const Real scale = attention_scale<Real>(s);
  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t r = 0; r < n; ++r) {
      Real* pr = probs.data() + (h * n + r) * n;
      const std::uint8_t* mr = mask.data() + r * n;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t c = 0; c < n; ++c) {
        Real acc = 0;
        for (std::size_t d = 0; d < dh; ++d) acc += Q[r * width + off + d] * K[c * width + off + d];
        pr[c] = mr[c] ? acc * scale : Real(0);
        if (mr[c]) mx = std::max(mx, pr[c]);
      }
      Real sum = 0;
      for (std::size_t c = 0; c < n; ++c) {
        if (!mr[c]) continue;
        pr[c] = std::exp(pr[c] - mx);
        sum += pr[c];
      }
      if (sum != Real(0)) {
        const Real inv = Real(1) / sum;
        for (std::size_t c = 0; c < n; ++c) pr[c] *= inv;
      }
      for (std::size_t d = 0; d < dh; ++d) {
        Real acc = 0;
        for (std::size_t c = 0; c < n; ++c) acc += pr[c] * V[c * width + off + d];
        out[r * width + off + d] = acc;
      }
    }
  }
}

template <class Real>
void attention_backward(std::span<const Real> Q, std::span<const Real> K, std::span<const Real> V,
                        std::span<const Real> probs, std::span<const std::uint8_t> /*mask*/,
                        std::span<const Real> dOut, std::span<Real> dQ, std::span<Real> dK,
                        std::span<Real> dV, const AttentionShape& s) {
  const std::size_t n = s.n, width = s.width(), dh = s.d_head;
  const Real scale = attention_scale<Real>(s);
  std::vector<Real> ds(n * n);
  for (std::size_t h = 0; h < s.heads; ++h) {
    const std::size_t off = h * dh;
    const Real* p = probs.data() + h * n * n;
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t d = 0; d < dh; ++d) {
        Real acc = 0;
        for (std::size_t r = 0; r < n; ++r) acc += p[r * n + c] * dOut[r * width + off + d];
        dV[c * width + off + d] = acc;
      }
    }
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        Real acc = 0;
        for (std::size_t d = 0; d < dh; ++d) acc += dOut[r * width + off + d] * V[c * width + off + d];
        ds[r * n + c] = acc;
      }
      Real dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += p[r * n + c] * ds[r * n + c];
      for (std::size_t c = 0; c < n; ++c) ds[r * n + c] = p[r * n + c] * (ds[r * n + c] - dot) * scale;
    }
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t d = 0; d < dh; ++d) {
        Real acc = 0;
        for (std::size_t c = 0; c < n; ++c) acc += ds[r * n + c] * K[c * width + off + d];
        dQ[r * width + off + d] = acc;
      }
    }
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t d = 0; d < dh; ++d) {
        Real acc = 0;
        for (std::size_t r = 0; r < n; ++r) acc += ds[r * n + c] * Q[r * width + off + d];
        dK[c * width + off + d] = acc;
      }
    }
  }
}

}  // namespace serial

#define CADDI_INSTANTIATE_KERNELS(Real)                                                          \
  template void linear_forward<Real>(std::span<const Real>, std::span<const Real>,             \
                                     std::span<const Real>, std::span<Real>, std::size_t,      \
                                     std::size_t, std::size_t);                                \
  template void linear_backward<Real>(std::span<const Real>, std::span<const Real>,            \
                                      std::span<const Real>, std::span<Real>, std::span<Real>, \
                                      std::span<Real>, std::size_t, std::size_t, std::size_t); \
  template void attention_forward<Real>(std::span<const Real>, std::span<const Real>,          \
                                        std::span<const Real>, std::span<const std::uint8_t>,  \
                                        std::span<Real>, std::span<Real>,                      \
                                        const AttentionShape&);                                \
  template void attention_backward<Real>(                                                      \
      std::span<const Real>, std::span<const Real>, std::span<const Real>,                     \
      std::span<const Real>, std::span<const std::uint8_t>, std::span<const Real>,             \
      std::span<Real>, std::span<Real>, std::span<Real>, const AttentionShape&);               \
  namespace serial {                                                                           \
  template void linear_forward<Real>(std::span<const Real>, std::span<const Real>,             \
                                     std::span<const Real>, std::span<Real>, std::size_t,      \
                                     std::size_t, std::size_t);                                \
  template void linear_backward<Real>(std::span<const Real>, std::span<const Real>,            \
                                      std::span<const Real>, std::span<Real>, std::span<Real>, \
                                      std::span<Real>, std::size_t, std::size_t, std::size_t); \
  template void attention_forward<Real>(std::span<const Real>, std::span<const Real>,          \
                                        std::span<const Real>, std::span<const std::uint8_t>,  \
                                        std::span<Real>, std::span<Real>,                      \
                                        const AttentionShape&);                                \
  template void attention_backward<Real>(                                                      \
      std::span<const Real>, std::span<const Real>, std::span<const Real>,                     \
      std::span<const Real>, std::span<const std::uint8_t>, std::span<const Real>,             \
      std::span<Real>, std::span<Real>, std::span<Real>, const AttentionShape&);               \
  }

CADDI_INSTANTIATE_KERNELS(float)
CADDI_INSTANTIATE_KERNELS(double)

#undef CADDI_INSTANTIATE_KERNELS

}  // namespace caddi::kernels
