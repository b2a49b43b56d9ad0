#pragma once

// Dense kernels used by the denoiser. The functions in caddi::kernels are the
// OpenMP-parallel versions the model runs; caddi::kernels::serial holds plain
// loop reference implementations used by the tests and the benchmark.
//
// Layout: all matrices are row-major. Attention tensors are n x (heads*d_head)
// with head h occupying columns [h*d_head, (h+1)*d_head). The attention mask
// is an n x n byte matrix, nonzero where row r may attend to column c.
//
// Parallel versions partition work so every output element is produced by one
// thread with the same summation order as the serial loop.

#include <cstddef>
#include <cstdint>
#include <span>

namespace caddi::kernels {

struct AttentionShape {
  std::size_t n = 0;
  std::size_t heads = 0;
  std::size_t d_head = 0;
  std::size_t width() const { return heads * d_head; }
};

// Y[n x m] = X[n x k] W[k x m] + b (b may be empty).
template <class Real>
void linear_forward(std::span<const Real> X, std::span<const Real> W, std::span<const Real> b,
                    std::span<Real> Y, std::size_t n, std::size_t k, std::size_t m);

// dX = dY W^T (overwritten, skipped when empty); dW += X^T dY; db += colsum(dY).
template <class Real>
void linear_backward(std::span<const Real> X, std::span<const Real> W, std::span<const Real> dY,
                     std::span<Real> dX, std::span<Real> dW, std::span<Real> db, std::size_t n,
                     std::size_t k, std::size_t m);

// Masked scaled dot-product attention. probs receives heads x n x n softmax
// weights (zero where masked).
template <class Real>
void attention_forward(std::span<const Real> Q, std::span<const Real> K, std::span<const Real> V,
                       std::span<const std::uint8_t> mask, std::span<Real> probs, std::span<Real> out,
                       const AttentionShape& shape);

// dQ, dK, dV are overwritten.
template <class Real>
void attention_backward(std::span<const Real> Q, std::span<const Real> K, std::span<const Real> V,
                        std::span<const Real> probs, std::span<const std::uint8_t> mask,
                        std::span<const Real> dOut, std::span<Real> dQ, std::span<Real> dK,
                        std::span<Real> dV, const AttentionShape& shape);

namespace serial {

template <class Real>
void linear_forward(std::span<const Real> X, std::span<const Real> W, std::span<const Real> b,
                    std::span<Real> Y, std::size_t n, std::size_t k, std::size_t m);

template <class Real>
void linear_backward(std::span<const Real> X, std::span<const Real> W, std::span<const Real> dY,
                     std::span<Real> dX, std::span<Real> dW, std::span<Real> db, std::size_t n,
                     std::size_t k, std::size_t m);

template <class Real>
void attention_forward(std::span<const Real> Q, std::span<const Real> K, std::span<const Real> V,
                       std::span<const std::uint8_t> mask, std::span<Real> probs, std::span<Real> out,
                       const AttentionShape& shape);

template <class Real>
void attention_backward(std::span<const Real> Q, std::span<const Real> K, std::span<const Real> V,
                        std::span<const Real> probs, std::span<const std::uint8_t> mask,
                        std::span<const Real> dOut, std::span<Real> dQ, std::span<Real> dK,
                        std::span<Real> dV, const AttentionShape& shape);

}  // namespace serial

// Number of OpenMP threads the parallel kernels may use (1 without OpenMP).
int max_threads();

}  // namespace caddi::kernels
