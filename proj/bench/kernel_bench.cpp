// Serial reference vs OpenMP kernels at denoiser-sized shapes.
#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "caddi/kernels.hpp"
#include "caddi/common.hpp"

namespace {

using caddi::kernels::AttentionShape;

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
  caddi::Rng rng(seed);
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.normal(0, 1));
  return v;
}

std::vector<std::uint8_t> causal_mask(std::size_t n) {
  std::vector<std::uint8_t> m(n * n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c <= r; ++c) m[r * n + c] = 1;
  }
  return m;
}

struct LinearData {
  std::size_t n, k, m;
  std::vector<float> x, w, b, y, dy, dx, dw, db;
  explicit LinearData(const benchmark::State& st)
      : n(static_cast<std::size_t>(st.range(0))),
        k(static_cast<std::size_t>(st.range(1))),
        m(static_cast<std::size_t>(st.range(2))),
        x(random_vector(n * k, 1)),
        w(random_vector(k * m, 2)),
        b(random_vector(m, 3)),
        y(n * m),
        dy(random_vector(n * m, 4)),
        dx(n * k),
        dw(k * m),
        db(m) {}
};

template <bool Serial>
void BM_LinearForward(benchmark::State& st) {
  LinearData d(st);
  for (auto _ : st) {
    if constexpr (Serial) {
      caddi::kernels::serial::linear_forward<float>(d.x, d.w, d.b, d.y, d.n, d.k, d.m);
    } else {
      caddi::kernels::linear_forward<float>(d.x, d.w, d.b, d.y, d.n, d.k, d.m);
    }
    benchmark::DoNotOptimize(d.y.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * d.n * d.k * d.m));
}

template <bool Serial>
void BM_LinearBackward(benchmark::State& st) {
  LinearData d(st);
  for (auto _ : st) {
    if constexpr (Serial) {
      caddi::kernels::serial::linear_backward<float>(d.x, d.w, d.dy, d.dx, d.dw, d.db, d.n, d.k, d.m);
    } else {
      caddi::kernels::linear_backward<float>(d.x, d.w, d.dy, d.dx, d.dw, d.db, d.n, d.k, d.m);
    }
    benchmark::DoNotOptimize(d.dw.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * 2 * d.n * d.k * d.m));
}

struct AttentionData {
  AttentionShape s;
  std::vector<float> q, k, v, probs, out, dout, dq, dk, dv;
  std::vector<std::uint8_t> mask;
  explicit AttentionData(const benchmark::State& st)
      : s{static_cast<std::size_t>(st.range(0)), static_cast<std::size_t>(st.range(1)),
          static_cast<std::size_t>(st.range(2))},
        q(random_vector(s.n * s.width(), 5)),
        k(random_vector(s.n * s.width(), 6)),
        v(random_vector(s.n * s.width(), 7)),
        probs(s.heads * s.n * s.n),
        out(s.n * s.width()),
        dout(random_vector(s.n * s.width(), 8)),
        dq(s.n * s.width()),
        dk(s.n * s.width()),
        dv(s.n * s.width()),
        mask(causal_mask(s.n)) {}
};

template <bool Serial>
void BM_AttentionForward(benchmark::State& st) {
  AttentionData d(st);
  for (auto _ : st) {
    if constexpr (Serial) {
      caddi::kernels::serial::attention_forward<float>(d.q, d.k, d.v, d.mask, d.probs, d.out, d.s);
    } else {
      caddi::kernels::attention_forward<float>(d.q, d.k, d.v, d.mask, d.probs, d.out, d.s);
    }
    benchmark::DoNotOptimize(d.out.data());
  }
}

template <bool Serial>
void BM_AttentionBackward(benchmark::State& st) {
  AttentionData d(st);
  caddi::kernels::attention_forward<float>(d.q, d.k, d.v, d.mask, d.probs, d.out, d.s);
  for (auto _ : st) {
    if constexpr (Serial) {
      caddi::kernels::serial::attention_backward<float>(d.q, d.k, d.v, d.probs, d.mask, d.dout, d.dq,
                                                        d.dk, d.dv, d.s);
    } else {
      caddi::kernels::attention_backward<float>(d.q, d.k, d.v, d.probs, d.mask, d.dout, d.dq, d.dk,
                                                d.dv, d.s);
    }
    benchmark::DoNotOptimize(d.dq.data());
  }
}

// {rows, in, out}: attention projections and the feed-forward pair.
void linear_args(benchmark::internal::Benchmark* b) {
  b->Args({160, 64, 64})->Args({160, 64, 256})->Args({160, 256, 64})->Args({1024, 128, 512});
}

// {n, heads, d_head}
void attention_args(benchmark::internal::Benchmark* b) {
  b->Args({160, 4, 16})->Args({512, 4, 32});
}

}  // namespace

BENCHMARK(BM_LinearForward<true>)->Name("linear_forward/serial")->Apply(linear_args);
BENCHMARK(BM_LinearForward<false>)->Name("linear_forward/parallel")->Apply(linear_args);
BENCHMARK(BM_LinearBackward<true>)->Name("linear_backward/serial")->Apply(linear_args);
BENCHMARK(BM_LinearBackward<false>)->Name("linear_backward/parallel")->Apply(linear_args);
BENCHMARK(BM_AttentionForward<true>)->Name("attention_forward/serial")->Apply(attention_args);
BENCHMARK(BM_AttentionForward<false>)->Name("attention_forward/parallel")->Apply(attention_args);
BENCHMARK(BM_AttentionBackward<true>)->Name("attention_backward/serial")->Apply(attention_args);
BENCHMARK(BM_AttentionBackward<false>)->Name("attention_backward/parallel")->Apply(attention_args);

BENCHMARK_MAIN();
