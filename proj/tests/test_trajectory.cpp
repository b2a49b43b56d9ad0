#include <doctest.h>

#include <cmath>

#include "caddi/trajectory.hpp"

using namespace caddi;

namespace {

Trajectory random_traj(int T, std::size_t L, std::size_t V, std::uint64_t seed) {
  Rng rng(seed);
  TokenSequence x0(L);
  for (auto& v : x0) v = static_cast<TokenId>(rng.below(V));
  return forward_sample(x0, NoiseSchedule::linear(T), MarginalKernel(KernelKind::absorbing, V), rng);
}

}  // namespace

TEST_CASE("forward sample endpoints and marginals") {
  const Trajectory tr = random_traj(4, 1000, 5, 1);
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK(tr.at(4, i) == 5);
    CHECK(tr.at(0, i) < 5);
    for (int t = 1; t <= 4; ++t) CHECK((tr.at(t, i) == tr.at(0, i) || tr.at(t, i) == 5));
  }
  std::size_t masked = 0;
  for (std::size_t i = 0; i < 1000; ++i) masked += tr.at(2, i) == 5;
  CHECK(std::abs(masked / 1000.0 - 2.0 / 3) <= 0.05);

  const std::vector<double> a = {0.0, 0.5, 1.0};
  Rng rng(2);
  const TokenSequence x0 = {0, 1, 2, 3};
  const Trajectory z = forward_sample(x0, NoiseSchedule::from_independent(a), MarginalKernel(KernelKind::absorbing, 4), rng);
  for (std::size_t i = 0; i < 4; ++i) CHECK(z.at(1, i) == z.at(0, i));
}

TEST_CASE("rows are corrupted independently") {
  const NoiseSchedule s = NoiseSchedule::linear(4);
  const MarginalKernel k(KernelKind::absorbing, 3);
  Rng rng(9);
  const TokenSequence x0 = {1};
  const int n = 10000;
  double s1 = 0, s2 = 0, s12 = 0;
  for (int i = 0; i < n; ++i) {
    const Trajectory tr = forward_sample(x0, s, k, rng);
    const double a = tr.at(1, 0) == 3, b = tr.at(2, 0) == 3;
    s1 += a;
    s2 += b;
    s12 += a * b;
  }
  const double p1 = s1 / n, p2 = s2 / n;
  const double cov = s12 / n - p1 * p2;
  const double sigma = std::sqrt(p1 * (1 - p1) * p2 * (1 - p2) / n);
  CHECK(std::abs(cov) <= 3 * sigma);
}

TEST_CASE("truncate windows") {
  const Trajectory tr = random_traj(8, 3, 4, 2);
  auto blocks = [](const FlatContext& c) { return c.block_times; };
  CHECK(blocks(truncate(tr, 8, 5)) == std::vector<int>{8});
  CHECK(blocks(truncate(tr, 3, 5)) == std::vector<int>{7, 6, 5, 4, 3});
  CHECK(blocks(truncate(tr, 6, 5)) == std::vector<int>{8, 7, 6});
  CHECK_THROWS_AS(truncate(tr, 3, 0), Error);
  const FlatContext full = truncate(tr, 2, 7);
  CHECK(full.size() == 7 * 3);
  for (std::size_t e = 1; e < full.size(); ++e) CHECK(full.time[e] <= full.time[e - 1]);
  for (std::size_t e = 0; e < full.size(); ++e) CHECK(full.tokens[e] == tr.at(full.time[e], static_cast<std::size_t>(full.seq_pos[e])));
}

TEST_CASE("recompose keeps the most recent unmasked token") {
  Trajectory tr(2, 2, 9);
  const TokenSequence r0 = {1, 0}, r1 = {9, 0}, r2 = {1, 9};
  std::copy(r0.begin(), r0.end(), tr.row(0).begin());
  std::copy(r1.begin(), r1.end(), tr.row(1).begin());
  std::copy(r2.begin(), r2.end(), tr.row(2).begin());
  const Trajectory rc = recompose_rows(tr, 1, 9);
  CHECK(rc.at(1, 0) == 1);
  CHECK(rc.at(1, 1) == 0);

  Trajectory masked(3, 4, 4);
  const Trajectory mc = recompose_rows(masked, 1, 4);
  for (int t = 1; t <= 3; ++t) {
    for (std::size_t i = 0; i < 4; ++i) CHECK(mc.at(t, i) == 4);
  }

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Trajectory r = random_traj(8, 6, 4, seed);
    const Trajectory c = recompose_rows(r, 1, 4);
    for (int t = 1; t <= 8; ++t) {
      for (std::size_t j = 0; j < 6; ++j) {
        bool seen = false;
        for (int s = t; s <= 8; ++s) seen = seen || r.at(s, j) != 4;
        CHECK(c.at(t, j) == (seen ? r.at(0, j) : 4));
      }
    }
    CHECK(recompose_rows(c, 1, 4) == c);
    const FlatContext f = recompose(r, 3, 5, 4);
    for (std::size_t e = 0; e < f.size(); ++e) CHECK(f.tokens[e] == c.at(f.time[e], static_cast<std::size_t>(f.seq_pos[e])));
  }
}

TEST_CASE("bidirectional augmentation") {
  const Trajectory tr = random_traj(8, 4, 3, 4);
  const FlatContext c = truncate(tr, 4, 2);
  const FlatContext a = bidir_augment(c);
  CHECK(a.size() == c.size() + 4);
  CHECK(a.layout == Layout::augmented);
  CHECK(a.block_times == std::vector<int>{5, 4, 4});
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(a.tokens[8 + j] == a.tokens[4 + j]);
    CHECK(a.time[8 + j] == 4);
  }
  const AttentionMask m = build_attention_mask(a, MaskMode::token_causal);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t c2 = 4; c2 < 8; ++c2) CHECK(m.allowed(8 + j, c2));
  }
  CHECK_THROWS_AS(build_attention_mask(a, MaskMode::block_causal), Error);
}

TEST_CASE("attention masks") {
  FlatContext c;
  c.append_block(TokenSequence{0, 1}, 2);
  c.append_block(TokenSequence{1, 0}, 1);
  const AttentionMask tc = build_attention_mask(c, MaskMode::token_causal);
  const AttentionMask bc = build_attention_mask(c, MaskMode::block_causal);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t q = 0; q < 4; ++q) {
      CHECK(tc.allowed(r, q) == (q <= r));
      CHECK(bc.allowed(r, q) == (q / 2 <= r / 2));
    }
  }
  FlatContext one;
  one.append_block(TokenSequence{0}, 3);
  one.append_block(TokenSequence{1}, 2);
  one.append_block(TokenSequence{0}, 1);
  const AttentionMask a = build_attention_mask(one, MaskMode::token_causal);
  const AttentionMask b = build_attention_mask(one, MaskMode::block_causal);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("model inputs and prediction rows") {
  const Trajectory tr = random_traj(6, 3, 4, 5);
  ContextSpec block;
  block.window = 3;
  const ModelInput bi = make_model_input(tr, 2, block, 4);
  CHECK(bi.context.block_times == std::vector<int>{4, 3, 2});
  CHECK(prediction_row(bi, block, 1) == 7);

  ContextSpec tok = block;
  tok.attention = MaskMode::token_causal;
  const ModelInput ti = make_model_input(tr, 2, tok, 4);
  CHECK(ti.context.size() == 12);
  CHECK(prediction_row(ti, tok, 0) == 9);

  ContextSpec ar = tok;
  ar.autoregressive = true;
  const TokenSequence x0 = {1, 2, 3};
  const ModelInput ai = make_model_input(tr, 2, ar, 4, x0);
  CHECK(ai.context.size() == 12);
  CHECK(ai.context.block_times.back() == 0);
  CHECK(prediction_row(ai, ar, 0) == 8);
  CHECK(ai.context.tokens[prediction_row(ai, ar, 1)] == 1);

  ContextSpec bad = block;
  bad.autoregressive = true;
  CHECK_THROWS_AS(bad.validate(), Error);
}
