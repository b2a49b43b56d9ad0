#include <doctest.h>

#include <cmath>

#include "caddi/sampler.hpp"
#include "mock_models.hpp"

using namespace caddi;
using namespace caddi::testing;
using doctest::Approx;

namespace {

TransformerDenoiser<double> random_model(int vocab_aug, std::uint64_t seed, double scale = 30.0) {
  auto p = init_params<double>(ModelConfig::make(2, 16, 2, vocab_aug), seed);
  for (auto& v : p.data) v *= scale;
  return TransformerDenoiser<double>(p);
}

SamplerConfig base_config(std::size_t L) {
  SamplerConfig c;
  c.length = L;
  c.context.window = 3;
  return c;
}

}  // namespace

TEST_CASE("step skip schedule") {
  CHECK(step_skip_schedule(5, 5) == std::vector<int>{5, 4, 3, 2, 1});
  CHECK(step_skip_schedule(5, 1) == std::vector<int>{5});
  const auto s = step_skip_schedule(64, 8);
  CHECK(s.size() == 8);
  CHECK(s.front() == 64);
  CHECK(s.back() == 1);
  CHECK_THROWS_AS(step_skip_schedule(4, 5), Error);
  CHECK_THROWS_AS(step_skip_schedule(4, 0), Error);
}

TEST_CASE("guidance") {
  const std::vector<double> c = {std::log(0.8), std::log(0.2)}, u = {std::log(0.5), std::log(0.5)};
  const auto g1 = cfg_distribution(c, u, 1.0);
  CHECK(std::abs(g1[0] - 0.8) <= 1e-12);
  const auto g2 = cfg_distribution(c, u, 2.0);
  CHECK(std::abs(g2[0] - 0.64 / 0.68) <= 1e-12);
  CHECK(std::abs(g2[1] - 0.04 / 0.68) <= 1e-12);
  for (double gamma : {1.0, 1.5, 3.0, 10.0}) {
    const auto same = cfg_distribution(c, c, gamma);
    CHECK(same[0] == Approx(0.8));
  }
  CHECK_THROWS_AS(cfg_distribution(c, u, 0.5), Error);
  const std::vector<double> three = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(cfg_distribution(c, three, 2.0), Error);
}

TEST_CASE("temperature and top-k") {
  const std::vector<double> lp = {std::log(0.5), std::log(0.3), std::log(0.2)};
  const auto cold = adjust_distribution(lp, 1e-6, 0);
  CHECK(cold[0] == Approx(1.0));
  const auto top2 = adjust_distribution(lp, 1.0, 2);
  CHECK(top2[2] == 0.0);
  CHECK(top2[0] == Approx(0.625));
  Rng rng(1);
  CHECK(draw_token(adjust_distribution(lp, 1.0, 0), true, rng) == 0);
}

TEST_CASE("reverse step re-corrupts at the previous level") {
  const auto model = random_model(5, 1);
  const NoiseSchedule s = NoiseSchedule::linear(4);
  const SamplerConfig c = base_config(6);
  Trajectory lat(4, 6, 4);
  Rng rng(3);
  const StepResult r1 = reverse_step(model, lat, 1, s, c, rng);
  CHECK(r1.x_prev == r1.x0_pred);
  CHECK(r1.calls == 1);

  const std::vector<double> ones = {1.0, 1.0, 1.0};
  const NoiseSchedule full = NoiseSchedule::from_independent(ones);
  Trajectory lat3(3, 6, 4);
  const StepResult r2 = reverse_step(model, lat3, 2, full, c, rng);
  for (TokenId v : r2.x_prev) CHECK(v == 4);
}

TEST_CASE("near-zero temperature equals argmax") {
  const auto model = random_model(5, 2, 5.0);
  const NoiseSchedule s = NoiseSchedule::linear(3);
  SamplerConfig greedy = base_config(8);
  greedy.greedy = true;
  SamplerConfig cold = base_config(8);
  cold.temperature = 1e-6;
  Trajectory lat(3, 8, 4);
  Rng a(1), b(1);
  CHECK(reverse_step(model, lat, 3, s, greedy, a).x0_pred == reverse_step(model, lat, 3, s, cold, b).x0_pred);
}

TEST_CASE("block sampler") {
  const auto model = random_model(5, 3);
  const NoiseSchedule s = NoiseSchedule::linear(8);
  SamplerConfig c = base_config(10);
  c.seed = 9;
  const GenerationTrace a = sample_caddi(model, s, c);
  CHECK(a.model_calls == 8);
  CHECK(a.steps.back().t == 1);
  for (TokenId v : a.x0) CHECK(v < 4);
  for (std::size_t j = 0; j < 10; ++j) CHECK(a.latents.at(8, j) == 4);
  const GenerationTrace b = sample_caddi(model, s, c);
  CHECK(a.x0 == b.x0);
  CHECK(a.latents == b.latents);

  const NoiseSchedule one = NoiseSchedule::linear(1);
  CHECK(sample_caddi(model, one, c).model_calls == 1);

  c.n_steps = 3;
  const GenerationTrace skip = sample_caddi(model, s, c);
  CHECK(skip.model_calls == 3);
  CHECK(skip.steps.size() == 3);

  c.n_steps = 0;
  c.vocab_real = 7;
  CHECK_THROWS_AS(sample_caddi(model, s, c), Error);
}

TEST_CASE("skipping counts model calls") {
  const auto model = random_model(5, 3);
  const NoiseSchedule s = NoiseSchedule::linear(64);
  SamplerConfig c = base_config(4);
  c.n_steps = 8;
  CHECK(sample_caddi(model, s, c).model_calls == 8);
}

TEST_CASE("token-causal and recomposed block sampling") {
  const auto model = random_model(5, 4);
  const NoiseSchedule s = NoiseSchedule::linear(6);
  SamplerConfig c = base_config(5);
  c.context.attention = MaskMode::token_causal;
  c.context.compression = Compression::recompose;
  const GenerationTrace tr = sample_caddi(model, s, c);
  for (TokenId v : tr.x0) CHECK(v < 4);
}

TEST_CASE("uniform kernel prior is not masked") {
  const auto model = random_model(5, 4);
  const NoiseSchedule s = NoiseSchedule::linear(4);
  SamplerConfig c = base_config(12);
  c.kernel = KernelKind::uniform;
  const GenerationTrace tr = sample_caddi(model, s, c);
  for (int t = 0; t <= 4; ++t) {
    for (std::size_t j = 0; j < 12; ++j) CHECK(tr.latents.at(t, j) < 4);
  }
}

TEST_CASE("autoregressive decoding call counts and speculation") {
  const auto model = random_model(5, 6, 10.0);
  const NoiseSchedule s = NoiseSchedule::linear(4);
  SamplerConfig c = base_config(6);
  c.mode = SamplerMode::caddi_ar;
  c.context.attention = MaskMode::token_causal;
  c.context.autoregressive = true;
  c.greedy = true;
  const GenerationTrace naive = sample_caddi_ar(model, s, c);
  CHECK(naive.model_calls == 6 * 4);

  SamplerConfig sc = c;
  sc.speculative = true;
  const GenerationTrace spec = sample_caddi_ar(model, s, sc);
  CHECK(spec.x0 == naive.x0);
  CHECK(spec.latents == naive.latents);
  CHECK(spec.model_calls <= naive.model_calls);
  CHECK(spec.model_calls >= 4);

  Trajectory lat(4, 6, 4);
  Rng rng(1);
  const StepResult ref = reverse_step(model, lat, 4, s, c, rng);
  const SpeculativeResult hit = speculative_step(model, lat, 4, ref.x0_pred, c, rng);
  CHECK(hit.accepted == 6);
  CHECK(hit.calls == 1);
  CHECK(hit.x0_pred == ref.x0_pred);

  TokenSequence wrong = ref.x0_pred;
  wrong[0] = (wrong[0] + 1) % 4;
  const SpeculativeResult miss = speculative_step(model, lat, 4, wrong, c, rng);
  CHECK(miss.accepted == 0);
  CHECK(miss.calls == 6);
  CHECK(miss.x0_pred == ref.x0_pred);

  SamplerConfig thr = c;
  thr.verify = VerifyPolicy::threshold;
  thr.p_min = 1.0;
  CHECK(speculative_step(model, lat, 4, ref.x0_pred, thr, rng).accepted == 0);
}

TEST_CASE("a single step of CaDDi-AR is left-to-right language modelling") {
  const auto model = random_model(5, 7, 10.0);
  const NoiseSchedule s = NoiseSchedule::linear(1);
  SamplerConfig c = base_config(5);
  c.mode = SamplerMode::caddi_ar;
  c.context.attention = MaskMode::token_causal;
  c.context.autoregressive = true;
  c.greedy = true;
  const GenerationTrace tr = sample_caddi_ar(model, s, c);
  CHECK(tr.model_calls == 5);
  TokenSequence block(5, 4);
  const Trajectory lat(1, 5, 4);
  for (std::size_t i = 0; i < 5; ++i) {
    const ModelInput in = make_model_input(lat, 1, c.context, 4, block);
    const auto logits = model.logits(in.context, in.mask);
    const std::size_t row = prediction_row(in, c.context, i);
    std::size_t best = 0;
    for (std::size_t v = 1; v < 4; ++v) {
      if (logits[row * 5 + v] > logits[row * 5 + best]) best = v;
    }
    block[i] = static_cast<TokenId>(best);
  }
  CHECK(tr.x0 == block);
}

TEST_CASE("Markov reverse step") {
  const NoiseSchedule s = NoiseSchedule::linear(4);
  Rng rng(5);
  const TokenSequence clean = {0, 1, 2}, pred = {3, 3, 3};
  CHECK(markov_reverse_step(clean, pred, 3, 2, s, 4, rng) == clean);
  const TokenSequence masked = {4, 4, 4};
  CHECK(markov_reverse_step(masked, pred, 1, 0, s, 4, rng) == pred);
  std::size_t unmasked = 0;
  const std::size_t n = 100000;
  const TokenSequence one = {4};
  const TokenSequence p1 = {2};
  for (std::size_t i = 0; i < n; ++i) unmasked += markov_reverse_step(one, p1, 2, 1, s, 4, rng)[0] != 4;
  CHECK(std::abs(static_cast<double>(unmasked) / n - 0.5) < 0.01);
}

TEST_CASE("Markov baseline sampling resolves every mask") {
  const auto model = random_model(5, 8);
  const NoiseSchedule s = NoiseSchedule::linear(8);
  SamplerConfig c = base_config(10);
  c.mode = SamplerMode::markov_baseline;
  c.context.window = 1;
  const GenerationTrace tr = sample_markov_baseline(model, s, c);
  for (TokenId v : tr.x0) CHECK(v < 4);
  for (int t = 1; t <= 8; ++t) {
    for (std::size_t j = 0; j < 10; ++j) {
      if (tr.latents.at(t, j) != 4) CHECK(tr.latents.at(t - 1, j) == tr.latents.at(t, j));
    }
  }
}

TEST_CASE("prompts stay clamped") {
  const auto model = random_model(5, 9);
  const NoiseSchedule s = NoiseSchedule::linear(6);
  for (SamplerMode mode : {SamplerMode::caddi, SamplerMode::caddi_ar, SamplerMode::markov_baseline}) {
    SamplerConfig c = base_config(8);
    c.mode = mode;
    if (mode == SamplerMode::caddi_ar) {
      c.context.attention = MaskMode::token_causal;
      c.context.autoregressive = true;
    }
    c.prompt = {{2, 3}, {3, 0}};
    c.gamma = 2.0;
    const GenerationTrace tr = generate(model, s, c);
    for (int t = 0; t <= 6; ++t) {
      CHECK(tr.latents.at(t, 2) == 3);
      CHECK(tr.latents.at(t, 3) == 0);
    }
  }
  SamplerConfig bad = base_config(4);
  bad.prompt = {{9, 1}};
  CHECK_THROWS_AS(generate(model, s, bad), Error);
}

TEST_CASE("guidance scale one reproduces unguided sampling") {
  const auto model = random_model(5, 10);
  const NoiseSchedule s = NoiseSchedule::linear(5);
  SamplerConfig c = base_config(8);
  c.prompt = {{0, 1}};
  const GenerationTrace a = generate(model, s, c);
  c.gamma = 1.0;
  CHECK(generate(model, s, c).x0 == a.x0);
  c.gamma = 3.0;
  const GenerationTrace g = generate(model, s, c);
  CHECK(g.model_calls == 2 * a.model_calls);
}

TEST_CASE("config validation") {
  SamplerConfig c = base_config(4);
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(4), Error);
  c = base_config(4);
  c.speculative = true;
  CHECK_THROWS_AS(c.validate(4), Error);
  c = base_config(4);
  c.n_steps = 5;
  CHECK_THROWS_AS(c.validate(4), Error);
  c = base_config(4);
  c.mode = SamplerMode::caddi_ar;
  CHECK_THROWS_AS(c.validate(4), Error);
}
