// Acceptance suite: one PASS/FAIL line per criterion. Arguments select
// criteria by number (default: all). Exit status is the number of failures.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "caddi/evaluation.hpp"
#include "caddi/sampler.hpp"
#include "caddi/schedule.hpp"
#include "caddi/training.hpp"

using namespace caddi;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a = 0, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// ---------------------------------------------------------------------------
// Desk-scale source (criteria 6, 8-10) and the model shared by 8 and 10.

constexpr std::size_t kVocab = 8;
constexpr std::size_t kSeqLen = 32;
constexpr int kT = 16;

// Circulant chain: a -> a+1 (0.6), a+2 (0.3), a+5 (0.1).
MarkovSource desk_source() {
  std::vector<std::vector<double>> P(kVocab, std::vector<double>(kVocab, 0.0));
  for (std::size_t a = 0; a < kVocab; ++a) {
    P[a][(a + 1) % kVocab] += 0.6;
    P[a][(a + 2) % kVocab] += 0.3;
    P[a][(a + 5) % kVocab] += 0.1;
  }
  return MarkovSource(P);
}

struct DeskData {
  MarkovSource source = desk_source();
  TokenSequence train;
  std::vector<TokenSequence> held_out;
  std::unique_ptr<NgramOracle> oracle;
};

DeskData& desk_data() {
  static std::unique_ptr<DeskData> d;
  if (!d) {
    d = std::make_unique<DeskData>();
    Rng rng(2024);
    d->train = d->source.sample(300000, rng);
    Rng held(7);
    for (int i = 0; i < 128; ++i) d->held_out.push_back(d->source.sample(kSeqLen, held));
    d->oracle = std::make_unique<NgramOracle>(kVocab, 3);
    d->oracle->fit(d->train);
  }
  return *d;
}

TrainConfig desk_config() {
  TrainConfig c;
  c.schedule = NoiseSchedule::linear(kT);
  c.setup.context.window = 5;
  c.setup.context.compression = Compression::recompose;
  c.model = ModelConfig::make(2, 64, 4, static_cast<int>(kVocab) + 1);
  c.seq_len = kSeqLen;
  c.batch_size = 16;
  c.learning_rate = 1e-3;
  c.log_every = 200;
  c.seed = 1;
  return c;
}

// Sizes the step count so the run ends near budget seconds, with the wall
// clock cap as a backstop.
TrainResult train_within(TrainConfig c, std::span<const TokenId> corpus, double budget) {
  TrainConfig probe = c;
  probe.total_steps = 10;
  probe.warmup_steps = 1;
  probe.log_every = 1000;
  const TrainResult timing = train(probe, corpus);
  const double per_step = timing.seconds / timing.steps_done;
  c.total_steps = std::max(50, static_cast<int>(0.92 * (budget - timing.seconds) / per_step));
  c.warmup_steps = std::min(100, c.total_steps / 10);
  c.max_seconds = budget - timing.seconds;
  return train(c, corpus);
}

struct DeskModel {
  TrainResult result;
  double seconds = 0.0;  // including the timing probe
};

DeskModel& desk_model() {
  static std::optional<DeskModel> m;
  if (!m) {
    const auto start = Clock::now();
    DeskModel dm;
    dm.result = train_within(desk_config(), desk_data().train, 570.0);
    dm.seconds = seconds_since(start);
    std::cout << "  desk model: " << dm.result.steps_done << " steps in " << dm.seconds << " s\n";
    m = std::move(dm);
  }
  return *m;
}

SamplerConfig desk_sampler(const ContextSpec& context) {
  SamplerConfig s;
  s.context = context;
  s.length = kSeqLen;
  s.vocab_real = kVocab;
  return s;
}

// ---------------------------------------------------------------------------

Outcome schedule_correspondence() {
  double worst_cum = 0, worst_trip = 0;
  for (int T : {4, 64}) {
    const NoiseSchedule s = NoiseSchedule::linear(T);
    const std::vector<double> a(s.alpha.begin() + 1, s.alpha.end());
    const auto cum = cumulative_from_independent(a);
    for (int t = 1; t <= T; ++t) {
      worst_cum = std::max(worst_cum, std::abs(cum[static_cast<std::size_t>(t - 1)] - double(t) / T));
    }
    const auto beta = stepwise_from_cumulative(cum);
    const auto back = cumulative_from_stepwise(beta);
    for (std::size_t i = 0; i < back.size(); ++i) worst_trip = std::max(worst_trip, std::abs(back[i] - cum[i]));
  }
  return {worst_cum <= 1e-12 && worst_trip <= 1e-12,
          fmt("max |a*-t/T| = %.2e, beta round trip %.2e", worst_cum, worst_trip)};
}

Outcome mi_decay() {
  const NoiseSchedule s = NoiseSchedule::linear(4);
  const std::vector<double> p0(8, 1.0 / 8);
  double worst = 0;
  for (ProcessKind proc : {ProcessKind::nonmarkov, ProcessKind::markov}) {
    const MIProfile exact = mi_decay_analytic(s, proc, p0);
    const MIProfile mc = mi_decay_montecarlo(s, KernelKind::absorbing, proc, p0, 100000, 11);
    for (std::size_t t = 0; t < exact.decay.size(); ++t) worst = std::max(worst, std::abs(exact.decay[t] - mc.decay[t]));
  }
  const auto a = mi_decay_analytic(s, ProcessKind::markov, p0);
  const auto b = mi_decay_analytic(s, ProcessKind::nonmarkov, p0);
  double gap = 0;
  for (std::size_t t = 0; t < a.decay.size(); ++t) gap = std::max(gap, std::abs(a.decay[t] - b.decay[t]));
  return {worst <= 0.01 && gap <= 1e-12, fmt("max |D_mc - D| = %.4f, matched profile gap %.1e", worst, gap)};
}

Outcome elbo_equivalence() {
  auto p = init_params<double>(ModelConfig::make(2, 16, 2, 6), 3);
  for (double& v : p.data) v *= 5.0;
  const TransformerDenoiser<double> model(p);
  const NoiseSchedule s = NoiseSchedule::linear(4);
  const MarginalKernel kernel(KernelKind::absorbing, 5);
  DenoiseSetup setup;
  setup.context.window = 2;
  Rng rng(5);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    TokenSequence x0(4);
    for (auto& v : x0) v = static_cast<TokenId>(rng.below(5));
    const Trajectory traj = forward_sample(x0, s, kernel, rng);
    const double loss = loss_absorb(model, x0, traj, s, setup).total;
    const double elbo = elbo_trajectory(model, x0, traj, s, setup).total;
    worst = std::max(worst, std::abs(elbo + loss) / 4.0);
  }
  return {worst <= 1e-6, fmt("max |elbo + loss| per token over 200 trajectories = %.2e", worst)};
}

Outcome gradient_fidelity() {
  const Parameters<double> p = init_params<double>(ModelConfig::make(2, 32, 4, 6), 17);
  const NoiseSchedule s = NoiseSchedule::linear(4);
  DenoiseSetup setup;
  setup.context.window = 2;
  const TokenSequence x0 = {1, 4, 0, 2, 3, 1};
  Rng rng(9);
  const Trajectory traj = forward_sample(x0, s, MarginalKernel(KernelKind::absorbing, 5), rng);
  const auto res = grad_check(
      p, [&](const Parameters<double>& q, Parameters<double>* g) { return loss_absorb_grad(q, x0, traj, s, setup, g); },
      1e-5, 20, 1);
  return {res.max_rel_error <= 1e-3,
          fmt("max relative error %.2e over %.0f entries", res.max_rel_error, double(res.checked)) + " (worst " +
              res.worst_tensor + ")"};
}

Outcome rotary_reduction() {
  const ModelConfig c = ModelConfig::make(2, 64, 4, 9);
  Rng rng(21);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> q(static_cast<std::size_t>(c.d_head())), k(q.size());
    for (auto& v : q) v = rng.normal(0, 1);
    for (auto& v : k) v = rng.normal(0, 1);
    const int i = static_cast<int>(rng.below(512)), j = static_cast<int>(rng.below(512));
    const int t = static_cast<int>(rng.below(1000));
    auto q2 = q, k2 = k, q1 = q, k1 = k;
    rotary_2d<double>(q2, i, t, c);
    rotary_2d<double>(k2, j, t, c);
    rotary_1d<double>(q1, i, c);
    rotary_1d<double>(k1, j, c);
    double d2 = 0, d1 = 0;
    for (std::size_t d = 0; d < q.size(); ++d) {
      d2 += q2[d] * k2[d];
      d1 += q1[d] * k1[d];
    }
    worst = std::max(worst, std::abs(d2 - d1));
  }
  return {worst <= 1e-6, fmt("max score gap over 1000 pairs = %.2e", worst)};
}

Outcome speculative_soundness() {
  const DeskData& data = desk_data();
  TrainConfig c;
  c.schedule = NoiseSchedule::linear(kT);
  c.setup.context.window = 2;
  c.setup.context.attention = MaskMode::token_causal;
  c.setup.context.autoregressive = true;
  c.model = ModelConfig::make(1, 16, 2, static_cast<int>(kVocab) + 1);
  c.seq_len = kSeqLen;
  c.batch_size = 8;
  c.learning_rate = 3e-3;
  c.warmup_steps = 10;
  c.total_steps = 150;
  c.log_every = 1000;
  c.seed = 3;
  const TrainResult r = train(c, data.train);
  const TransformerDenoiser<float> model(r.params);
  SamplerConfig s = desk_sampler(c.setup.context);
  s.mode = SamplerMode::caddi_ar;
  s.greedy = true;
  int identical = 0, cheaper = 0;
  std::size_t calls = 0;
  for (int seed = 0; seed < 100; ++seed) {
    s.seed = static_cast<std::uint64_t>(seed);
    s.speculative = false;
    const GenerationTrace naive = sample_caddi_ar(model, c.schedule, s);
    s.speculative = true;
    const GenerationTrace spec = sample_caddi_ar(model, c.schedule, s);
    if (spec.x0 == naive.x0 && spec.latents == naive.latents) ++identical;
    if (spec.model_calls < kSeqLen * kT) ++cheaper;
    calls += spec.model_calls;
  }
  return {identical == 100 && cheaper >= 95,
          fmt("%.0f/100 bit-identical, %.0f/100 below L*T calls, mean calls %.1f of %.0f", identical, cheaper,
              double(calls) / 100.0, double(kSeqLen * kT))};
}

Outcome remask_contrast() {
  auto p = init_params<double>(ModelConfig::make(2, 16, 2, 9), 4);
  for (double& v : p.data) v *= 10.0;
  const TransformerDenoiser<double> model(p);
  const NoiseSchedule s = NoiseSchedule::linear(kT);
  const TokenId mask = static_cast<TokenId>(kVocab);
  const std::size_t L = 64;

  SamplerConfig base;
  base.mode = SamplerMode::markov_baseline;
  base.context.window = 1;
  base.length = L;
  std::size_t steps = 0, altered = 0;
  for (std::uint64_t seed = 0; steps < 10000; ++seed) {
    base.seed = seed;
    const GenerationTrace tr = sample_markov_baseline(model, s, base);
    for (int t = s.T; t >= 1; --t, ++steps) {
      for (std::size_t i = 0; i < L; ++i) {
        if (tr.latents.at(t, i) != mask && tr.latents.at(t - 1, i) != tr.latents.at(t, i)) ++altered;
      }
    }
  }

  SamplerConfig cd;
  cd.context.window = 5;
  cd.length = L;
  std::size_t eligible = 0, remasked = 0, runs = 0, runs_remasked = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    cd.seed = seed;
    const GenerationTrace tr = sample_caddi(model, s, cd);
    bool any = false;
    for (int t = s.T; t >= 2; --t) {  // alpha_{t-1} >= 1/2 exactly when t >= 2
      std::size_t unmasked = 0, hit = 0;
      for (std::size_t i = 0; i < L; ++i) {
        if (tr.latents.at(t, i) == mask) continue;
        ++unmasked;
        if (tr.latents.at(t - 1, i) == mask) ++hit;
      }
      if (unmasked == 0) continue;
      ++eligible;
      if (hit) ++remasked;
      any = any || hit;
    }
    ++runs;
    if (any) ++runs_remasked;
  }
  const double step_rate = double(remasked) / double(eligible);
  const double run_rate = double(runs_remasked) / double(runs);
  return {altered == 0 && step_rate >= 0.99 && run_rate >= 0.99,
          fmt("baseline altered %.0f unmasked tokens in %.0f steps; CaDDi re-masked in %.4f of steps, %.3f of runs",
              double(altered), double(steps), step_rate, run_rate)};
}

Outcome desk_learning() {
  const DeskData& data = desk_data();
  DeskModel& dm = desk_model();
  const TransformerDenoiser<float> model(dm.result.params);
  const TrainConfig c = desk_config();
  const BpdReport r = bpd_bound(model, data.held_out, c.schedule, c.setup, 4, 99);
  const double H = data.source.entropy_rate_bits();
  return {r.bpd <= H + 0.5 && r.bpd >= H - 3 * r.std_error && dm.seconds <= 600.0,
          fmt("bpd %.4f +- %.4f vs H = %.4f after %.0f s training", r.bpd, r.std_error, H, dm.seconds)};
}

// Truncated CaDDi forgets older latents, injected ones included; the
// re-composed desk model carries injected tokens forward instead.
Outcome robustness_trend() {
  const auto start = Clock::now();
  const DeskData& data = desk_data();

  TrainConfig cc = desk_config();
  cc.setup.context.compression = Compression::truncate;
  cc.seed = 4;
  const TransformerDenoiser<float> caddi_model(train_within(cc, data.train, 300.0).params);

  TrainConfig bc = desk_config();
  bc.setup.process = ProcessKind::markov;
  bc.setup.context.window = 1;
  bc.seed = 2;
  const TransformerDenoiser<float> base_model(train_within(bc, data.train, 120.0).params);

  SamplerConfig cs = desk_sampler(cc.setup.context);
  SamplerConfig bs = desk_sampler(bc.setup.context);
  bs.mode = SamplerMode::markov_baseline;
  const int t_inject = kT / 2;
  std::size_t wins = 0;
  double dcad = 0, dbase = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const InjectionReport a = noise_injection_run(caddi_model, cc.schedule, cs, *data.oracle, t_inject, 0.1, 16, seed);
    const InjectionReport b = noise_injection_run(base_model, bc.schedule, bs, *data.oracle, t_inject, 0.1, 16, seed);
    const double da = a.injected.mean_perplexity - a.clean.mean_perplexity;
    const double db = b.injected.mean_perplexity - b.clean.mean_perplexity;
    dcad += da / 20;
    dbase += db / 20;
    if (da < db) ++wins;
  }
  const double p = sign_test_p(wins, 20);
  return {p < 0.05 && seconds_since(start) < 900.0,
          fmt("mean degradation CaDDi %.4f vs Markov %.4f; wins %.0f/20, sign test p = %.2e", dcad, dbase,
              double(wins), p)};
}

Outcome step_budget_trend() {
  const DeskData& data = desk_data();
  const TrainConfig dc = desk_config();
  const TransformerDenoiser<float> model(desk_model().result.params);
  SamplerConfig s = desk_sampler(dc.setup.context);
  std::vector<double> med;
  std::vector<Interval> ci;
  for (int n : {4, 8, 16}) {
    s.n_steps = n;
    std::vector<double> ppl;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      s.seed = 1000 + seed;
      const TokenSequence x = generate(model, dc.schedule, s).x0;
      ppl.push_back(data.oracle->perplexity(std::vector<TokenSequence>{x}));
    }
    med.push_back(median(ppl));
    ci.push_back(median_bootstrap_ci(ppl, 2000, 0.95, 5));
  }
  const bool ok = med[1] <= ci[0].hi && med[2] <= ci[1].hi;
  return {ok, fmt("median oracle perplexity %.4f [%.4f, %.4f] -> ", med[0], ci[0].lo, ci[0].hi) +
                  fmt("%.4f [%.4f, %.4f] -> ", med[1], ci[1].lo, ci[1].hi) +
                  fmt("%.4f [%.4f, %.4f]", med[2], ci[2].lo, ci[2].hi)};
}

Outcome cfg_exactness() {
  Rng rng(8);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> c(9), u(9);
    for (auto& v : c) v = rng.normal(0, 3);
    for (auto& v : u) v = rng.normal(0, 3);
    const auto g = cfg_distribution(c, u, 1.0);
    double mx = *std::max_element(c.begin(), c.end()), z = 0;
    for (double v : c) z += std::exp(v - mx);
    for (std::size_t k = 0; k < c.size(); ++k) worst = std::max(worst, std::abs(g[k] - std::exp(c[k] - mx) / z));
  }
  const std::vector<double> cond = {std::log(0.8), std::log(0.2)}, uncond = {std::log(0.5), std::log(0.5)};
  const auto g2 = cfg_distribution(cond, uncond, 2.0);
  const double e0 = 0.64 / 0.68, e1 = 0.04 / 0.68;
  const double ex = std::max(std::abs(g2[0] - e0), std::abs(g2[1] - e1));
  return {worst <= 1e-9 && ex <= 1e-9,
          fmt("gamma=1 max gap %.1e; gamma=2 example (%.6f, %.6f), gap %.1e", worst, g2[0], g2[1], ex)};
}

struct Criterion {
  int id;
  const char* name;
  double max_seconds;  // 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "schedule correspondence", 1, schedule_correspondence},
      {2, "MI decay", 60, mi_decay},
      {3, "ELBO equivalence", 10, elbo_equivalence},
      {4, "gradient fidelity", 120, gradient_fidelity},
      {5, "2D rotary reduction", 1, rotary_reduction},
      {6, "semi-speculative soundness", 300, speculative_soundness},
      {7, "failure-to-remask contrast", 60, remask_contrast},
      {8, "desk-scale learning", 0, desk_learning},
      {9, "robustness trend", 900, robustness_trend},
      {10, "step-budget trend", 0, step_budget_trend},
      {11, "CFG exactness", 0, cfg_exactness},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::stoi(argv[i]));
  int failures = 0;
  for (const Criterion& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(start);
    if (c.max_seconds > 0 && secs >= c.max_seconds) {
      o.pass = false;
      o.detail += fmt(" [over %.0f s budget]", c.max_seconds);
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.id << " " << c.name << ": " << o.detail
              << fmt(" (%.2f s)", secs) << std::endl;
    if (!o.pass) ++failures;
  }
  return failures;
}
