#include "caddi/selftest.hpp"

#include <cmath>
#include <functional>
#include <string>

#include "caddi/checkpoint.hpp"
#include "caddi/evaluation.hpp"
#include "caddi/sampler.hpp"
#include "caddi/training.hpp"

namespace caddi {

namespace {

struct Suite {
  std::ostream& out;
  int failures = 0;

  void check(const std::string& name, const std::function<bool()>& fn) {
    bool ok = false;
    std::string note;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      note = std::string(" (") + e.what() + ")";
    }
    out << (ok ? "PASS " : "FAIL ") << name << note << "\n";
    if (!ok) ++failures;
  }
};

Parameters<double> random_model(int vocab_aug, std::uint64_t seed) {
  ModelConfig c = ModelConfig::make(2, 16, 2, vocab_aug);
  Parameters<double> p = init_params<double>(c, seed);
  for (double& v : p.data) v *= 10.0;
  return p;
}

}  // namespace

int run_selftest(std::ostream& out) {
  Suite s{out};

  s.check("linear schedule cumulative equals t/T", [] {
    for (int T : {1, 4, 64, 1000}) {
      const NoiseSchedule sch = NoiseSchedule::linear(T);
      std::vector<double> a(sch.alpha.begin() + 1, sch.alpha.end());
      const auto cum = cumulative_from_independent(a);
      for (int t = 1; t <= T; ++t) {
        if (std::abs(cum[static_cast<std::size_t>(t - 1)] - static_cast<double>(t) / T) > 1e-12) return false;
      }
    }
    return true;
  });

  s.check("stepwise schedule reconstructs cumulative curve", [] {
    const NoiseSchedule sch = NoiseSchedule::linear(64);
    std::vector<double> beta(sch.beta.begin() + 1, sch.beta.end());
    const auto back = cumulative_from_stepwise(beta);
    for (std::size_t t = 0; t < back.size(); ++t) {
      if (std::abs(back[t] - sch.alpha_star[t + 1]) > 1e-12) return false;
    }
    return true;
  });

  s.check("kernel rows are distributions", [] {
    for (KernelKind k : {KernelKind::absorbing, KernelKind::uniform}) {
      const MarginalKernel ker(k, 7);
      for (double a : {0.0, 0.3, 1.0}) {
        for (TokenId v = 0; v < 7; ++v) {
          double sum = 0.0;
          for (double p : ker.row(v, a)) {
            if (p < 0.0) return false;
            sum += p;
          }
          if (std::abs(sum - 1.0) > 1e-12) return false;
        }
      }
    }
    return true;
  });

  s.check("matched Markov and non-Markov MI profiles coincide", [] {
    const NoiseSchedule sch = NoiseSchedule::linear(16);
    const std::vector<double> p0(8, 1.0 / 8);
    const auto a = mi_decay_analytic(sch, ProcessKind::markov, p0);
    const auto b = mi_decay_analytic(sch, ProcessKind::nonmarkov, p0);
    for (std::size_t t = 0; t < a.decay.size(); ++t) {
      if (std::abs(a.decay[t] - b.decay[t]) > 1e-12) return false;
    }
    return true;
  });

  s.check("recompose is idempotent", [] {
    const NoiseSchedule sch = NoiseSchedule::linear(8);
    const MarginalKernel ker(KernelKind::absorbing, 5);
    Rng rng(3);
    const TokenSequence x0 = {0, 1, 2, 3, 4, 0, 1};
    const Trajectory traj = forward_sample(x0, sch, ker, rng);
    const Trajectory once = recompose_rows(traj, 1, ker.mask_id());
    return recompose_rows(once, 1, ker.mask_id()) == once;
  });

  s.check("2D rotary reduces to 1D at equal timesteps", [] {
    const ModelConfig c = ModelConfig::make(1, 32, 2, 4);
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> q(16), k(16);
      for (auto& v : q) v = rng.normal(0, 1);
      for (auto& v : k) v = rng.normal(0, 1);
      const int i = static_cast<int>(rng.below(100)), j = static_cast<int>(rng.below(100));
      const int t = static_cast<int>(rng.below(64));
      auto q2 = q, k2 = k, q1 = q, k1 = k;
      rotary_2d<double>(q2, i, t, c);
      rotary_2d<double>(k2, j, t, c);
      rotary_1d<double>(q1, i, c);
      rotary_1d<double>(k1, j, c);
      double d2 = 0, d1 = 0;
      for (int d = 0; d < 16; ++d) {
        d2 += q2[static_cast<std::size_t>(d)] * k2[static_cast<std::size_t>(d)];
        d1 += q1[static_cast<std::size_t>(d)] * k1[static_cast<std::size_t>(d)];
      }
      if (std::abs(d2 - d1) > 1e-6) return false;
    }
    return true;
  });

  s.check("token-causal logits ignore later positions", [] {
    const Parameters<double> p = random_model(6, 5);
    FlatContext ctx;
    ctx.append_block(TokenSequence{0, 1, 2, 3}, 2);
    ctx.append_block(TokenSequence{4, 5, 1, 0}, 1);
    const AttentionMask m = build_attention_mask(ctx, MaskMode::token_causal);
    const auto a = forward(p, ctx, m);
    ctx.tokens[6] = 3;
    const auto b = forward(p, ctx, m);
    for (std::size_t i = 0; i < 6 * 6; ++i) {
      if (a[i] != b[i]) return false;
    }
    return true;
  });

  s.check("guidance output is normalized", [] {
    const std::vector<double> c = {0.1, -2.0, 1.5}, u = {0.3, 0.2, -1.0};
    double sum = 0.0;
    for (double v : cfg_distribution(c, u, 3.0)) sum += v;
    return std::abs(sum - 1.0) < 1e-9;
  });

  s.check("checkpoint round trip is byte exact", [] {
    Checkpoint ck;
    ck.params = init_params<float>(ModelConfig::make(1, 8, 2, 5), 9);
    ck.meta["T"] = "4";
    const std::string a = serialize_checkpoint(ck);
    return serialize_checkpoint(parse_checkpoint(a)) == a;
  });

  s.check("absorbing loss matches the general ELBO", [] {
    const Parameters<double> p = random_model(6, 21);
    const TransformerDenoiser<double> model(p);
    const NoiseSchedule sch = NoiseSchedule::linear(4);
    DenoiseSetup setup;
    setup.context.window = 2;
    const TokenSequence x0 = {0, 4, 2, 2};
    Rng rng(4);
    const Trajectory traj = forward_sample(x0, sch, MarginalKernel(KernelKind::absorbing, 5), rng);
    const double loss = loss_absorb(model, x0, traj, sch, setup).total;
    const double elbo = elbo_trajectory(model, x0, traj, sch, setup).total;
    return std::abs(loss + elbo) / 4.0 < 1e-6;
  });

  s.check("reverse-mode gradients match finite differences", [] {
    const Parameters<double> p = init_params<double>(ModelConfig::make(2, 16, 2, 6), 33);
    const NoiseSchedule sch = NoiseSchedule::linear(3);
    DenoiseSetup setup;
    setup.context.window = 2;
    const TokenSequence x0 = {1, 3, 0};
    Rng rng(8);
    const Trajectory traj = forward_sample(x0, sch, MarginalKernel(KernelKind::absorbing, 5), rng);
    const auto res = grad_check(
        p, [&](const Parameters<double>& q, Parameters<double>* g) {
          return loss_absorb_grad(q, x0, traj, sch, setup, g);
        },
        1e-5, 4, 1);
    return res.max_rel_error <= 1e-3;
  });

  s.check("Markov reverse step never alters unmasked tokens", [] {
    const NoiseSchedule sch = NoiseSchedule::linear(8);
    Rng rng(2);
    const TokenSequence x = {0, 5, 1, 5, 2}, pred = {3, 3, 3, 3, 3};
    for (int i = 0; i < 200; ++i) {
      const auto y = markov_reverse_step(x, pred, 4, 3, sch, 5, rng);
      if (y[0] != 0 || y[2] != 1 || y[4] != 2) return false;
    }
    return true;
  });

  out << (s.failures == 0 ? "selftest: all checks passed\n"
                          : "selftest: " + std::to_string(s.failures) + " check(s) failed\n");
  return s.failures;
}

}  // namespace caddi
