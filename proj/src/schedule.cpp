#include "caddi/schedule.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <string>

namespace caddi {

namespace {

void check_probability(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw Error(std::string(what) + " value " + std::to_string(v) + " outside [0,1]");
  }
}

}  // namespace

std::vector<double> cumulative_from_independent(std::span<const double> alpha) {
  for (double a : alpha) check_probability(a, "alpha");
  std::vector<double> out(alpha.size());
  double acc = 1.0;
  for (std::size_t i = alpha.size(); i-- > 0;) {
    acc *= alpha[i];
    out[i] = acc;
  }
  return out;
}

std::vector<double> stepwise_from_cumulative(std::span<const double> alpha_star) {
  std::vector<double> beta(alpha_star.size());
  double prev = 0.0;
  bool absorbed = false;
  for (std::size_t i = 0; i < alpha_star.size(); ++i) {
    check_probability(alpha_star[i], "alpha_star");
    if (alpha_star[i] < prev) throw Error("cumulative schedule must be non-decreasing");
    if (absorbed || prev >= 1.0) {
      absorbed = true;
      beta[i] = 1.0;
    } else {
      beta[i] = 1.0 - (1.0 - alpha_star[i]) / (1.0 - prev);
    }
    prev = alpha_star[i];
  }
  return beta;
}

std::vector<double> cumulative_from_stepwise(std::span<const double> beta) {
  std::vector<double> out(beta.size());
  double keep = 1.0;
  for (std::size_t i = 0; i < beta.size(); ++i) {
    keep *= 1.0 - beta[i];
    out[i] = 1.0 - keep;
  }
  return out;
}

NoiseSchedule NoiseSchedule::from_independent(std::span<const double> alpha, double alpha0) {
  if (alpha.empty()) throw Error("schedule horizon T must be at least 1");
  check_probability(alpha0, "alpha0");
  NoiseSchedule s;
  s.T = static_cast<int>(alpha.size());
  s.alpha.assign(1, alpha0);
  s.alpha.insert(s.alpha.end(), alpha.begin(), alpha.end());
  const std::vector<double> cum = cumulative_from_independent(alpha);
  s.alpha_star.assign(1, 0.0);
  s.alpha_star.insert(s.alpha_star.end(), cum.begin(), cum.end());
  const std::vector<double> beta = stepwise_from_cumulative(cum);
  s.beta.assign(1, 0.0);
  s.beta.insert(s.beta.end(), beta.begin(), beta.end());
  return s;
}

NoiseSchedule NoiseSchedule::linear(int T) {
  if (T < 1) throw Error("schedule horizon T must be at least 1");
  std::vector<double> alpha(static_cast<std::size_t>(T));
  for (int t = 1; t < T; ++t) alpha[static_cast<std::size_t>(t - 1)] = static_cast<double>(t) / (t + 1);
  alpha.back() = 1.0;
  NoiseSchedule s = from_independent(alpha, 0.0);
  // The telescoping product is exact in real arithmetic; store it exactly.
  for (int t = 1; t <= T; ++t) s.alpha_star[static_cast<std::size_t>(t)] = static_cast<double>(t) / T;
  return s;
}

MarginalKernel::MarginalKernel(KernelKind kind, std::size_t vocab_size) : kind_(kind), vocab_(vocab_size) {
  if (vocab_size == 0) throw Error("kernel needs a non-empty vocabulary");
}

double MarginalKernel::prob(TokenId x0, double a, TokenId y) const {
  if (kind_ == KernelKind::absorbing) {
    if (y == mask_id()) return a;
    return y == x0 ? 1.0 - a : 0.0;
  }
  const double u = a / static_cast<double>(vocab_);
  return (y == x0 ? 1.0 - a : 0.0) + u;
}

std::vector<double> MarginalKernel::row(TokenId x0, double a) const {
  std::vector<double> r(state_count());
  for (std::size_t y = 0; y < r.size(); ++y) r[y] = prob(x0, a, static_cast<TokenId>(y));
  return r;
}

TokenId corrupt_token(const MarginalKernel& kernel, TokenId x0, double a, Rng& rng) {
  check_probability(a, "noise level");
  if (x0 < 0 || static_cast<std::size_t>(x0) >= kernel.vocab_size()) {
    throw Error("clean token id " + std::to_string(x0) + " is not a real symbol");
  }
  const double u = rng.uniform();
  if (kernel.kind() == KernelKind::absorbing) return u < a ? kernel.mask_id() : x0;
  if (u >= a) return x0;
  return static_cast<TokenId>(rng.below(kernel.vocab_size()));
}

double entropy_nats(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

namespace {

MIProfile finish_profile(std::vector<double> decay, double entropy) {
  MIProfile prof;
  prof.entropy = entropy;
  prof.defined = entropy > 0.0;
  prof.decay = std::move(decay);
  prof.info.resize(prof.decay.size());
  for (std::size_t t = 0; t < prof.decay.size(); ++t) {
    if (!prof.defined) prof.decay[t] = std::numeric_limits<double>::quiet_NaN();
    prof.info[t] = prof.defined ? entropy * (1.0 - prof.decay[t]) : 0.0;
  }
  return prof;
}

}  // namespace

MIProfile mi_decay_analytic(const NoiseSchedule& schedule, ProcessKind process,
                            std::span<const double> p0) {
  const auto T = static_cast<std::size_t>(schedule.T);
  std::vector<double> decay(T + 1, 0.0);
  if (process == ProcessKind::nonmarkov) {
    double acc = 1.0;
    for (std::size_t t = T; t >= 1; --t) {
      acc *= schedule.alpha[t];
      decay[t] = acc;
    }
  } else {
    double keep = 1.0;
    for (std::size_t t = 1; t <= T; ++t) {
      keep *= 1.0 - schedule.beta[t];
      decay[t] = 1.0 - keep;
    }
  }
  return finish_profile(std::move(decay), entropy_nats(p0));
}

MIProfile mi_decay_montecarlo(const NoiseSchedule& schedule, KernelKind kernel_kind,
                              ProcessKind process, std::span<const double> p0,
                              std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw Error("need at least one Monte-Carlo sample");
  const std::size_t V = p0.size();
  const auto T = static_cast<std::size_t>(schedule.T);
  const MarginalKernel kernel(kernel_kind, V);
  Rng rng(seed);
  std::discrete_distribution<int> draw_x0(p0.begin(), p0.end());

  // counts[t][suffix key][x0]
  std::vector<std::map<std::vector<TokenId>, std::vector<std::size_t>>> counts(T + 1);
  std::vector<std::size_t> marginal(V, 0);
  std::vector<TokenId> x(T + 1);

  for (std::size_t n = 0; n < n_samples; ++n) {
    const auto x0 = static_cast<TokenId>(draw_x0(rng.engine()));
    ++marginal[static_cast<std::size_t>(x0)];
    x[0] = x0;
    for (std::size_t s = 1; s <= T; ++s) {
      if (process == ProcessKind::nonmarkov) {
        x[s] = corrupt_token(kernel, x0, schedule.alpha[s], rng);
      } else if (kernel_kind == KernelKind::absorbing && x[s - 1] == kernel.mask_id()) {
        x[s] = x[s - 1];
      } else {
        x[s] = corrupt_token(kernel, x[s - 1], schedule.beta[s], rng);
      }
    }
    for (std::size_t t = 1; t <= T; ++t) {
      std::vector<TokenId> key;
      if (kernel_kind == KernelKind::absorbing) {
        TokenId seen = kernel.mask_id();
        for (std::size_t s = t; s <= T; ++s) {
          if (x[s] != kernel.mask_id()) {
            seen = x[s];
            break;
          }
        }
        key.push_back(seen);
      } else {
        key.assign(x.begin() + static_cast<std::ptrdiff_t>(t), x.end());
      }
      auto& bucket = counts[t][key];
      if (bucket.empty()) bucket.assign(V, 0);
      ++bucket[static_cast<std::size_t>(x0)];
    }
  }

  auto plugin_entropy = [](const std::vector<std::size_t>& c) {
    double total = 0.0;
    for (std::size_t v : c) total += static_cast<double>(v);
    double h = 0.0;
    for (std::size_t v : c) {
      if (v > 0) {
        const double p = static_cast<double>(v) / total;
        h -= p * std::log(p);
      }
    }
    return h;
  };

  const double h0 = plugin_entropy(marginal);
  std::vector<double> decay(T + 1, 0.0);
  for (std::size_t t = 1; t <= T; ++t) {
    double hcond = 0.0;
    for (const auto& [key, c] : counts[t]) {
      double m = 0.0;
      for (std::size_t v : c) m += static_cast<double>(v);
      hcond += m / static_cast<double>(n_samples) * plugin_entropy(c);
    }
    decay[t] = h0 > 0.0 ? hcond / h0 : 0.0;
  }
  return finish_profile(std::move(decay), entropy_nats(p0));
}

}  // namespace caddi
