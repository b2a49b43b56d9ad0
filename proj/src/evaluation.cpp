#include "caddi/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace caddi {

BpdReport bpd_bound(const Denoiser& model, std::span<const TokenSequence> dataset, const NoiseSchedule& schedule,
                    const DenoiseSetup& setup, std::size_t n_mc, std::uint64_t seed) {
  if (dataset.empty()) throw Error("bpd_bound needs at least one sequence");
  if (n_mc < 1) throw Error("bpd_bound needs n_mc >= 1");
  const MarginalKernel kernel(setup.kernel, model.vocab_augmented() - 1);
  Rng rng(seed);
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t n = 0;
  for (const TokenSequence& x0 : dataset) {
    for (std::size_t i = 0; i < n_mc; ++i) {
      const Trajectory traj = forward_sample(x0, schedule, kernel, rng);
      const double bits = -elbo_trajectory(model, x0, traj, schedule, setup).total /
                          (static_cast<double>(x0.size()) * std::numbers::ln2);
      sum += bits;
      sum_sq += bits * bits;
      ++n;
    }
  }
  BpdReport rep;
  rep.T = schedule.T;
  rep.samples = n;
  rep.bpd = sum / static_cast<double>(n);
  if (n > 1) {
    const double var = std::max(0.0, (sum_sq - sum * rep.bpd) / static_cast<double>(n - 1));
    rep.std_error = std::sqrt(var / static_cast<double>(n));
  }
  return rep;
}

double generation_entropy(std::span<const TokenSequence> samples) {
  std::vector<double> counts;
  double total = 0.0;
  for (const TokenSequence& s : samples) {
    for (TokenId v : s) {
      if (v < 0) throw Error("negative token id in samples");
      if (static_cast<std::size_t>(v) >= counts.size()) counts.resize(static_cast<std::size_t>(v) + 1, 0.0);
      counts[static_cast<std::size_t>(v)] += 1.0;
      total += 1.0;
    }
  }
  if (total == 0.0) throw Error("generation_entropy needs at least one token");
  for (double& c : counts) c /= total;
  return entropy_nats(counts);
}

NgramOracle::NgramOracle(std::size_t vocab_size, int order, double delta)
    : vocab_(vocab_size), order_(order), delta_(delta), tables_(static_cast<std::size_t>(std::max(order, 1))) {
  if (vocab_size == 0) throw Error("oracle vocabulary is empty");
  if (order < 1) throw Error("n-gram order must be at least 1");
  if (!(delta > 0.0)) throw Error("smoothing delta must be positive");
  double span = 1.0;
  for (int i = 1; i < order; ++i) span *= static_cast<double>(vocab_size + 1);
  if (span > 1e18) throw Error("n-gram order too large for this vocabulary");
}

std::uint64_t NgramOracle::key(std::span<const TokenId> history) const {
  std::uint64_t k = 0;
  for (TokenId v : history) k = k * (vocab_ + 1) + static_cast<std::uint64_t>(v) + 1;
  return k;
}

void NgramOracle::fit(std::span<const TokenId> corpus) {
  for (auto& t : tables_) t.clear();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto next = static_cast<std::size_t>(corpus[i]);
    if (corpus[i] < 0 || next >= vocab_) throw Error("oracle corpus token outside the vocabulary");
    for (int h = 0; h < order_ && static_cast<std::size_t>(h) <= i; ++h) {
      auto& counts = tables_[static_cast<std::size_t>(h)][key(corpus.subspan(i - static_cast<std::size_t>(h),
                                                                            static_cast<std::size_t>(h)))];
      if (counts.empty()) counts.assign(vocab_ + 1, 0.0);  // last slot holds the total
      counts[next] += 1.0;
      counts[vocab_] += 1.0;
    }
  }
}

std::vector<double> NgramOracle::conditional(std::span<const TokenId> history) const {
  const std::size_t h = std::min(history.size(), static_cast<std::size_t>(order_ - 1));
  const auto& table = tables_[h];
  const auto it = table.find(key(history.subspan(history.size() - h, h)));
  std::vector<double> p(vocab_, delta_);
  double total = delta_ * static_cast<double>(vocab_);
  if (it != table.end()) {
    for (std::size_t v = 0; v < vocab_; ++v) p[v] += it->second[v];
    total += it->second[vocab_];
  }
  for (double& v : p) v /= total;
  return p;
}

double NgramOracle::log_prob(std::span<const TokenId> history, TokenId next) const {
  if (next < 0 || static_cast<std::size_t>(next) >= vocab_) throw Error("token outside the oracle vocabulary");
  return std::log(conditional(history)[static_cast<std::size_t>(next)]);
}

double NgramOracle::nll_per_token(std::span<const TokenSequence> samples) const {
  double nll = 0.0;
  std::size_t n = 0;
  for (const TokenSequence& s : samples) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      nll -= log_prob(std::span<const TokenId>(s).first(i), s[i]);
      ++n;
    }
  }
  if (n == 0) throw Error("perplexity needs at least one token");
  return nll / static_cast<double>(n);
}

double NgramOracle::perplexity(std::span<const TokenSequence> samples) const {
  return std::exp(nll_per_token(samples));
}

TokenSequence NgramOracle::sample(std::size_t length, Rng& rng) const {
  TokenSequence out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) out.push_back(draw_token(conditional(out), false, rng));
  return out;
}

MarkovSource::MarkovSource(std::vector<std::vector<double>> transition) : transition_(std::move(transition)) {
  const std::size_t V = transition_.size();
  if (V == 0) throw Error("Markov source needs at least one state");
  for (auto& row : transition_) {
    if (row.size() != V) throw Error("transition matrix must be square");
    double s = 0.0;
    for (double p : row) {
      if (p < 0.0) throw Error("negative transition probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw Error("transition rows must sum to 1");
  }
  stationary_.assign(V, 1.0 / static_cast<double>(V));
  for (int it = 0; it < 10000; ++it) {
    std::vector<double> next(V, 0.0);
    for (std::size_t a = 0; a < V; ++a) {
      for (std::size_t b = 0; b < V; ++b) next[b] += stationary_[a] * transition_[a][b];
    }
    double diff = 0.0;
    for (std::size_t a = 0; a < V; ++a) diff += std::abs(next[a] - stationary_[a]);
    stationary_ = std::move(next);
    if (diff < 1e-15) break;
  }
}

double MarkovSource::entropy_rate_bits() const {
  double h = 0.0;
  for (std::size_t a = 0; a < transition_.size(); ++a) h += stationary_[a] * entropy_nats(transition_[a]);
  return h / std::numbers::ln2;
}

TokenSequence MarkovSource::sample(std::size_t length, Rng& rng) const {
  TokenSequence out;
  out.reserve(length);
  if (length == 0) return out;
  out.push_back(draw_token(stationary_, false, rng));
  while (out.size() < length) out.push_back(draw_token(transition_[static_cast<std::size_t>(out.back())], false, rng));
  return out;
}

void inject_noise(std::span<TokenId> row, std::size_t count, std::size_t vocab_real, Rng& rng) {
  if (count > row.size()) throw Error("cannot replace more tokens than the row holds");
  std::vector<std::size_t> idx(row.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    row[idx[i]] = static_cast<TokenId>(rng.below(vocab_real));
  }
}

namespace {

void finish_arm(ArmReport& arm, const NgramOracle& oracle) {
  double sum = 0.0;
  for (const TokenSequence& s : arm.samples) {
    const double p = oracle.perplexity(std::span<const TokenSequence>(&s, 1));
    arm.perplexity.push_back(p);
    sum += p;
  }
  arm.mean_perplexity = sum / static_cast<double>(arm.samples.size());
  arm.entropy = generation_entropy(arm.samples);
}

}  // namespace

InjectionReport noise_injection_run(const Denoiser& model, const NoiseSchedule& schedule,
                                    const SamplerConfig& config, const NgramOracle& oracle, int t_inject,
                                    double fraction, std::size_t n_samples, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error("injection fraction must lie in (0, 1]");
  if (t_inject < 1 || t_inject > schedule.T) throw Error("injection timestep outside [1, T]");
  if (n_samples < 1) throw Error("need at least one sample per arm");
  const std::size_t vocab_real = model.vocab_augmented() - 1;
  InjectionReport rep;
  rep.replaced = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(config.length) - 1e-12));
  for (std::size_t i = 0; i < n_samples; ++i) {
    SamplerConfig c = config;
    c.seed = derive_seed(seed, 2 * i);
    rep.clean.samples.push_back(generate(model, schedule, c).x0);
    Rng noise(derive_seed(seed, 2 * i + 1));
    const LatentHook hook = [&](int t, std::span<TokenId> row) {
      if (t == t_inject) inject_noise(row, rep.replaced, vocab_real, noise);
    };
    rep.injected.samples.push_back(generate(model, schedule, c, hook).x0);
  }
  finish_arm(rep.clean, oracle);
  finish_arm(rep.injected, oracle);
  return rep;
}

double median(std::vector<double> values) {
  if (values.empty()) throw Error("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

Interval median_bootstrap_ci(std::span<const double> values, std::size_t n_boot, double level, std::uint64_t seed) {
  if (values.empty()) throw Error("bootstrap of an empty set");
  if (!(level > 0.0 && level < 1.0)) throw Error("confidence level must lie in (0, 1)");
  Rng rng(seed);
  std::vector<double> meds;
  meds.reserve(n_boot);
  std::vector<double> resample(values.size());
  for (std::size_t b = 0; b < n_boot; ++b) {
    for (double& v : resample) v = values[rng.below(values.size())];
    meds.push_back(median(resample));
  }
  std::sort(meds.begin(), meds.end());
  const double tail = (1.0 - level) / 2.0;
  auto at = [&](double q) {
    const auto i = static_cast<std::size_t>(std::clamp(q * static_cast<double>(meds.size() - 1), 0.0,
                                                       static_cast<double>(meds.size() - 1)));
    return meds[i];
  };
  return {at(tail), at(1.0 - tail)};
}

double sign_test_p(std::size_t successes, std::size_t n) {
  if (successes > n) throw Error("more successes than trials");
  double p = 0.0;
  for (std::size_t k = successes; k <= n; ++k) {
    p += std::exp(std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
                  std::lgamma(static_cast<double>(n - k) + 1) - static_cast<double>(n) * std::numbers::ln2);
  }
  return std::min(1.0, p);
}

}  // namespace caddi
