#pragma once

// Likelihood bound in bits per character, generation statistics, an n-gram
// stand-in oracle for sample quality, and the noise-injection harness.

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "caddi/sampler.hpp"
#include "caddi/training.hpp"

namespace caddi {

struct BpdReport {
  double bpd = 0.0;        // -ELBO per token in bits
  double std_error = 0.0;  // Monte-Carlo standard error of bpd
  int T = 0;
  std::size_t samples = 0;  // trajectories scored
};

// n_mc trajectories per sequence; the standard error treats every
// (sequence, trajectory) pair as one draw.
BpdReport bpd_bound(const Denoiser& model, std::span<const TokenSequence> dataset, const NoiseSchedule& schedule,
                    const DenoiseSetup& setup, std::size_t n_mc, std::uint64_t seed);

// Entropy (nats) of the pooled unigram distribution of all samples.
double generation_entropy(std::span<const TokenSequence> samples);

// Additive-smoothed n-gram model. Positions near the start of a sequence use
// the shorter history available.
class NgramOracle {
 public:
  NgramOracle(std::size_t vocab_size, int order = 3, double delta = 0.1);

  void fit(std::span<const TokenId> corpus);
  std::vector<double> conditional(std::span<const TokenId> history) const;
  double log_prob(std::span<const TokenId> history, TokenId next) const;
  // Mean negative log-probability per token (nats).
  double nll_per_token(std::span<const TokenSequence> samples) const;
  double perplexity(std::span<const TokenSequence> samples) const;
  TokenSequence sample(std::size_t length, Rng& rng) const;

  int order() const { return order_; }
  std::size_t vocab_size() const { return vocab_; }

 private:
  std::uint64_t key(std::span<const TokenId> history) const;

  std::size_t vocab_;
  int order_;
  double delta_;
  // One table per history length: history key -> per-symbol counts.
  std::vector<std::unordered_map<std::uint64_t, std::vector<double>>> tables_;
};

// Order-1 Markov chain over vocab symbols with a known entropy rate.
class MarkovSource {
 public:
  explicit MarkovSource(std::vector<std::vector<double>> transition);

  std::size_t vocab_size() const { return transition_.size(); }
  const std::vector<double>& stationary() const { return stationary_; }
  double entropy_rate_bits() const;
  TokenSequence sample(std::size_t length, Rng& rng) const;

 private:
  std::vector<std::vector<double>> transition_;
  std::vector<double> stationary_;
};

struct ArmReport {
  std::vector<double> perplexity;  // oracle perplexity per sample
  double mean_perplexity = 0.0;
  double entropy = 0.0;
  std::vector<TokenSequence> samples;
};

struct InjectionReport {
  ArmReport clean;
  ArmReport injected;
  std::size_t replaced = 0;  // tokens replaced per sample
};

// Replaces count distinct random positions of row with uniform real symbols.
void inject_noise(std::span<TokenId> row, std::size_t count, std::size_t vocab_real, Rng& rng);

// Generates n_samples per arm with paired seeds; the injected arm replaces
// ceil(fraction * L) tokens of x_{t_inject} before any model reads it.
InjectionReport noise_injection_run(const Denoiser& model, const NoiseSchedule& schedule,
                                    const SamplerConfig& config, const NgramOracle& oracle, int t_inject,
                                    double fraction, std::size_t n_samples, std::uint64_t seed);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

double median(std::vector<double> values);
// Percentile bootstrap interval for the median.
Interval median_bootstrap_ci(std::span<const double> values, std::size_t n_boot, double level, std::uint64_t seed);
// P(X >= successes) for X ~ Binomial(n, 1/2).
double sign_test_p(std::size_t successes, std::size_t n);

}  // namespace caddi
