#pragma once

// Noise schedules, marginal corruption kernels, and the mutual-information
// bookkeeping that relates independent (non-Markov) and chained (Markov)
// absorbing processes.

#include <cstdint>
#include <span>
#include <vector>

#include "caddi/common.hpp"

namespace caddi {

// Per-step masking probabilities of the independent forward process together
// with the derived cumulative curve and the matching Markov step schedule.
// All arrays are indexed by timestep t in [0, T].
struct NoiseSchedule {
  int T = 0;
  std::vector<double> alpha;       // alpha[0] = alpha0 (corruption level of x_0)
  std::vector<double> alpha_star;  // alpha_star[0] = 0, alpha_star[t] = prod_{tau>=t} alpha[tau]
  std::vector<double> beta;        // beta[0] = 0, Markov single-step masking probabilities

  // alpha_t = t/(t+1) for t < T, alpha_T = 1, so alpha_star_t = t/T.
  static NoiseSchedule linear(int T);
  // alpha holds alpha_1..alpha_T.
  static NoiseSchedule from_independent(std::span<const double> alpha, double alpha0 = 0.0);
};

// Suffix products alpha*_t = prod_{tau=t}^{T} alpha_tau for t = 1..T, computed
// from t = T downward. Input and output are 1-based sequences stored 0-based.
std::vector<double> cumulative_from_independent(std::span<const double> alpha);

// beta_t = 1 - (1 - a*_t) / (1 - a*_{t-1}) with a*_0 = 0. Once the chain is
// fully absorbed (a*_{t-1} = 1) every remaining beta is 1.
std::vector<double> stepwise_from_cumulative(std::span<const double> alpha_star);

// a*_t = 1 - prod_{s<=t} (1 - beta_s): cumulative masking of a Markov chain.
std::vector<double> cumulative_from_stepwise(std::span<const double> beta);

enum class KernelKind { absorbing, uniform };

// Row evaluations of the marginal kernel (1-a) I + a 1 e_m^T (absorbing) or
// (1-a) I + a 1 1^T / |V| (uniform).
class MarginalKernel {
 public:
  MarginalKernel(KernelKind kind, std::size_t vocab_size);

  KernelKind kind() const { return kind_; }
  std::size_t vocab_size() const { return vocab_; }
  TokenId mask_id() const { return static_cast<TokenId>(vocab_); }
  // Number of states a corrupted token can take (|V|+1 absorbing, |V| uniform).
  std::size_t state_count() const { return kind_ == KernelKind::absorbing ? vocab_ + 1 : vocab_; }

  // q(x_t = y | x_0 = x0) at noise level a.
  double prob(TokenId x0, double a, TokenId y) const;
  std::vector<double> row(TokenId x0, double a) const;

 private:
  KernelKind kind_;
  std::size_t vocab_;
};

TokenId corrupt_token(const MarginalKernel& kernel, TokenId x0, double a, Rng& rng);

enum class ProcessKind { markov, nonmarkov };

// Normalized information decay D_t = 1 - I(x_{t:T}; x_0) / H(x_0), indexed by t
// in [0, T] with D_0 = 0.
struct MIProfile {
  std::vector<double> decay;
  std::vector<double> info;  // I_t in nats
  double entropy = 0.0;      // H(x_0) in nats
  bool defined = true;       // false when H(x_0) = 0
};

double entropy_nats(std::span<const double> p);

// Closed forms for absorbing kernels: Markov chains driven by schedule.beta
// lose D_t = 1 - prod_{s<=t}(1 - beta_s); independent processes lose
// D_t = prod_{tau>=t} alpha_tau.
MIProfile mi_decay_analytic(const NoiseSchedule& schedule, ProcessKind process,
                            std::span<const double> p0);

// Plug-in estimate from sampled single-token trajectories. Absorbing kernels
// reduce the suffix to its sufficient statistic (first unmasked value or
// mask); uniform kernels condition on the full suffix tuple.
MIProfile mi_decay_montecarlo(const NoiseSchedule& schedule, KernelKind kernel,
                              ProcessKind process, std::span<const double> p0,
                              std::size_t n_samples, std::uint64_t seed);

}  // namespace caddi
