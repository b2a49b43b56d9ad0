#pragma once

// Variational objectives and the training loop. The absorbing-kernel loss is
// a weighted cross-entropy on x_0; elbo_general evaluates the same bound from
// exact per-token categorical KLs and serves as its oracle.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "caddi/denoiser.hpp"
#include "caddi/schedule.hpp"
#include "caddi/trajectory.hpp"

namespace caddi {

// Weight on the reconstruction term (t = 1). exact uses 1 - alpha_0, which
// makes the loss equal the negative ELBO; literal uses alpha_0.
enum class ReconWeight { exact, literal };

struct DenoiseSetup {
  ContextSpec context;
  KernelKind kernel = KernelKind::absorbing;
  ProcessKind process = ProcessKind::nonmarkov;
  ReconWeight recon = ReconWeight::exact;

  void validate() const;
};

// Indexed by t in [1, T] (entry 0 unused): weight of the cross-entropy of
// mu(x_{t:T}, t) against x_0. exact: 1 - alpha_{t-1}; literal: alpha_{t-1}.
std::vector<double> loss_weights(const NoiseSchedule& schedule, ReconWeight mode);
// Markov chain weights (a*_t - a*_{t-1}) / a*_t, applied at masked positions.
std::vector<double> markov_loss_weights(const NoiseSchedule& schedule);

// Softmax over the real symbols only (the mask logit is ignored). Returns
// |V| log-probabilities.
std::vector<double> x0_log_probs(std::span<const double> logits_row, std::size_t vocab_real);

struct LossReport {
  double total = 0.0;              // nats over the whole sequence
  std::vector<double> components;  // indexed by t in [0, T]
  std::size_t tokens = 0;
  double per_token() const { return tokens ? total / static_cast<double>(tokens) : 0.0; }
};

// sum_t w_t * CE(x_0, mu(x_{t:T}, t)) on one trajectory, with each mu read from
// a separate forward pass whose context starts at t (the same view the
// sampler uses).
LossReport loss_absorb(const Denoiser& model, std::span<const TokenId> x0, const Trajectory& traj,
                       const NoiseSchedule& schedule, const DenoiseSetup& setup);

// Evidence lower bound (nats, <= 0) on one trajectory: exact reconstruction
// log-likelihood, prior KL, and per-step KL(q(x_{t-1}|x_0) || q(x_{t-1}|mu))
// summed over every augmented state.
LossReport elbo_trajectory(const Denoiser& model, std::span<const TokenId> x0, const Trajectory& traj,
                           const NoiseSchedule& schedule, const DenoiseSetup& setup);

struct ElboEstimate {
  double bound = 0.0;      // mean over trajectories (nats per sequence)
  double std_error = 0.0;  // Monte-Carlo standard error of the mean
  std::size_t samples = 0;
};

ElboEstimate elbo_general(const Denoiser& model, std::span<const TokenId> x0, const NoiseSchedule& schedule,
                          const DenoiseSetup& setup, std::size_t n_mc, std::uint64_t seed);

struct RowTarget {
  std::size_t row = 0;
  TokenId target = 0;
  double weight = 0.0;
};

// Rows that predict x_0 at the timestep the input was built for.
std::vector<RowTarget> step_targets(const ModelInput& input, const ContextSpec& spec,
                                    std::span<const TokenId> x0, double weight);
// Training targets for a window: every block for block_causal, otherwise the
// predicting rows of the final block. Markov setups score only masked
// positions of each block.
std::vector<RowTarget> window_targets(const ModelInput& input, const DenoiseSetup& setup,
                                      std::span<const TokenId> x0, std::span<const double> weights,
                                      TokenId mask_id);

// sum weight * -log softmax_real(logits[row])[target]. dlogits (same shape as
// logits) is overwritten with the gradient scaled by grad_scale when given.
template <class Real>
double weighted_cross_entropy(std::span<const Real> logits, std::size_t vocab_augmented,
                              std::span<const RowTarget> targets, std::vector<Real>* dlogits,
                              double grad_scale = 1.0);

// Weighted cross-entropy of one forward pass; gradients accumulate into grads.
template <class Real>
double input_loss(const Parameters<Real>& params, const ModelInput& input, std::span<const RowTarget> targets,
                  Parameters<Real>* grads, double grad_scale = 1.0);

// loss_absorb with reverse-mode gradients (grads may be null).
template <class Real>
double loss_absorb_grad(const Parameters<Real>& params, std::span<const TokenId> x0, const Trajectory& traj,
                        const NoiseSchedule& schedule, const DenoiseSetup& setup, Parameters<Real>* grads);

struct TrainConfig {
  NoiseSchedule schedule = NoiseSchedule::linear(16);
  DenoiseSetup setup;
  ModelConfig model;
  std::size_t seq_len = 64;
  std::size_t batch_size = 16;
  double learning_rate = 3e-4;
  int warmup_steps = 100;
  int total_steps = 1000;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global norm, 0 disables
  bool random_offset = false;
  int log_every = 10;
  std::size_t probe_sequences = 4;
  double max_seconds = 0.0;  // wall-clock cap, 0 disables
  std::uint64_t seed = 0;

  void validate() const;
};

struct LossPoint {
  int step = 0;
  double loss = 0.0;        // training batch loss, nats per token
  double lr = 0.0;
  double probe_loss = 0.0;  // fixed probe batch, nats per token (NaN between log steps)
};

struct TrainResult {
  Parameters<float> params;
  std::vector<LossPoint> curve;
  int steps_done = 0;
  double seconds = 0.0;
};

double learning_rate_at(const TrainConfig& config, int step);

// Throws Error("non-finite loss at step N") on divergence.
TrainResult train(const TrainConfig& config, std::span<const TokenId> corpus,
                  const std::function<void(const LossPoint&)>& progress = {});

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_tensor;
};

using LossGradFn = std::function<double(const Parameters<double>&, Parameters<double>*)>;

// Central differences against reverse-mode on per_group random entries of
// every tensor. Relative error is |a - f| / max(|a|, |f|, floor).
GradCheckResult grad_check(const Parameters<double>& params, const LossGradFn& loss, double eps,
                           std::size_t per_group, std::uint64_t seed, double floor = 1e-6);

}  // namespace caddi
