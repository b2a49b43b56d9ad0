#pragma once

// Reverse-process samplers: block denoising, token-autoregressive denoising
// (naive and with draft verification), step skipping, guidance, and the
// Markov absorbing baseline that never revises an unmasked token.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "caddi/denoiser.hpp"
#include "caddi/schedule.hpp"
#include "caddi/trajectory.hpp"

namespace caddi {

enum class SamplerMode { caddi, caddi_ar, markov_baseline };
enum class VerifyPolicy { greedy, threshold };

struct PromptToken {
  std::size_t pos = 0;
  TokenId id = 0;
};

struct SamplerConfig {
  SamplerMode mode = SamplerMode::caddi;
  int n_steps = 0;  // visited timesteps, 0 means T
  double temperature = 1.0;
  int top_k = 0;
  bool greedy = false;  // argmax instead of sampling x~0
  double gamma = 1.0;   // guidance scale, 1 disables
  ContextSpec context;
  KernelKind kernel = KernelKind::absorbing;
  bool speculative = false;
  VerifyPolicy verify = VerifyPolicy::greedy;
  double p_min = 0.9;
  std::size_t length = 64;
  std::size_t vocab_real = 0;  // 0 accepts the model's vocabulary
  std::vector<PromptToken> prompt;
  std::uint64_t seed = 0;

  void validate(int T) const;
};

struct StepRecord {
  int t = 0;
  TokenSequence x0_pred;
  TokenSequence x_prev;  // x_{t-1}
  int accepted = -1;     // accepted draft prefix, -1 without verification
  std::size_t calls = 0;
};

struct GenerationTrace {
  std::vector<StepRecord> steps;  // visited timesteps only
  Trajectory latents;             // every row x_0..x_T as generated
  TokenSequence x0;
  std::size_t model_calls = 0;
};

// Called with (t, row) once row x_t is final and before any model reads it.
using LatentHook = std::function<void(int, std::span<TokenId>)>;

// Timesteps t_k = round(T - k (T-1)/(n-1)), k = 0..n-1; {T} when n = 1.
std::vector<int> step_skip_schedule(int T, int n_steps);

// Renormalized exp(gamma * cond - (gamma - 1) * uncond) over the categories of
// two log-probability (or logit) vectors.
std::vector<double> cfg_distribution(std::span<const double> cond_logits, std::span<const double> uncond_logits,
                                     double gamma);

// Temperature then top-k, returned as probabilities.
std::vector<double> adjust_distribution(std::span<const double> log_probs, double temperature, int top_k);

// Per-token x~0 sample (argmax when greedy).
TokenId draw_token(std::span<const double> probs, bool greedy, Rng& rng);

struct StepResult {
  TokenSequence x0_pred;
  TokenSequence x_prev;
  std::size_t calls = 0;
};

// One block step at timestep t: predict x~0 from rows t..T of latents, then
// re-corrupt it at level alpha_{t-1}. Prompt positions stay clamped.
StepResult reverse_step(const Denoiser& model, const Trajectory& latents, int t, const NoiseSchedule& schedule,
                        const SamplerConfig& config, Rng& rng);

// Markov absorbing posterior from step t to step s < t: unmasked tokens are
// copied, masked ones take x0_pred with probability (a*_t - a*_s) / a*_t.
TokenSequence markov_reverse_step(std::span<const TokenId> x_t, std::span<const TokenId> x0_pred, int t, int s,
                                  const NoiseSchedule& schedule, TokenId mask_id, Rng& rng);

struct SpeculativeResult {
  TokenSequence x0_pred;
  std::size_t accepted = 0;
  std::size_t calls = 0;
};

// Verifies draft in one pass over context + draft, keeps the accepted prefix,
// and decodes the rest token by token.
SpeculativeResult speculative_step(const Denoiser& model, const Trajectory& latents, int t,
                                   std::span<const TokenId> draft, const SamplerConfig& config, Rng& rng);

GenerationTrace sample_caddi(const Denoiser& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                             const LatentHook& hook = {});
GenerationTrace sample_caddi_ar(const Denoiser& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                                const LatentHook& hook = {});
GenerationTrace sample_markov_baseline(const Denoiser& model, const NoiseSchedule& schedule,
                                       const SamplerConfig& config, const LatentHook& hook = {});
// Dispatches on config.mode.
GenerationTrace generate(const Denoiser& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                         const LatentHook& hook = {});

}  // namespace caddi
