#include "caddi/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "caddi/training.hpp"

namespace caddi {

void SamplerConfig::validate(int T) const {
  if (n_steps < 0 || n_steps > T) {
    throw Error("n_steps " + std::to_string(n_steps) + " outside [1, T=" + std::to_string(T) + "]");
  }
  if (!greedy && !(temperature > 0.0)) throw Error("temperature must be positive");
  if (top_k < 0) throw Error("top_k must be >= 0");
  if (!(gamma >= 1.0)) throw Error("guidance scale must be >= 1");
  if (!(p_min > 0.0 && p_min <= 1.0)) throw Error("p_min must lie in (0, 1]");
  if (length < 1) throw Error("sequence length must be positive");
  context.validate();
  if (mode == SamplerMode::caddi_ar && !context.autoregressive) {
    throw Error("caddi_ar sampling needs an autoregressive context spec");
  }
  if (mode != SamplerMode::caddi_ar && context.autoregressive) {
    throw Error("autoregressive context spec requires caddi_ar mode");
  }
  if (mode == SamplerMode::markov_baseline && kernel != KernelKind::absorbing) {
    throw Error("the Markov baseline needs an absorbing kernel");
  }
  if (speculative && mode != SamplerMode::caddi_ar) throw Error("speculative decoding applies to caddi_ar only");
  for (const PromptToken& p : prompt) {
    if (p.pos >= length) throw Error("prompt position " + std::to_string(p.pos) + " beyond sequence length");
  }
}

std::vector<int> step_skip_schedule(int T, int n_steps) {
  if (T < 1) throw Error("T must be at least 1");
  if (n_steps < 1 || n_steps > T) {
    throw Error("n_steps " + std::to_string(n_steps) + " outside [1, T=" + std::to_string(T) + "]");
  }
  if (n_steps == 1) return {T};
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n_steps));
  for (int k = 0; k < n_steps; ++k) {
    out.push_back(static_cast<int>(std::lround(T - static_cast<double>(k) * (T - 1) / (n_steps - 1))));
  }
  return out;
}

std::vector<double> cfg_distribution(std::span<const double> cond_logits, std::span<const double> uncond_logits,
                                     double gamma) {
  if (cond_logits.size() != uncond_logits.size()) throw Error("guidance inputs have different shapes");
  if (!(gamma >= 1.0)) throw Error("guidance scale must be >= 1");
  std::vector<double> z(cond_logits.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = gamma == 1.0 ? cond_logits[i] : gamma * cond_logits[i] - (gamma - 1.0) * uncond_logits[i];
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
  for (double v : z) {
    if (!std::isfinite(v)) throw Error("guided distribution is not finite");
  }
  return z;
}

std::vector<double> adjust_distribution(std::span<const double> log_probs, double temperature, int top_k) {
  const std::size_t n = log_probs.size();
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = log_probs[i] / temperature;
  std::vector<bool> keep(n, true);
  if (top_k > 0 && static_cast<std::size_t>(top_k) < n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
    std::fill(keep.begin(), keep.end(), false);
    for (int i = 0; i < top_k; ++i) keep[order[static_cast<std::size_t>(i)]] = true;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) mx = std::max(mx, z[i]);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = keep[i] ? std::exp(z[i] - mx) : 0.0;
    sum += z[i];
  }
  for (double& v : z) v /= sum;
  return z;
}

TokenId draw_token(std::span<const double> probs, bool greedy, Rng& rng) {
  if (greedy) {
    return static_cast<TokenId>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }
  double u = rng.uniform();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (u < probs[i]) return static_cast<TokenId>(i);
    u -= probs[i];
  }
  // Rounding left a sliver of mass: take the last category with support.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return static_cast<TokenId>(i);
  }
  return 0;
}

namespace {

struct Shape {
  std::size_t vocab_real;
  TokenId mask_id;
  std::size_t L;
};

Shape resolve_shape(const Denoiser& model, const SamplerConfig& config) {
  const std::size_t V = model.vocab_augmented();
  if (V < 2) throw Error("model vocabulary is empty");
  if (config.vocab_real != 0 && config.vocab_real + 1 != V) {
    throw Error("model vocabulary (" + std::to_string(V - 1) + " symbols) does not match the configured " +
                std::to_string(config.vocab_real));
  }
  for (const PromptToken& p : config.prompt) {
    if (p.id < 0 || static_cast<std::size_t>(p.id) >= V - 1) throw Error("prompt token outside the vocabulary");
  }
  return {V - 1, static_cast<TokenId>(V - 1), config.length};
}

void clamp_prompt(std::span<TokenId> row, const SamplerConfig& config) {
  for (const PromptToken& p : config.prompt) row[p.pos] = p.id;
}

bool is_prompt(std::size_t j, const SamplerConfig& config) {
  for (const PromptToken& p : config.prompt) {
    if (p.pos == j) return true;
  }
  return false;
}

// x~0 distributions (after guidance, temperature and top-k) for the given rows
// of one model input. Guidance adds a second pass with every prompt position
// masked.
std::vector<std::vector<double>> row_distributions(const Denoiser& model, const ModelInput& input,
                                                   std::span<const std::size_t> rows, const SamplerConfig& config,
                                                   const Shape& shape, std::size_t& calls) {
  const std::size_t V = shape.vocab_real + 1;
  const std::vector<double> cond = model.logits(input.context, input.mask);
  ++calls;
  const bool guided = config.gamma != 1.0 && !config.prompt.empty();
  std::vector<double> uncond;
  if (guided) {
    FlatContext free = input.context;
    for (std::size_t r = 0; r < free.size(); ++r) {
      if (is_prompt(static_cast<std::size_t>(free.seq_pos[r]), config)) free.tokens[r] = shape.mask_id;
    }
    uncond = model.logits(free, input.mask);
    ++calls;
  }
  std::vector<std::vector<double>> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) {
    std::vector<double> lp = x0_log_probs({cond.data() + r * V, V}, shape.vocab_real);
    if (guided) {
      const std::vector<double> ulp = x0_log_probs({uncond.data() + r * V, V}, shape.vocab_real);
      const std::vector<double> g = cfg_distribution(lp, ulp, config.gamma);
      for (std::size_t v = 0; v < lp.size(); ++v) lp[v] = g[v] > 0.0 ? std::log(g[v]) : -1e300;
    }
    out.push_back(adjust_distribution(lp, config.greedy ? 1.0 : config.temperature, config.top_k));
  }
  return out;
}

TokenSequence recorrupt(std::span<const TokenId> x0_pred, double a, const SamplerConfig& config, const Shape& shape,
                        Rng& rng) {
  const MarginalKernel kernel(config.kernel, shape.vocab_real);
  TokenSequence out(x0_pred.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = corrupt_token(kernel, x0_pred[j], a, rng);
  clamp_prompt(out, config);
  return out;
}

TokenSequence decode_ar_naive(const Denoiser& model, const Trajectory& latents, int t, const SamplerConfig& config,
                              const Shape& shape, std::size_t from, TokenSequence block, Rng& rng,
                              std::size_t& calls) {
  for (std::size_t i = from; i < shape.L; ++i) {
    if (is_prompt(i, config)) continue;
    const ModelInput in = make_model_input(latents, t, config.context, shape.mask_id, block);
    const std::size_t row = prediction_row(in, config.context, i);
    const auto dist = row_distributions(model, in, std::span<const std::size_t>(&row, 1), config, shape, calls);
    block[i] = draw_token(dist[0], config.greedy, rng);
  }
  return block;
}

TokenSequence predict_block(const Denoiser& model, const Trajectory& latents, int t, const SamplerConfig& config,
                            const Shape& shape, Rng& rng, std::size_t& calls) {
  if (config.context.autoregressive) {
    TokenSequence block(shape.L, shape.mask_id);
    clamp_prompt(block, config);
    return decode_ar_naive(model, latents, t, config, shape, 0, std::move(block), rng, calls);
  }
  const ModelInput in = make_model_input(latents, t, config.context, shape.mask_id);
  std::vector<std::size_t> rows(shape.L);
  for (std::size_t j = 0; j < shape.L; ++j) rows[j] = prediction_row(in, config.context, j);
  const auto dists = row_distributions(model, in, rows, config, shape, calls);
  TokenSequence x0(shape.L);
  for (std::size_t j = 0; j < shape.L; ++j) x0[j] = draw_token(dists[j], config.greedy, rng);
  clamp_prompt(x0, config);
  return x0;
}

void check_latents(const Trajectory& latents, int t, const NoiseSchedule& schedule, const SamplerConfig& config) {
  if (t < 1 || t > schedule.T) throw Error("timestep " + std::to_string(t) + " outside [1, T]");
  if (latents.horizon() != schedule.T || latents.length() != config.length) {
    throw Error("latent trajectory shape does not match the schedule and sequence length");
  }
}

Trajectory initial_latents(const NoiseSchedule& schedule, const SamplerConfig& config, const Shape& shape, Rng& rng) {
  Trajectory latents(schedule.T, shape.L, shape.mask_id);
  auto top = latents.row(schedule.T);
  const double aT = schedule.alpha[static_cast<std::size_t>(schedule.T)];
  for (TokenId& v : top) {
    if (config.kernel == KernelKind::absorbing) {
      v = rng.bernoulli(aT) ? shape.mask_id : static_cast<TokenId>(rng.below(shape.vocab_real));
    } else {
      v = static_cast<TokenId>(rng.below(shape.vocab_real));
    }
  }
  clamp_prompt(top, config);
  return latents;
}

}  // namespace

StepResult reverse_step(const Denoiser& model, const Trajectory& latents, int t, const NoiseSchedule& schedule,
                        const SamplerConfig& config, Rng& rng) {
  const Shape shape = resolve_shape(model, config);
  check_latents(latents, t, schedule, config);
  StepResult res;
  res.x0_pred = predict_block(model, latents, t, config, shape, rng, res.calls);
  res.x_prev = recorrupt(res.x0_pred, schedule.alpha[static_cast<std::size_t>(t - 1)], config, shape, rng);
  return res;
}

TokenSequence markov_reverse_step(std::span<const TokenId> x_t, std::span<const TokenId> x0_pred, int t, int s,
                                  const NoiseSchedule& schedule, TokenId mask_id, Rng& rng) {
  if (t < 1 || t > schedule.T || s < 0 || s >= t) throw Error("Markov reverse step needs 0 <= s < t <= T");
  if (x_t.size() != x0_pred.size()) throw Error("x_t and x0 prediction differ in length");
  const double at = schedule.alpha_star[static_cast<std::size_t>(t)];
  const double as = schedule.alpha_star[static_cast<std::size_t>(s)];
  TokenSequence out(x_t.begin(), x_t.end());
  for (std::size_t j = 0; j < out.size(); ++j) {
    if (out[j] != mask_id) continue;
    if (!(at > 0.0)) throw Error("masked token at a timestep with zero cumulative masking");
    if (rng.bernoulli((at - as) / at)) out[j] = x0_pred[j];
  }
  return out;
}

SpeculativeResult speculative_step(const Denoiser& model, const Trajectory& latents, int t,
                                   std::span<const TokenId> draft, const SamplerConfig& config, Rng& rng) {
  const Shape shape = resolve_shape(model, config);
  if (!config.context.autoregressive) throw Error("speculative decoding needs an autoregressive context spec");
  if (draft.size() != shape.L) throw Error("draft length differs from the sequence length");
  SpeculativeResult res;
  TokenSequence block(draft.begin(), draft.end());
  clamp_prompt(block, config);
  const ModelInput in = make_model_input(latents, t, config.context, shape.mask_id, block);
  std::vector<std::size_t> rows(shape.L);
  for (std::size_t j = 0; j < shape.L; ++j) rows[j] = prediction_row(in, config.context, j);
  const auto dists = row_distributions(model, in, rows, config, shape, res.calls);

  std::size_t k = 0;
  for (; k < shape.L; ++k) {
    if (is_prompt(k, config)) continue;
    const auto& p = dists[k];
    const auto tok = static_cast<std::size_t>(block[k]);
    const bool ok = config.verify == VerifyPolicy::greedy
                        ? tok == static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin())
                        : p[tok] >= config.p_min;
    if (!ok) break;
  }
  res.accepted = k;
  if (k < shape.L) {
    block[k] = draw_token(dists[k], config.greedy, rng);
    block = decode_ar_naive(model, latents, t, config, shape, k + 1, std::move(block), rng, res.calls);
  }
  res.x0_pred = std::move(block);
  return res;
}

namespace {

int visited_count(const SamplerConfig& config, const NoiseSchedule& schedule) {
  return config.n_steps == 0 ? schedule.T : config.n_steps;
}

void emit(Trajectory& latents, int t, std::span<const TokenId> row, const LatentHook& hook) {
  std::copy(row.begin(), row.end(), latents.row(t).begin());
  if (hook && t >= 1) hook(t, latents.row(t));
}

GenerationTrace run_caddi(const Denoiser& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                          const LatentHook& hook) {
  config.validate(schedule.T);
  const Shape shape = resolve_shape(model, config);
  Rng rng(config.seed);
  GenerationTrace trace;
  trace.latents = initial_latents(schedule, config, shape, rng);
  if (hook) hook(schedule.T, trace.latents.row(schedule.T));
  const std::vector<int> visits = step_skip_schedule(schedule.T, visited_count(config, schedule));
  TokenSequence draft;
  for (std::size_t k = 0; k < visits.size(); ++k) {
    const int t = visits[k];
    const int next = k + 1 < visits.size() ? visits[k + 1] : 0;
    StepRecord rec;
    rec.t = t;
    if (config.speculative && !draft.empty()) {
      SpeculativeResult s = speculative_step(model, trace.latents, t, draft, config, rng);
      rec.x0_pred = std::move(s.x0_pred);
      rec.accepted = static_cast<int>(s.accepted);
      rec.calls = s.calls;
    } else {
      rec.x0_pred = predict_block(model, trace.latents, t, config, shape, rng, rec.calls);
    }
    // Skipped timesteps re-corrupt the latest prediction without a model call.
    for (int s = t; s > next; --s) {
      TokenSequence row = recorrupt(rec.x0_pred, schedule.alpha[static_cast<std::size_t>(s - 1)], config, shape, rng);
      if (s == t) rec.x_prev = row;
      emit(trace.latents, s - 1, row, hook);
    }
    trace.model_calls += rec.calls;
    draft = rec.x0_pred;
    trace.steps.push_back(std::move(rec));
  }
  const auto row0 = trace.latents.row(0);
  trace.x0.assign(row0.begin(), row0.end());
  return trace;
}

}  // namespace

GenerationTrace sample_caddi(const Denoiser& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                             const LatentHook& hook) {
  if (config.mode != SamplerMode::caddi) throw Error("sample_caddi needs mode caddi");
  return run_caddi(model, schedule, config, hook);
}

GenerationTrace sample_caddi_ar(const Denoiser& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                                const LatentHook& hook) {
  if (config.mode != SamplerMode::caddi_ar) throw Error("sample_caddi_ar needs mode caddi_ar");
  return run_caddi(model, schedule, config, hook);
}

GenerationTrace sample_markov_baseline(const Denoiser& model, const NoiseSchedule& schedule,
                                       const SamplerConfig& config, const LatentHook& hook) {
  if (config.mode != SamplerMode::markov_baseline) throw Error("sample_markov_baseline needs mode markov_baseline");
  config.validate(schedule.T);
  const Shape shape = resolve_shape(model, config);
  Rng rng(config.seed);
  GenerationTrace trace;
  trace.latents = initial_latents(schedule, config, shape, rng);
  if (hook) hook(schedule.T, trace.latents.row(schedule.T));
  const std::vector<int> visits = step_skip_schedule(schedule.T, visited_count(config, schedule));
  for (std::size_t k = 0; k < visits.size(); ++k) {
    const int t = visits[k];
    const int next = k + 1 < visits.size() ? visits[k + 1] : 0;
    StepRecord rec;
    rec.t = t;
    rec.x0_pred = predict_block(model, trace.latents, t, config, shape, rng, rec.calls);
    for (int s = t; s > next; --s) {
      const auto cur = trace.latents.row(s);
      TokenSequence row = markov_reverse_step(cur, rec.x0_pred, s, s - 1, schedule, shape.mask_id, rng);
      clamp_prompt(row, config);
      if (s == t) rec.x_prev = row;
      emit(trace.latents, s - 1, row, hook);
    }
    trace.model_calls += rec.calls;
    trace.steps.push_back(std::move(rec));
  }
  const auto row0 = trace.latents.row(0);
  trace.x0.assign(row0.begin(), row0.end());
  return trace;
}

GenerationTrace generate(const Denoiser& model, const NoiseSchedule& schedule, const SamplerConfig& config,
                         const LatentHook& hook) {
  switch (config.mode) {
    case SamplerMode::caddi:
      return sample_caddi(model, schedule, config, hook);
    case SamplerMode::caddi_ar:
      return sample_caddi_ar(model, schedule, config, hook);
    case SamplerMode::markov_baseline:
      return sample_markov_baseline(model, schedule, config, hook);
  }
  throw Error("unknown sampler mode");
}

}  // namespace caddi
