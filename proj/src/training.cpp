#include "caddi/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <string>

#include "caddi/corpus.hpp"

namespace caddi {

void DenoiseSetup::validate() const {
  context.validate();
  if (process == ProcessKind::markov && kernel != KernelKind::absorbing) {
    throw Error("the Markov baseline is defined for absorbing kernels only");
  }
  if (process == ProcessKind::markov && context.autoregressive) {
    throw Error("the Markov baseline has no token-autoregressive variant");
  }
}

std::vector<double> loss_weights(const NoiseSchedule& schedule, ReconWeight mode) {
  std::vector<double> w(static_cast<std::size_t>(schedule.T) + 1, 0.0);
  for (int t = 1; t <= schedule.T; ++t) {
    const double a = schedule.alpha[static_cast<std::size_t>(t - 1)];
    w[static_cast<std::size_t>(t)] = mode == ReconWeight::exact ? 1.0 - a : a;
  }
  return w;
}

std::vector<double> markov_loss_weights(const NoiseSchedule& schedule) {
  std::vector<double> w(static_cast<std::size_t>(schedule.T) + 1, 0.0);
  for (std::size_t t = 1; t < w.size(); ++t) {
    const double cur = schedule.alpha_star[t];
    w[t] = cur > 0.0 ? (cur - schedule.alpha_star[t - 1]) / cur : 0.0;
  }
  return w;
}

std::vector<double> x0_log_probs(std::span<const double> logits_row, std::size_t vocab_real) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < vocab_real; ++v) mx = std::max(mx, logits_row[v]);
  double sum = 0.0;
  for (std::size_t v = 0; v < vocab_real; ++v) sum += std::exp(logits_row[v] - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(vocab_real);
  for (std::size_t v = 0; v < vocab_real; ++v) out[v] = logits_row[v] - lse;
  return out;
}

namespace {

void check_sequence(std::span<const TokenId> x0, const Trajectory& traj, const NoiseSchedule& schedule) {
  if (traj.horizon() != schedule.T) throw Error("trajectory horizon does not match the schedule");
  if (traj.length() != x0.size()) throw Error("trajectory length does not match x0");
}

std::span<const double> row_of(const std::vector<double>& logits, std::size_t row, std::size_t V) {
  return {logits.data() + row * V, V};
}

}  // namespace

std::vector<RowTarget> step_targets(const ModelInput& input, const ContextSpec& spec, std::span<const TokenId> x0,
                                    double weight) {
  std::vector<RowTarget> out;
  out.reserve(x0.size());
  for (std::size_t j = 0; j < x0.size(); ++j) out.push_back({prediction_row(input, spec, j), x0[j], weight});
  return out;
}

std::vector<RowTarget> window_targets(const ModelInput& input, const DenoiseSetup& setup, std::span<const TokenId> x0,
                                      std::span<const double> weights, TokenId mask_id) {
  const ContextSpec& spec = setup.context;
  const FlatContext& ctx = input.context;
  const std::size_t L = ctx.block_len;
  const bool masked_only = setup.process == ProcessKind::markov;
  std::vector<RowTarget> out;
  auto add = [&](std::size_t row, std::size_t j, int t) {
    if (masked_only && ctx.tokens[row] != mask_id) return;
    out.push_back({row, x0[j], weights[static_cast<std::size_t>(t)]});
  };
  if (spec.attention == MaskMode::block_causal) {
    for (std::size_t b = 0; b < ctx.block_count(); ++b) {
      for (std::size_t j = 0; j < L; ++j) add(b * L + j, j, ctx.block_times[b]);
    }
    return out;
  }
  const int t = ctx.block_times[ctx.block_count() - (spec.autoregressive ? 2 : 1)];
  for (std::size_t j = 0; j < L; ++j) {
    const std::size_t row = prediction_row(input, spec, j);
    if (masked_only && ctx.tokens[input.latent_size - L + j] != mask_id) continue;
    out.push_back({row, x0[j], weights[static_cast<std::size_t>(t)]});
  }
  return out;
}

LossReport loss_absorb(const Denoiser& model, std::span<const TokenId> x0, const Trajectory& traj,
                       const NoiseSchedule& schedule, const DenoiseSetup& setup) {
  setup.validate();
  if (setup.kernel != KernelKind::absorbing) {
    throw Error("loss_absorb requires an absorbing kernel; use elbo_general for other kernels");
  }
  check_sequence(x0, traj, schedule);
  const std::size_t V = model.vocab_augmented();
  const std::size_t vocab_real = V - 1;
  const auto mask_id = static_cast<TokenId>(vocab_real);
  const std::vector<double> w = loss_weights(schedule, setup.recon);
  LossReport rep;
  rep.components.assign(static_cast<std::size_t>(schedule.T) + 1, 0.0);
  rep.tokens = x0.size();
  for (int t = 1; t <= schedule.T; ++t) {
    const ModelInput in = make_model_input(traj, t, setup.context, mask_id, x0);
    const std::vector<double> logits = model.logits(in.context, in.mask);
    double ce = 0.0;
    for (std::size_t j = 0; j < x0.size(); ++j) {
      const auto lp = x0_log_probs(row_of(logits, prediction_row(in, setup.context, j), V), vocab_real);
      ce -= lp[static_cast<std::size_t>(x0[j])];
    }
    const double term = w[static_cast<std::size_t>(t)] * ce;
    rep.components[static_cast<std::size_t>(t)] = term;
    rep.total += term;
  }
  return rep;
}

namespace {

double kl_categorical(const std::vector<double>& p, const std::vector<double>& q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return kl;
}

}  // namespace

LossReport elbo_trajectory(const Denoiser& model, std::span<const TokenId> x0, const Trajectory& traj,
                           const NoiseSchedule& schedule, const DenoiseSetup& setup) {
  setup.validate();
  if (setup.process != ProcessKind::nonmarkov) throw Error("elbo_general evaluates the non-Markov process");
  check_sequence(x0, traj, schedule);
  const std::size_t V = model.vocab_augmented();
  const std::size_t vocab_real = V - 1;
  const auto mask_id = static_cast<TokenId>(vocab_real);
  const MarginalKernel kernel(setup.kernel, vocab_real);
  const std::size_t S = kernel.state_count();
  const auto T = static_cast<std::size_t>(schedule.T);
  LossReport rep;
  rep.components.assign(T + 1, 0.0);
  rep.tokens = x0.size();

  // Prior KL, stored in component 0.
  const double aT = schedule.alpha[T];
  std::vector<double> prior(S);
  for (std::size_t s = 0; s < S; ++s) {
    if (setup.kernel == KernelKind::absorbing) {
      prior[s] = s == vocab_real ? aT : (1.0 - aT) / static_cast<double>(vocab_real);
    } else {
      prior[s] = 1.0 / static_cast<double>(vocab_real);
    }
  }
  for (TokenId v : x0) rep.components[0] -= kl_categorical(kernel.row(v, aT), prior);

  for (std::size_t t = 1; t <= T; ++t) {
    const ModelInput in = make_model_input(traj, static_cast<int>(t), setup.context, mask_id, x0);
    const std::vector<double> logits = model.logits(in.context, in.mask);
    const double a = schedule.alpha[t - 1];
    double term = 0.0;
    for (std::size_t j = 0; j < x0.size(); ++j) {
      const auto lp = x0_log_probs(row_of(logits, prediction_row(in, setup.context, j), V), vocab_real);
      const auto target = static_cast<std::size_t>(x0[j]);
      if (t == 1) {
        term += lp[target];
        continue;
      }
      std::vector<double> model_row(S, 0.0);
      for (std::size_t v = 0; v < vocab_real; ++v) {
        const double mu = std::exp(lp[v]);
        const std::vector<double> r = kernel.row(static_cast<TokenId>(v), a);
        for (std::size_t s = 0; s < S; ++s) model_row[s] += mu * r[s];
      }
      term -= kl_categorical(kernel.row(x0[j], a), model_row);
    }
    rep.components[t] = term;
  }
  for (double c : rep.components) rep.total += c;
  return rep;
}

ElboEstimate elbo_general(const Denoiser& model, std::span<const TokenId> x0, const NoiseSchedule& schedule,
                          const DenoiseSetup& setup, std::size_t n_mc, std::uint64_t seed) {
  if (n_mc < 1) throw Error("elbo_general needs n_mc >= 1");
  const MarginalKernel kernel(setup.kernel, model.vocab_augmented() - 1);
  Rng rng(seed);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < n_mc; ++i) {
    const Trajectory traj = forward_sample(x0, schedule, kernel, rng);
    const double b = elbo_trajectory(model, x0, traj, schedule, setup).total;
    sum += b;
    sum_sq += b * b;
  }
  ElboEstimate est;
  est.samples = n_mc;
  est.bound = sum / static_cast<double>(n_mc);
  if (n_mc > 1) {
    const double var = std::max(0.0, (sum_sq - sum * est.bound) / static_cast<double>(n_mc - 1));
    est.std_error = std::sqrt(var / static_cast<double>(n_mc));
  }
  return est;
}

template <class Real>
double weighted_cross_entropy(std::span<const Real> logits, std::size_t vocab_augmented,
                              std::span<const RowTarget> targets, std::vector<Real>* dlogits, double grad_scale) {
  const std::size_t V = vocab_augmented;
  const std::size_t vocab_real = V - 1;
  if (dlogits) dlogits->assign(logits.size(), Real(0));
  double total = 0.0;
  std::vector<double> p(vocab_real);
  for (const RowTarget& tg : targets) {
    const Real* row = logits.data() + tg.row * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < vocab_real; ++v) mx = std::max(mx, static_cast<double>(row[v]));
    double sum = 0.0;
    for (std::size_t v = 0; v < vocab_real; ++v) {
      p[v] = std::exp(static_cast<double>(row[v]) - mx);
      sum += p[v];
    }
    const auto target = static_cast<std::size_t>(tg.target);
    total += tg.weight * (std::log(sum) + mx - static_cast<double>(row[target]));
    if (dlogits) {
      Real* g = dlogits->data() + tg.row * V;
      for (std::size_t v = 0; v < vocab_real; ++v) {
        const double d = p[v] / sum - (v == target ? 1.0 : 0.0);
        g[v] += static_cast<Real>(tg.weight * grad_scale * d);
      }
    }
  }
  return total;
}

template <class Real>
double input_loss(const Parameters<Real>& params, const ModelInput& input, std::span<const RowTarget> targets,
                  Parameters<Real>* grads, double grad_scale) {
  const auto V = static_cast<std::size_t>(params.config.vocab_augmented);
  if (!grads) {
    const std::vector<Real> logits = forward(params, input.context, input.mask);
    return weighted_cross_entropy<Real>(logits, V, targets, nullptr);
  }
  ForwardCache<Real> cache;
  const std::vector<Real> logits = forward(params, input.context, input.mask, &cache);
  std::vector<Real> dlogits;
  const double loss = weighted_cross_entropy<Real>(logits, V, targets, &dlogits, grad_scale);
  backward(params, cache, std::span<const Real>(dlogits), *grads);
  return loss;
}

template <class Real>
double loss_absorb_grad(const Parameters<Real>& params, std::span<const TokenId> x0, const Trajectory& traj,
                        const NoiseSchedule& schedule, const DenoiseSetup& setup, Parameters<Real>* grads) {
  setup.validate();
  if (setup.kernel != KernelKind::absorbing) {
    throw Error("loss_absorb requires an absorbing kernel; use elbo_general for other kernels");
  }
  check_sequence(x0, traj, schedule);
  const auto mask_id = static_cast<TokenId>(params.config.vocab_augmented - 1);
  const std::vector<double> w = loss_weights(schedule, setup.recon);
  double total = 0.0;
  for (int t = 1; t <= schedule.T; ++t) {
    const ModelInput in = make_model_input(traj, t, setup.context, mask_id, x0);
    const auto targets = step_targets(in, setup.context, x0, w[static_cast<std::size_t>(t)]);
    total += input_loss(params, in, targets, grads);
  }
  return total;
}

void TrainConfig::validate() const {
  setup.validate();
  model.validate();
  if (schedule.T < 1) throw Error("schedule horizon must be at least 1");
  if (seq_len < 1 || batch_size < 1) throw Error("seq_len and batch_size must be positive");
  if (total_steps < 1) throw Error("total_steps must be positive");
  if (warmup_steps < 0 || warmup_steps > total_steps) throw Error("warmup_steps must lie in [0, total_steps]");
  if (learning_rate < 0.0 || !std::isfinite(learning_rate)) throw Error("learning rate must be finite and >= 0");
  if (log_every < 1) throw Error("log_every must be positive");
  if (model.max_timesteps < schedule.T) throw Error("model max_timesteps is below the schedule horizon");
}

double learning_rate_at(const TrainConfig& c, int step) {
  if (step <= c.warmup_steps) return c.learning_rate * step / std::max(1, c.warmup_steps);
  const double remaining = static_cast<double>(c.total_steps - step + 1);
  return c.learning_rate * remaining / static_cast<double>(c.total_steps - c.warmup_steps + 1);
}

namespace {

struct Sample {
  TokenSequence x0;
  Trajectory traj;
  int t = 1;
};

Sample draw_sample(TokenSequence x0, const TrainConfig& c, const MarginalKernel& kernel, Rng& rng) {
  Sample s;
  s.traj = c.setup.process == ProcessKind::nonmarkov ? forward_sample(x0, c.schedule, kernel, rng)
                                                     : forward_sample_markov(x0, c.schedule, kernel, rng);
  s.t = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(c.schedule.T)));
  s.x0 = std::move(x0);
  return s;
}

double sample_loss(const Parameters<float>& params, const Sample& s, const TrainConfig& c,
                   const std::vector<double>& weights, TokenId mask_id, Parameters<float>* grads, double scale) {
  const ModelInput in = make_model_input(s.traj, s.t, c.setup.context, mask_id, s.x0);
  const auto targets = window_targets(in, c.setup, s.x0, weights, mask_id);
  return input_loss(params, in, targets, grads, scale);
}

bool is_matrix(const TensorInfo& t) { return t.rows > 1 && t.cols > 1; }

}  // namespace

TrainResult train(const TrainConfig& c, std::span<const TokenId> corpus,
                  const std::function<void(const LossPoint&)>& progress) {
  c.validate();
  const auto vocab_real = static_cast<std::size_t>(c.model.vocab_augmented - 1);
  const auto mask_id = static_cast<TokenId>(vocab_real);
  for (TokenId v : corpus) {
    if (v < 0 || static_cast<std::size_t>(v) >= vocab_real) throw Error("corpus contains ids outside the model vocabulary");
  }
  const MarginalKernel kernel(c.setup.kernel, vocab_real);
  const std::vector<double> weights = c.setup.process == ProcessKind::nonmarkov
                                          ? loss_weights(c.schedule, c.setup.recon)
                                          : markov_loss_weights(c.schedule);

  TrainResult res;
  res.params = init_params<float>(c.model, derive_seed(c.seed, 1));
  Parameters<float>& params = res.params;
  Parameters<float> grads = Parameters<float>::zeros(c.model);
  std::vector<float> m(params.data.size(), 0.0f), v(params.data.size(), 0.0f);
  std::vector<std::uint8_t> decay(params.data.size(), 0);
  for (const TensorInfo& t : params.tensors) {
    if (is_matrix(t) && t.name != "embed") std::fill_n(decay.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 1);
  }

  BatchStream stream(corpus, c.seq_len, c.batch_size, derive_seed(c.seed, 2), c.random_offset);
  Rng rng(derive_seed(c.seed, 3));

  std::vector<Sample> probe;
  {
    Rng probe_rng(derive_seed(c.seed, 4));
    const auto windows = split_windows(corpus, c.seq_len);
    for (std::size_t i = 0; i < std::min(c.probe_sequences, windows.size()); ++i) {
      probe.push_back(draw_sample(windows[i * windows.size() / std::min(c.probe_sequences, windows.size())], c,
                                  kernel, probe_rng));
    }
  }
  auto probe_loss = [&]() {
    double total = 0.0;
    for (const Sample& s : probe) total += sample_loss(params, s, c, weights, mask_id, nullptr, 1.0);
    return probe.empty() ? 0.0 : total / static_cast<double>(probe.size() * c.seq_len);
  };

  const auto start = std::chrono::steady_clock::now();
  const double tokens = static_cast<double>(c.batch_size * c.seq_len);
  for (int step = 1; step <= c.total_steps; ++step) {
    const double lr = learning_rate_at(c, step);
    std::fill(grads.data.begin(), grads.data.end(), 0.0f);
    double total = 0.0;
    for (TokenSequence& x0 : stream.next()) {
      const Sample s = draw_sample(std::move(x0), c, kernel, rng);
      total += sample_loss(params, s, c, weights, mask_id, &grads, 1.0 / tokens);
    }
    const double loss = total / tokens;
    if (!std::isfinite(loss)) throw Error("non-finite loss at step " + std::to_string(step));

    double norm_sq = 0.0;
    for (float g : grads.data) norm_sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(norm_sq);
    const double clip = c.grad_clip > 0.0 && norm > c.grad_clip ? c.grad_clip / norm : 1.0;
    const double bc1 = 1.0 - std::pow(c.beta1, step);
    const double bc2 = 1.0 - std::pow(c.beta2, step);
    const auto b1 = static_cast<float>(c.beta1);
    const auto b2 = static_cast<float>(c.beta2);
    for (std::size_t i = 0; i < params.data.size(); ++i) {
      const float g = static_cast<float>(grads.data[i] * clip);
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double p = params.data[i];
      if (decay[i]) p -= lr * c.weight_decay * p;
      p -= lr * mhat / (std::sqrt(vhat) + c.adam_eps);
      params.data[i] = static_cast<float>(p);
    }

    LossPoint pt{step, loss, lr, std::numeric_limits<double>::quiet_NaN()};
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool out_of_time = c.max_seconds > 0.0 && elapsed >= c.max_seconds;
    if (step % c.log_every == 0 || step == c.total_steps || step == 1 || out_of_time) pt.probe_loss = probe_loss();
    res.curve.push_back(pt);
    res.steps_done = step;
    if (progress) progress(pt);
    if (out_of_time) break;
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

GradCheckResult grad_check(const Parameters<double>& params, const LossGradFn& loss, double eps,
                           std::size_t per_group, std::uint64_t seed, double floor) {
  Parameters<double> analytic = Parameters<double>::zeros(params.config);
  loss(params, &analytic);
  Parameters<double> probe = params;
  Rng rng(seed);
  GradCheckResult res;
  for (const TensorInfo& t : params.tensors) {
    std::vector<std::size_t> picks;
    if (t.size() <= per_group) {
      for (std::size_t i = 0; i < t.size(); ++i) picks.push_back(i);
    } else {
      for (std::size_t i = 0; i < per_group; ++i) picks.push_back(rng.below(t.size()));
    }
    for (std::size_t i : picks) {
      const std::size_t idx = t.offset + i;
      const double orig = probe.data[idx];
      probe.data[idx] = orig + eps;
      const double up = loss(probe, nullptr);
      probe.data[idx] = orig - eps;
      const double down = loss(probe, nullptr);
      probe.data[idx] = orig;
      const double fd = (up - down) / (2.0 * eps);
      const double a = analytic.data[idx];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
      ++res.checked;
      if (res.worst_tensor.empty() || rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_tensor = t.name;
      }
    }
  }
  return res;
}

#define CADDI_INSTANTIATE_TRAINING(Real)                                                                         \
  template double weighted_cross_entropy<Real>(std::span<const Real>, std::size_t, std::span<const RowTarget>, \
                                               std::vector<Real>*, double);                                    \
  template double input_loss<Real>(const Parameters<Real>&, const ModelInput&, std::span<const RowTarget>,     \
                                   Parameters<Real>*, double);                                                 \
  template double loss_absorb_grad<Real>(const Parameters<Real>&, std::span<const TokenId>, const Trajectory&, \
                                         const NoiseSchedule&, const DenoiseSetup&, Parameters<Real>*);

CADDI_INSTANTIATE_TRAINING(float)
CADDI_INSTANTIATE_TRAINING(double)

#undef CADDI_INSTANTIATE_TRAINING

}  // namespace caddi
