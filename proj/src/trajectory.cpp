#include "caddi/trajectory.hpp"

#include <algorithm>
#include <string>

namespace caddi {

Trajectory::Trajectory(int T, std::size_t L, TokenId fill)
    : T_(T), L_(L), tokens_(static_cast<std::size_t>(T + 1) * L, fill) {
  if (T < 1) throw Error("trajectory horizon must be at least 1");
}

std::span<TokenId> Trajectory::row(int t) {
  return {tokens_.data() + static_cast<std::size_t>(t) * L_, L_};
}

std::span<const TokenId> Trajectory::row(int t) const {
  return {tokens_.data() + static_cast<std::size_t>(t) * L_, L_};
}

namespace {

void check_clean(std::span<const TokenId> x0, const MarginalKernel& kernel) {
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (x0[i] < 0 || static_cast<std::size_t>(x0[i]) >= kernel.vocab_size()) {
      throw Error("clean sequence contains non-symbol id at position " + std::to_string(i));
    }
  }
}

}  // namespace

Trajectory forward_sample(std::span<const TokenId> x0, const NoiseSchedule& schedule,
                          const MarginalKernel& kernel, Rng& rng) {
  check_clean(x0, kernel);
  Trajectory traj(schedule.T, x0.size(), 0);
  std::copy(x0.begin(), x0.end(), traj.row(0).begin());
  for (int t = 1; t <= schedule.T; ++t) {
    auto row = traj.row(t);
    const double a = schedule.alpha[static_cast<std::size_t>(t)];
    for (std::size_t i = 0; i < x0.size(); ++i) row[i] = corrupt_token(kernel, x0[i], a, rng);
  }
  return traj;
}

Trajectory forward_sample_markov(std::span<const TokenId> x0, const NoiseSchedule& schedule,
                                 const MarginalKernel& kernel, Rng& rng) {
  check_clean(x0, kernel);
  Trajectory traj(schedule.T, x0.size(), 0);
  std::copy(x0.begin(), x0.end(), traj.row(0).begin());
  for (int t = 1; t <= schedule.T; ++t) {
    auto prev = traj.row(t - 1);
    auto row = traj.row(t);
    const double b = schedule.beta[static_cast<std::size_t>(t)];
    for (std::size_t i = 0; i < x0.size(); ++i) {
      row[i] = prev[i] == kernel.mask_id() && kernel.kind() == KernelKind::absorbing
                   ? prev[i]
                   : corrupt_token(kernel, prev[i], b, rng);
    }
  }
  return traj;
}

void FlatContext::append_block(std::span<const TokenId> block, int t) {
  if (block_len == 0) block_len = block.size();
  if (block.size() != block_len) throw Error("context blocks must share one length");
  for (std::size_t i = 0; i < block.size(); ++i) {
    tokens.push_back(block[i]);
    seq_pos.push_back(static_cast<int>(i));
    time.push_back(t);
  }
  block_times.push_back(t);
}

namespace {

void check_window(const Trajectory& traj, int t, int window) {
  if (window < 1) throw Error("context window must be at least 1");
  if (t < 1 || t > traj.horizon()) {
    throw Error("timestep " + std::to_string(t) + " outside [1, " + std::to_string(traj.horizon()) + "]");
  }
}

}  // namespace

FlatContext truncate(const Trajectory& traj, int t, int window) {
  check_window(traj, t, window);
  FlatContext ctx;
  ctx.layout = Layout::truncated;
  const int top = std::min(t + window - 1, traj.horizon());
  for (int s = top; s >= t; --s) ctx.append_block(traj.row(s), s);
  return ctx;
}

Trajectory recompose_rows(const Trajectory& traj, int t, TokenId mask_id) {
  Trajectory out = traj;
  for (int s = traj.horizon() - 1; s >= t; --s) {
    auto row = out.row(s);
    auto above = out.row(s + 1);
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i] == mask_id) row[i] = above[i];
    }
  }
  return out;
}

FlatContext recompose(const Trajectory& traj, int t, int window, TokenId mask_id) {
  check_window(traj, t, window);
  FlatContext ctx = truncate(recompose_rows(traj, t, mask_id), t, window);
  ctx.layout = Layout::recomposed;
  return ctx;
}

FlatContext bidir_augment(const FlatContext& context) {
  if (context.block_count() == 0) throw Error("cannot augment an empty context");
  FlatContext out = context;
  const std::size_t start = context.size() - context.block_len;
  const std::vector<TokenId> last(context.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                  context.tokens.end());
  out.append_block(last, context.block_times.back());
  out.layout = Layout::augmented;
  return out;
}

AttentionMask build_attention_mask(const FlatContext& context, MaskMode mode) {
  const std::size_t n = context.size();
  AttentionMask mask(mode, n);
  if (mode == MaskMode::token_causal) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c <= r; ++c) mask.set(r, c, true);
    }
    return mask;
  }
  if (context.layout == Layout::augmented || context.layout == Layout::autoregressive) {
    throw Error("block_causal mask is undefined for augmented layouts; use token_causal");
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) mask.set(r, c, context.time[c] >= context.time[r]);
  }
  return mask;
}

void ContextSpec::validate() const {
  if (window < 1) throw Error("context window must be at least 1");
  if (autoregressive && attention != MaskMode::token_causal) {
    throw Error("autoregressive denoising requires token_causal attention");
  }
}

ModelInput make_model_input(const Trajectory& latents, int t, const ContextSpec& spec,
                            TokenId mask_id, std::span<const TokenId> x0_block) {
  spec.validate();
  ModelInput in;
  in.context = spec.compression == Compression::recompose ? recompose(latents, t, spec.window, mask_id)
                                                          : truncate(latents, t, spec.window);
  in.latent_size = in.context.size();
  if (spec.autoregressive) {
    if (x0_block.empty()) {
      const std::vector<TokenId> blank(latents.length(), mask_id);
      in.context.append_block(blank, 0);
    } else {
      in.context.append_block(x0_block, 0);
    }
    in.context.layout = Layout::autoregressive;
  } else if (spec.attention == MaskMode::token_causal) {
    in.context = bidir_augment(in.context);
  }
  in.mask = build_attention_mask(in.context, spec.attention);
  return in;
}

std::size_t prediction_row(const ModelInput& input, const ContextSpec& spec, std::size_t j) {
  const std::size_t L = input.context.block_len;
  if (spec.autoregressive) return input.latent_size - 1 + j;
  if (spec.attention == MaskMode::token_causal) return input.latent_size + j;
  return input.latent_size - L + j;
}

}  // namespace caddi
