#pragma once

// Forward trajectories x_0..x_T and the flattened model contexts built from
// them (truncation, re-composition, causal bidirectional augmentation), plus
// the attention masks that go with each layout.

#include <cstdint>
#include <span>
#include <vector>

#include "caddi/common.hpp"
#include "caddi/schedule.hpp"

namespace caddi {

// (T+1) x L token matrix; row t holds x_t.
class Trajectory {
 public:
  Trajectory() = default;
  Trajectory(int T, std::size_t L, TokenId fill);

  int horizon() const { return T_; }
  std::size_t length() const { return L_; }
  std::span<TokenId> row(int t);
  std::span<const TokenId> row(int t) const;
  TokenId at(int t, std::size_t i) const { return tokens_[static_cast<std::size_t>(t) * L_ + i]; }

  bool operator==(const Trajectory&) const = default;

 private:
  int T_ = 0;
  std::size_t L_ = 0;
  std::vector<TokenId> tokens_;
};

// Row t drawn token-wise from q(x_t | x_0) at level alpha_t, independently of
// every other row.
Trajectory forward_sample(std::span<const TokenId> x0, const NoiseSchedule& schedule,
                          const MarginalKernel& kernel, Rng& rng);
// Markov chain: row t drawn from row t-1 with step probability beta_t.
Trajectory forward_sample_markov(std::span<const TokenId> x0, const NoiseSchedule& schedule,
                                 const MarginalKernel& kernel, Rng& rng);

enum class Layout { truncated, recomposed, augmented, autoregressive };

// Flattened context in descending time order. Every block has length
// block_len; block_times lists the time label of each block in order.
struct FlatContext {
  std::vector<TokenId> tokens;
  std::vector<int> seq_pos;
  std::vector<int> time;
  std::vector<int> block_times;
  std::size_t block_len = 0;
  Layout layout = Layout::truncated;

  std::size_t size() const { return tokens.size(); }
  std::size_t block_count() const { return block_times.size(); }
  void append_block(std::span<const TokenId> block, int t);
};

// Blocks x_{min(t+window-1,T)} .. x_t.
FlatContext truncate(const Trajectory& traj, int t, int window);
// Same window over composite rows x_s^ = first non-mask of x_s, x_{s+1}, ..,
// x_T per position.
FlatContext recompose(const Trajectory& traj, int t, int window, TokenId mask_id);
// Composite rows for every s >= t (rows below t are left as in traj).
Trajectory recompose_rows(const Trajectory& traj, int t, TokenId mask_id);
// Repeats the final block once with identical labels.
FlatContext bidir_augment(const FlatContext& context);

enum class MaskMode { block_causal, token_causal };

class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(MaskMode mode, std::size_t n) : mode_(mode), n_(n), allowed_(n * n, 0) {}

  MaskMode mode() const { return mode_; }
  std::size_t size() const { return n_; }
  bool allowed(std::size_t r, std::size_t c) const { return allowed_[r * n_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { allowed_[r * n_ + c] = v ? 1 : 0; }
  std::span<const std::uint8_t> data() const { return allowed_; }

 private:
  MaskMode mode_ = MaskMode::token_causal;
  std::size_t n_ = 0;
  std::vector<std::uint8_t> allowed_;
};

// token_causal: lower triangular. block_causal: r may see c iff c's block is
// at or before r's block in the flattened order.
AttentionMask build_attention_mask(const FlatContext& context, MaskMode mode);

enum class Compression { truncate, recompose };

// How a denoiser sees the latent trajectory. autoregressive requires
// token_causal attention; token_causal without autoregressive uses the
// bidirectionally augmented layout.
struct ContextSpec {
  int window = 5;
  Compression compression = Compression::truncate;
  MaskMode attention = MaskMode::block_causal;
  bool autoregressive = false;

  void validate() const;
};

struct ModelInput {
  FlatContext context;
  AttentionMask mask;
  std::size_t latent_size = 0;  // entries before any augmentation / x0 block
};

// Context for predicting x_0 at timestep t from rows t..T of latents. For the
// autoregressive spec x0_block (length L, entries past the decoded prefix are
// ignored by causality) is appended with time label 0; an empty x0_block is
// filled with mask_id.
ModelInput make_model_input(const Trajectory& latents, int t, const ContextSpec& spec,
                            TokenId mask_id, std::span<const TokenId> x0_block = {});

// Row whose logits predict x_0^j for the timestep the input was built for.
std::size_t prediction_row(const ModelInput& input, const ContextSpec& spec, std::size_t j);

}  // namespace caddi
