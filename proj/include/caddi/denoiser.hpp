#pragma once

// Decoder-only transformer over flattened trajectory contexts. Positions are
// encoded only through a 2D rotary scheme on queries and keys: one subspace
// rotates with the sequence index, a disjoint one with the diffusion
// timestep. Forward and reverse passes are written out by hand and templated
// on the scalar type (float for training, double for gradient checks).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "caddi/common.hpp"
#include "caddi/trajectory.hpp"

namespace caddi {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int seq_rotary_dims = 8;
  int time_rotary_dims = 4;
  double seq_base = 10000.0;
  double time_base = 10000.0;
  int vocab_augmented = 0;
  int max_positions = 4096;
  int max_timesteps = 1024;

  int d_head() const { return d_model / n_heads; }
  int d_ff() const { return 4 * d_model; }
  void validate() const;

  // Rotary split: half of d_head for sequence, a quarter for time (rounded
  // down to even sizes).
  static ModelConfig make(int n_layers, int d_model, int n_heads, int vocab_augmented);
};

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Tensor layout in declaration order.
std::vector<TensorInfo> parameter_layout(const ModelConfig& config);

// All weights live in one flat array; linear weights are stored in x out.
template <class Real>
struct Parameters {
  ModelConfig config;
  std::vector<TensorInfo> tensors;
  std::vector<Real> data;

  static Parameters zeros(const ModelConfig& config);

  std::span<Real> tensor(std::size_t index) {
    return {data.data() + tensors[index].offset, tensors[index].size()};
  }
  std::span<const Real> tensor(std::size_t index) const {
    return {data.data() + tensors[index].offset, tensors[index].size()};
  }
  std::size_t find(const std::string& name) const;

  template <class Other>
  Parameters<Other> cast() const {
    Parameters<Other> out;
    out.config = config;
    out.tensors = tensors;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

// N(0, 0.02) for embeddings and projections, N(0, 0.02 / sqrt(2 n_layers))
// for the two residual output projections, zero biases, unit gains.
template <class Real>
Parameters<Real> init_params(const ModelConfig& config, std::uint64_t seed);

// In-place rotation of one d_head vector. rotary_1d rotates only the sequence
// subspace.
template <class Real>
void rotary_2d(std::span<Real> v, int seq_pos, int t, const ModelConfig& config);
template <class Real>
void rotary_1d(std::span<Real> v, int seq_pos, const ModelConfig& config);

// Activations kept by forward for the reverse pass.
template <class Real>
struct ForwardCache {
  struct Layer {
    std::vector<Real> x_in, xhat1, rstd1, h1, q, k, v, probs, attn, x_mid, xhat2, rstd2, h2, u, g;
  };
  std::size_t n = 0;
  std::vector<TokenId> tokens;
  std::vector<Real> cos, sin;  // n x rotary pairs
  std::vector<std::uint8_t> mask;
  std::vector<Layer> layers;
  std::vector<Real> x_out, xhatf, rstdf, hf;
};

// n x vocab_augmented logits. Throws on length or time labels beyond the
// configured maxima and on token ids outside the vocabulary.
template <class Real>
std::vector<Real> forward(const Parameters<Real>& params, const FlatContext& context,
                          const AttentionMask& mask, ForwardCache<Real>* cache = nullptr);

// Accumulates parameter gradients of sum(dlogits * logits) into grads.
template <class Real>
void backward(const Parameters<Real>& params, const ForwardCache<Real>& cache,
              std::span<const Real> dlogits, Parameters<Real>& grads);

// Read-only view used by samplers and evaluators.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::size_t vocab_augmented() const = 0;
  virtual std::vector<double> logits(const FlatContext& context, const AttentionMask& mask) const = 0;
};

template <class Real>
class TransformerDenoiser : public Denoiser {
 public:
  explicit TransformerDenoiser(Parameters<Real> params) : params_(std::move(params)) {}
  std::size_t vocab_augmented() const override {
    return static_cast<std::size_t>(params_.config.vocab_augmented);
  }
  std::vector<double> logits(const FlatContext& context, const AttentionMask& mask) const override;
  const Parameters<Real>& params() const { return params_; }

 private:
  Parameters<Real> params_;
};

}  // namespace caddi
