#include "caddi/denoiser.hpp"

#include <cmath>
#include <string>

#include "caddi/kernels.hpp"

namespace caddi {

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1) throw Error("model dimensions must be positive");
  if (d_model % n_heads != 0) throw Error("d_model must be divisible by n_heads");
  if (seq_rotary_dims < 0 || time_rotary_dims < 0) throw Error("rotary dims must be non-negative");
  if (seq_rotary_dims % 2 != 0 || time_rotary_dims % 2 != 0) throw Error("rotary subspace sizes must be even");
  if (seq_rotary_dims + time_rotary_dims > d_head()) throw Error("rotary subspaces exceed d_head");
  if (!(seq_base > 0.0) || !(time_base > 0.0)) throw Error("rotary bases must be positive");
  if (vocab_augmented < 2) throw Error("vocabulary must hold at least one symbol plus the mask");
  if (max_positions < 1 || max_timesteps < 0) throw Error("invalid position limits");
}

ModelConfig ModelConfig::make(int n_layers, int d_model, int n_heads, int vocab_augmented) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.vocab_augmented = vocab_augmented;
  const int dh = n_heads > 0 ? d_model / n_heads : 0;
  c.seq_rotary_dims = (dh / 2) & ~1;
  c.time_rotary_dims = (dh / 4) & ~1;
  return c;
}

namespace {

enum LayerTensor {
  kLn1Gain, kLn1Bias, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
  kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2, kLayerTensors
};

std::size_t layer_index(int layer, LayerTensor t) {
  return 1 + static_cast<std::size_t>(layer) * kLayerTensors + t;
}

std::size_t final_index(const ModelConfig& c, int k) {
  return 1 + static_cast<std::size_t>(c.n_layers) * kLayerTensors + static_cast<std::size_t>(k);
}

constexpr double kLnEps = 1e-5;

}  // namespace

std::vector<TensorInfo> parameter_layout(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ff = static_cast<std::size_t>(c.d_ff());
  const auto V = static_cast<std::size_t>(c.vocab_augmented);
  std::vector<TensorInfo> out;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    out.push_back({std::move(name), offset, rows, cols});
    offset += rows * cols;
  };
  add("embed", V, d);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.gain", 1, d);
    add(p + "ln1.bias", 1, d);
    add(p + "attn.wq", d, d);
    add(p + "attn.bq", 1, d);
    add(p + "attn.wk", d, d);
    add(p + "attn.bk", 1, d);
    add(p + "attn.wv", d, d);
    add(p + "attn.bv", 1, d);
    add(p + "attn.wo", d, d);
    add(p + "attn.bo", 1, d);
    add(p + "ln2.gain", 1, d);
    add(p + "ln2.bias", 1, d);
    add(p + "ff.w1", d, ff);
    add(p + "ff.b1", 1, ff);
    add(p + "ff.w2", ff, d);
    add(p + "ff.b2", 1, d);
  }
  add("final.ln.gain", 1, d);
  add("final.ln.bias", 1, d);
  add("out.weight", d, V);
  add("out.bias", 1, V);
  return out;
}

template <class Real>
Parameters<Real> Parameters<Real>::zeros(const ModelConfig& config) {
  Parameters<Real> p;
  p.config = config;
  p.tensors = parameter_layout(config);
  const TensorInfo& last = p.tensors.back();
  p.data.assign(last.offset + last.size(), Real(0));
  return p;
}

template <class Real>
std::size_t Parameters<Real>::find(const std::string& name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name == name) return i;
  }
  throw Error("no parameter tensor named " + name);
}

template <class Real>
Parameters<Real> init_params(const ModelConfig& config, std::uint64_t seed) {
  Parameters<Real> p = Parameters<Real>::zeros(config);
  Rng rng(seed);
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);
  auto fill = [&](std::size_t index, double sd) {
    for (Real& v : p.tensor(index)) v = static_cast<Real>(rng.normal(0.0, sd));
  };
  auto ones = [&](std::size_t index) {
    for (Real& v : p.tensor(index)) v = Real(1);
  };
  fill(0, std_base);
  for (int l = 0; l < config.n_layers; ++l) {
    ones(layer_index(l, kLn1Gain));
    ones(layer_index(l, kLn2Gain));
    fill(layer_index(l, kWq), std_base);
    fill(layer_index(l, kWk), std_base);
    fill(layer_index(l, kWv), std_base);
    fill(layer_index(l, kWo), std_resid);
    fill(layer_index(l, kW1), std_base);
    fill(layer_index(l, kW2), std_resid);
  }
  ones(final_index(config, 0));
  fill(final_index(config, 2), std_base);
  return p;
}

namespace {

double rotary_freq(double base, int pair, int dims) {
  return std::pow(base, -2.0 * pair / static_cast<double>(dims));
}

template <class Real>
void rotate_pair(Real* v, std::size_t i, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double a = static_cast<double>(v[i]);
  const double b = static_cast<double>(v[i + 1]);
  v[i] = static_cast<Real>(a * c - b * s);
  v[i + 1] = static_cast<Real>(a * s + b * c);
}

}  // namespace

template <class Real>
void rotary_2d(std::span<Real> v, int seq_pos, int t, const ModelConfig& config) {
  if (v.size() != static_cast<std::size_t>(config.d_head())) throw Error("rotary input must have d_head entries");
  const int sd = config.seq_rotary_dims;
  const int td = config.time_rotary_dims;
  for (int p = 0; p < sd / 2; ++p) {
    rotate_pair(v.data(), static_cast<std::size_t>(2 * p), seq_pos * rotary_freq(config.seq_base, p, sd));
  }
  for (int p = 0; p < td / 2; ++p) {
    rotate_pair(v.data(), static_cast<std::size_t>(sd + 2 * p), t * rotary_freq(config.time_base, p, td));
  }
}

template <class Real>
void rotary_1d(std::span<Real> v, int seq_pos, const ModelConfig& config) {
  if (v.size() != static_cast<std::size_t>(config.d_head())) throw Error("rotary input must have d_head entries");
  const int sd = config.seq_rotary_dims;
  for (int p = 0; p < sd / 2; ++p) {
    rotate_pair(v.data(), static_cast<std::size_t>(2 * p), seq_pos * rotary_freq(config.seq_base, p, sd));
  }
}

namespace {

template <class Real>
void layer_norm_forward(const std::vector<Real>& x, std::span<const Real> gain, std::span<const Real> bias,
                        std::size_t n, std::size_t d, std::vector<Real>& xhat, std::vector<Real>& rstd,
                        std::vector<Real>& y) {
  xhat.resize(n * d);
  rstd.resize(n);
  y.resize(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const Real* xr = x.data() + i * d;
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<Real>(d);
    const Real rs = Real(1) / std::sqrt(var + static_cast<Real>(kLnEps));
    rstd[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (xr[j] - mean) * rs;
      xhat[i * d + j] = h;
      y[i * d + j] = h * gain[j] + bias[j];
    }
  }
}

// dx += LN backward of dy.
template <class Real>
void layer_norm_backward(const std::vector<Real>& xhat, const std::vector<Real>& rstd, std::span<const Real> gain,
                         const std::vector<Real>& dy, std::size_t n, std::size_t d, std::span<Real> dgain,
                         std::span<Real> dbias, std::vector<Real>& dx) {
  std::vector<Real> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    Real mean_dxhat = 0;
    Real mean_dxhat_xhat = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const Real g = dy[i * d + j];
      const Real h = xhat[i * d + j];
      dgain[j] += g * h;
      dbias[j] += g;
      dxhat[j] = g * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * h;
    }
    mean_dxhat /= static_cast<Real>(d);
    mean_dxhat_xhat /= static_cast<Real>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx[i * d + j] += rstd[i] * (dxhat[j] - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <class Real>
Real gelu(Real u) {
  const Real inner = static_cast<Real>(kGeluC) * (u + Real(0.044715) * u * u * u);
  return Real(0.5) * u * (Real(1) + std::tanh(inner));
}

template <class Real>
Real gelu_grad(Real u) {
  const Real inner = static_cast<Real>(kGeluC) * (u + Real(0.044715) * u * u * u);
  const Real th = std::tanh(inner);
  const Real dinner = static_cast<Real>(kGeluC) * (Real(1) + Real(3) * Real(0.044715) * u * u);
  return Real(0.5) * (Real(1) + th) + Real(0.5) * u * (Real(1) - th * th) * dinner;
}

// Applies the per-row rotation (sign = +1) or its transpose (sign = -1) to
// every head of an n x (heads*d_head) tensor.
template <class Real>
void apply_rotary(std::vector<Real>& x, const std::vector<Real>& cos, const std::vector<Real>& sin,
                  std::size_t n, std::size_t heads, std::size_t d_head, std::size_t pairs, Real sign) {
  const std::size_t width = heads * d_head;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t h = 0; h < heads; ++h) {
      Real* v = x.data() + r * width + h * d_head;
      for (std::size_t p = 0; p < pairs; ++p) {
        const Real c = cos[r * pairs + p];
        const Real s = sign * sin[r * pairs + p];
        const Real a = v[2 * p];
        const Real b = v[2 * p + 1];
        v[2 * p] = a * c - b * s;
        v[2 * p + 1] = a * s + b * c;
      }
    }
  }
}

}  // namespace

template <class Real>
std::vector<Real> forward(const Parameters<Real>& params, const FlatContext& context, const AttentionMask& mask,
                          ForwardCache<Real>* cache) {
  const ModelConfig& c = params.config;
  const std::size_t n = context.size();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ff = static_cast<std::size_t>(c.d_ff());
  const auto V = static_cast<std::size_t>(c.vocab_augmented);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const auto dh = static_cast<std::size_t>(c.d_head());
  if (n == 0) throw Error("empty context");
  if (mask.size() != n) throw Error("attention mask size does not match context length");
  if (n > static_cast<std::size_t>(c.max_positions)) throw Error("context longer than max positions");
  if (context.seq_pos.size() != n || context.time.size() != n) throw Error("context label arrays have wrong length");
  for (std::size_t r = 0; r < n; ++r) {
    if (context.tokens[r] < 0 || static_cast<std::size_t>(context.tokens[r]) >= V) {
      throw Error("token id " + std::to_string(context.tokens[r]) + " outside the model vocabulary");
    }
    if (context.time[r] < 0 || context.time[r] > c.max_timesteps) throw Error("time label beyond max timesteps");
  }

  ForwardCache<Real> local;
  ForwardCache<Real>& cc = cache ? *cache : local;
  cc.n = n;
  cc.tokens = context.tokens;
  cc.mask.assign(mask.data().begin(), mask.data().end());
  const std::size_t sp = static_cast<std::size_t>(c.seq_rotary_dims / 2);
  const std::size_t tp = static_cast<std::size_t>(c.time_rotary_dims / 2);
  const std::size_t pairs = sp + tp;
  cc.cos.resize(n * pairs);
  cc.sin.resize(n * pairs);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t p = 0; p < pairs; ++p) {
      const double angle =
          p < sp ? context.seq_pos[r] * rotary_freq(c.seq_base, static_cast<int>(p), c.seq_rotary_dims)
                 : context.time[r] * rotary_freq(c.time_base, static_cast<int>(p - sp), c.time_rotary_dims);
      cc.cos[r * pairs + p] = static_cast<Real>(std::cos(angle));
      cc.sin[r * pairs + p] = static_cast<Real>(std::sin(angle));
    }
  }

  std::vector<Real> x(n * d);
  const auto embed = params.tensor(0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto id = static_cast<std::size_t>(context.tokens[r]);
    for (std::size_t j = 0; j < d; ++j) x[r * d + j] = embed[id * d + j];
  }

  const kernels::AttentionShape shape{n, heads, dh};
  cc.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (int l = 0; l < c.n_layers; ++l) {
    auto& L = cc.layers[static_cast<std::size_t>(l)];
    auto P = [&](LayerTensor t) { return params.tensor(layer_index(l, t)); };
    L.x_in = x;
    layer_norm_forward(x, P(kLn1Gain), P(kLn1Bias), n, d, L.xhat1, L.rstd1, L.h1);
    L.q.resize(n * d);
    L.k.resize(n * d);
    L.v.resize(n * d);
    kernels::linear_forward<Real>(L.h1, P(kWq), P(kBq), L.q, n, d, d);
    kernels::linear_forward<Real>(L.h1, P(kWk), P(kBk), L.k, n, d, d);
    kernels::linear_forward<Real>(L.h1, P(kWv), P(kBv), L.v, n, d, d);
    apply_rotary(L.q, cc.cos, cc.sin, n, heads, dh, pairs, Real(1));
    apply_rotary(L.k, cc.cos, cc.sin, n, heads, dh, pairs, Real(1));
    L.probs.resize(heads * n * n);
    L.attn.resize(n * d);
    kernels::attention_forward<Real>(L.q, L.k, L.v, cc.mask, L.probs, L.attn, shape);
    std::vector<Real> o(n * d);
    kernels::linear_forward<Real>(L.attn, P(kWo), P(kBo), o, n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];
    L.x_mid = x;
    layer_norm_forward(x, P(kLn2Gain), P(kLn2Bias), n, d, L.xhat2, L.rstd2, L.h2);
    L.u.resize(n * ff);
    kernels::linear_forward<Real>(L.h2, P(kW1), P(kB1), L.u, n, d, ff);
    L.g.resize(n * ff);
    for (std::size_t i = 0; i < n * ff; ++i) L.g[i] = gelu(L.u[i]);
    std::vector<Real> f(n * d);
    kernels::linear_forward<Real>(L.g, P(kW2), P(kB2), f, n, ff, d);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += f[i];
  }
  cc.x_out = x;
  layer_norm_forward(x, params.tensor(final_index(c, 0)), params.tensor(final_index(c, 1)), n, d, cc.xhatf,
                     cc.rstdf, cc.hf);
  std::vector<Real> logits(n * V);
  kernels::linear_forward<Real>(cc.hf, params.tensor(final_index(c, 2)), params.tensor(final_index(c, 3)), logits,
                                n, d, V);
  return logits;
}

template <class Real>
void backward(const Parameters<Real>& params, const ForwardCache<Real>& cc, std::span<const Real> dlogits,
              Parameters<Real>& grads) {
  const ModelConfig& c = params.config;
  const std::size_t n = cc.n;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ff = static_cast<std::size_t>(c.d_ff());
  const auto V = static_cast<std::size_t>(c.vocab_augmented);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const std::size_t pairs = static_cast<std::size_t>((c.seq_rotary_dims + c.time_rotary_dims) / 2);
  if (dlogits.size() != n * V) throw Error("logit gradient has wrong shape");
  if (grads.data.size() != params.data.size()) throw Error("gradient buffer has wrong shape");

  std::vector<Real> dhf(n * d);
  kernels::linear_backward<Real>(cc.hf, params.tensor(final_index(c, 2)), dlogits, dhf,
                                 grads.tensor(final_index(c, 2)), grads.tensor(final_index(c, 3)), n, d, V);
  std::vector<Real> dx(n * d, Real(0));
  layer_norm_backward(cc.xhatf, cc.rstdf, params.tensor(final_index(c, 0)), dhf, n, d,
                      grads.tensor(final_index(c, 0)), grads.tensor(final_index(c, 1)), dx);

  const kernels::AttentionShape shape{n, heads, dh};
  std::vector<Real> dg(n * ff), dh2(n * d), dattn(n * d), dq(n * d), dk(n * d), dv(n * d), dh1(n * d), tmp(n * d);
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& L = cc.layers[static_cast<std::size_t>(l)];
    auto P = [&](LayerTensor t) { return params.tensor(layer_index(l, t)); };
    auto G = [&](LayerTensor t) { return grads.tensor(layer_index(l, t)); };

    // feed-forward branch: x += W2 gelu(W1 LN2(x) + b1) + b2
    kernels::linear_backward<Real>(L.g, P(kW2), dx, dg, G(kW2), G(kB2), n, ff, d);
    for (std::size_t i = 0; i < n * ff; ++i) dg[i] *= gelu_grad(L.u[i]);
    kernels::linear_backward<Real>(L.h2, P(kW1), dg, dh2, G(kW1), G(kB1), n, d, ff);
    layer_norm_backward(L.xhat2, L.rstd2, P(kLn2Gain), dh2, n, d, G(kLn2Gain), G(kLn2Bias), dx);

    // attention branch
    kernels::linear_backward<Real>(L.attn, P(kWo), dx, dattn, G(kWo), G(kBo), n, d, d);
    kernels::attention_backward<Real>(L.q, L.k, L.v, L.probs, cc.mask, dattn, dq, dk, dv, shape);
    apply_rotary(dq, cc.cos, cc.sin, n, heads, dh, pairs, Real(-1));
    apply_rotary(dk, cc.cos, cc.sin, n, heads, dh, pairs, Real(-1));
    kernels::linear_backward<Real>(L.h1, P(kWq), dq, dh1, G(kWq), G(kBq), n, d, d);
    kernels::linear_backward<Real>(L.h1, P(kWk), dk, tmp, G(kWk), G(kBk), n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) dh1[i] += tmp[i];
    kernels::linear_backward<Real>(L.h1, P(kWv), dv, tmp, G(kWv), G(kBv), n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) dh1[i] += tmp[i];
    layer_norm_backward(L.xhat1, L.rstd1, P(kLn1Gain), dh1, n, d, G(kLn1Gain), G(kLn1Bias), dx);
  }

  auto dembed = grads.tensor(0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto id = static_cast<std::size_t>(cc.tokens[r]);
    for (std::size_t j = 0; j < d; ++j) dembed[id * d + j] += dx[r * d + j];
  }
}

template <class Real>
std::vector<double> TransformerDenoiser<Real>::logits(const FlatContext& context, const AttentionMask& mask) const {
  const std::vector<Real> out = forward(params_, context, mask);
  return {out.begin(), out.end()};
}

#define CADDI_INSTANTIATE_DENOISER(Real)                                                                    \
  template struct Parameters<Real>;                                                                        \
  template Parameters<Real> init_params<Real>(const ModelConfig&, std::uint64_t);                          \
  template void rotary_2d<Real>(std::span<Real>, int, int, const ModelConfig&);                            \
  template void rotary_1d<Real>(std::span<Real>, int, const ModelConfig&);                                 \
  template std::vector<Real> forward<Real>(const Parameters<Real>&, const FlatContext&, const AttentionMask&, \
                                           ForwardCache<Real>*);                                           \
  template void backward<Real>(const Parameters<Real>&, const ForwardCache<Real>&, std::span<const Real>,   \
                               Parameters<Real>&);                                                         \
  template class TransformerDenoiser<Real>;

CADDI_INSTANTIATE_DENOISER(float)
CADDI_INSTANTIATE_DENOISER(double)

#undef CADDI_INSTANTIATE_DENOISER

}  // namespace caddi
