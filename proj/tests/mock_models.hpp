#pragma once

#include "caddi/denoiser.hpp"

namespace caddi::testing {

// Equal logits everywhere.
class UniformModel : public Denoiser {
 public:
  explicit UniformModel(std::size_t vocab_augmented) : V_(vocab_augmented) {}
  std::size_t vocab_augmented() const override { return V_; }
  std::vector<double> logits(const FlatContext& ctx, const AttentionMask&) const override {
    return std::vector<double>(ctx.size() * V_, 0.0);
  }

 private:
  std::size_t V_;
};

// Puts (almost) all mass on a fixed x_0 at every row, indexed by seq_pos.
class OracleModel : public Denoiser {
 public:
  OracleModel(TokenSequence x0, std::size_t vocab_augmented, double margin = 200.0)
      : x0_(std::move(x0)), V_(vocab_augmented), margin_(margin) {}
  std::size_t vocab_augmented() const override { return V_; }
  std::vector<double> logits(const FlatContext& ctx, const AttentionMask&) const override {
    std::vector<double> out(ctx.size() * V_, 0.0);
    for (std::size_t r = 0; r < ctx.size(); ++r) {
      out[r * V_ + static_cast<std::size_t>(x0_[static_cast<std::size_t>(ctx.seq_pos[r])])] = margin_;
    }
    return out;
  }

 private:
  TokenSequence x0_;
  std::size_t V_;
  double margin_;
};

// Predicts the first unmasked token seen at the same position anywhere in the
// context, uniform otherwise.
class CopyModel : public Denoiser {
 public:
  explicit CopyModel(std::size_t vocab_augmented) : V_(vocab_augmented) {}
  std::size_t vocab_augmented() const override { return V_; }
  std::vector<double> logits(const FlatContext& ctx, const AttentionMask&) const override {
    const auto mask = static_cast<TokenId>(V_ - 1);
    std::vector<double> out(ctx.size() * V_, 0.0);
    for (std::size_t r = 0; r < ctx.size(); ++r) {
      for (std::size_t c = 0; c < ctx.size(); ++c) {
        if (ctx.seq_pos[c] == ctx.seq_pos[r] && ctx.tokens[c] != mask) {
          out[r * V_ + static_cast<std::size_t>(ctx.tokens[c])] = 50.0;
          break;
        }
      }
    }
    return out;
  }

 private:
  std::size_t V_;
};

}  // namespace caddi::testing
