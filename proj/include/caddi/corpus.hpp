#pragma once

// Character-level text ingestion: vocabulary, encode/decode, and seeded
// batch sampling of fixed-length windows.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "caddi/common.hpp"

namespace caddi {

// Raised by Vocabulary::encode; carries the code-point offset of the first
// character missing from the vocabulary.
class EncodeError : public Error {
 public:
  EncodeError(const std::string& what, std::size_t position) : Error(what), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

std::u32string utf8_to_u32(std::string_view utf8);
std::string u32_to_utf8(std::u32string_view text);

// Ordered set of distinct characters plus the absorbing symbol, which takes
// the id one past the last real symbol.
class Vocabulary {
 public:
  Vocabulary() = default;

  // Sorted distinct characters of the corpus. Throws Error("empty corpus").
  static Vocabulary build(std::string_view corpus_utf8);
  // Symbols in the given order; must be distinct.
  static Vocabulary from_symbols(std::u32string symbols);

  std::size_t size() const { return symbols_.size(); }
  std::size_t size_augmented() const { return symbols_.size() + 1; }
  TokenId mask_id() const { return static_cast<TokenId>(symbols_.size()); }
  const std::u32string& symbols() const { return symbols_; }

  char32_t mask_marker() const { return mask_marker_; }
  void set_mask_marker(char32_t marker) { mask_marker_ = marker; }

  TokenSequence encode(std::string_view utf8) const;
  std::string decode(std::span<const TokenId> ids) const;

  bool operator==(const Vocabulary& other) const { return symbols_ == other.symbols_; }

 private:
  std::u32string symbols_;
  std::vector<std::pair<char32_t, TokenId>> index_;  // sorted by character
  char32_t mask_marker_ = U'_';
};

// Seeded, reproducible stream of training windows. Non-overlapping windows
// are visited in a per-epoch shuffled order; with random_offset each element
// is an independent uniformly placed crop.
class BatchStream {
 public:
  BatchStream(std::span<const TokenId> corpus, std::size_t seq_len, std::size_t batch_size,
              std::uint64_t seed, bool random_offset = false);

  std::vector<TokenSequence> next();

  std::size_t window_count() const { return starts_.size(); }
  std::size_t seq_len() const { return seq_len_; }

 private:
  void reshuffle();

  std::vector<TokenId> corpus_;
  std::size_t seq_len_;
  std::size_t batch_size_;
  bool random_offset_;
  Rng rng_;
  std::vector<std::size_t> starts_;
  std::size_t cursor_ = 0;
};

// All non-overlapping windows of length seq_len, in corpus order.
std::vector<TokenSequence> split_windows(std::span<const TokenId> corpus, std::size_t seq_len);

std::string read_text_file(const std::string& path);

}  // namespace caddi
