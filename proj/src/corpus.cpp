#include "caddi/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace caddi {

std::u32string utf8_to_u32(std::string_view utf8) {
  std::u32string out;
  out.reserve(utf8.size());
  std::size_t i = 0;
  while (i < utf8.size()) {
    const auto lead = static_cast<unsigned char>(utf8[i]);
    std::size_t extra = 0;
    char32_t cp = 0;
    if (lead < 0x80) {
      cp = lead;
    } else if ((lead & 0xE0) == 0xC0) {
      cp = lead & 0x1F;
      extra = 1;
    } else if ((lead & 0xF0) == 0xE0) {
      cp = lead & 0x0F;
      extra = 2;
    } else if ((lead & 0xF8) == 0xF0) {
      cp = lead & 0x07;
      extra = 3;
    } else {
      throw Error("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + extra >= utf8.size()) {
      throw Error("truncated UTF-8 sequence at offset " + std::to_string(i));
    }
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cont = static_cast<unsigned char>(utf8[i + k]);
      if ((cont & 0xC0) != 0x80) throw Error("invalid UTF-8 continuation at offset " + std::to_string(i + k));
      cp = (cp << 6) | (cont & 0x3F);
    }
    out.push_back(cp);
    i += extra + 1;
  }
  return out;
}

std::string u32_to_utf8(std::u32string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char32_t cp : text) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

Vocabulary Vocabulary::build(std::string_view corpus_utf8) {
  if (corpus_utf8.empty()) throw Error("empty corpus");
  std::u32string chars = utf8_to_u32(corpus_utf8);
  std::sort(chars.begin(), chars.end());
  chars.erase(std::unique(chars.begin(), chars.end()), chars.end());
  return from_symbols(std::move(chars));
}

Vocabulary Vocabulary::from_symbols(std::u32string symbols) {
  Vocabulary v;
  v.symbols_ = std::move(symbols);
  v.index_.reserve(v.symbols_.size());
  for (std::size_t i = 0; i < v.symbols_.size(); ++i) {
    v.index_.emplace_back(v.symbols_[i], static_cast<TokenId>(i));
  }
  std::sort(v.index_.begin(), v.index_.end());
  for (std::size_t i = 1; i < v.index_.size(); ++i) {
    if (v.index_[i].first == v.index_[i - 1].first) throw Error("duplicate vocabulary symbol");
  }
  return v;
}

TokenSequence Vocabulary::encode(std::string_view utf8) const {
  const std::u32string text = utf8_to_u32(utf8);
  TokenSequence ids;
  ids.reserve(text.size());
  for (std::size_t pos = 0; pos < text.size(); ++pos) {
    auto it = std::lower_bound(index_.begin(), index_.end(), std::make_pair(text[pos], TokenId{0}));
    if (it == index_.end() || it->first != text[pos]) {
      throw EncodeError("unknown character at position " + std::to_string(pos), pos);
    }
    ids.push_back(it->second);
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::u32string text;
  text.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= size_augmented()) {
      throw Error("token id " + std::to_string(id) + " outside augmented vocabulary");
    }
    text.push_back(id == mask_id() ? mask_marker_ : symbols_[static_cast<std::size_t>(id)]);
  }
  return u32_to_utf8(text);
}

BatchStream::BatchStream(std::span<const TokenId> corpus, std::size_t seq_len,
                         std::size_t batch_size, std::uint64_t seed, bool random_offset)
    : corpus_(corpus.begin(), corpus.end()),
      seq_len_(seq_len),
      batch_size_(batch_size),
      random_offset_(random_offset),
      rng_(seed) {
  if (seq_len == 0) throw Error("sequence length must be positive");
  if (batch_size == 0) throw Error("batch size must be positive");
  if (seq_len > corpus_.size()) throw Error("sequence length exceeds corpus length");
  const std::size_t n = corpus_.size() / seq_len;
  starts_.resize(n);
  for (std::size_t i = 0; i < n; ++i) starts_[i] = i * seq_len;
  reshuffle();
}

void BatchStream::reshuffle() {
  std::shuffle(starts_.begin(), starts_.end(), rng_.engine());
  cursor_ = 0;
}

std::vector<TokenSequence> BatchStream::next() {
  std::vector<TokenSequence> batch;
  batch.reserve(batch_size_);
  for (std::size_t b = 0; b < batch_size_; ++b) {
    std::size_t start;
    if (random_offset_) {
      start = rng_.below(corpus_.size() - seq_len_ + 1);
    } else {
      if (cursor_ == starts_.size()) reshuffle();
      start = starts_[cursor_++];
    }
    batch.emplace_back(corpus_.begin() + static_cast<std::ptrdiff_t>(start),
                       corpus_.begin() + static_cast<std::ptrdiff_t>(start + seq_len_));
  }
  return batch;
}

std::vector<TokenSequence> split_windows(std::span<const TokenId> corpus, std::size_t seq_len) {
  if (seq_len == 0) throw Error("sequence length must be positive");
  if (seq_len > corpus.size()) throw Error("sequence length exceeds corpus length");
  std::vector<TokenSequence> out;
  for (std::size_t start = 0; start + seq_len <= corpus.size(); start += seq_len) {
    out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                     corpus.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace caddi
