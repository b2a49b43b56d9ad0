#pragma once

// Run configuration shared by every CLI subcommand: a flat set of known keys
// with defaults, read from `key = value` files (# starts a comment) and
// overridden by flags.

#include <map>
#include <string>
#include <vector>

#include "caddi/common.hpp"
#include "caddi/corpus.hpp"
#include "caddi/sampler.hpp"
#include "caddi/training.hpp"

namespace caddi {

// Malformed or unknown configuration; the CLI maps it to exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct KeySpec {
  std::string key;
  std::string default_value;
  std::string help;
};

class RunConfig {
 public:
  static const std::vector<KeySpec>& keys();
  static bool known(const std::string& key);

  RunConfig();

  void set(const std::string& key, const std::string& value);
  void parse_text(const std::string& text, const std::string& origin = "config");
  void load_file(const std::string& path);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool explicitly_set(const std::string& key) const { return explicit_.count(key) != 0; }

  // Every key as `key = value`, sorted.
  std::string resolved() const;

  NoiseSchedule schedule() const;
  DenoiseSetup setup() const;
  ModelConfig model(int vocab_augmented) const;
  TrainConfig train_config(int vocab_augmented) const;
  // Prompt positions must already be encoded by the caller.
  SamplerConfig sampler_config() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> explicit_;
};

KernelKind parse_kernel(const std::string& s);
ProcessKind parse_process(const std::string& s);
MaskMode parse_attention(const std::string& s);
Compression parse_compression(const std::string& s);
ReconWeight parse_recon(const std::string& s);
SamplerMode parse_sampler_mode(const std::string& s);
VerifyPolicy parse_verify(const std::string& s);

std::string to_string(KernelKind k);
std::string to_string(ProcessKind p);
std::string to_string(MaskMode m);
std::string to_string(Compression c);
std::string to_string(ReconWeight r);

// Vocabulary as a comma-separated list of hex code points, and back.
std::string encode_symbols(const Vocabulary& vocab);
Vocabulary decode_symbols(const std::string& text);

// "TEXT@POS" -> prompt tokens at POS, POS+1, ...
std::vector<PromptToken> parse_prompt(const std::string& spec, const Vocabulary& vocab);

}  // namespace caddi
