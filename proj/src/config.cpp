#include "caddi/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <sstream>

namespace caddi {

const std::vector<KeySpec>& RunConfig::keys() {
  static const std::vector<KeySpec> specs = {
      {"corpus", "", "training corpus (UTF-8 text)"},
      {"checkpoint", "", "checkpoint file to read"},
      {"out", "out", "output directory"},
      {"seed", "0", "global seed"},
      {"T", "16", "diffusion horizon"},
      {"kernel", "absorbing", "absorbing | uniform"},
      {"process", "nonmarkov", "nonmarkov | markov (baseline chain)"},
      {"window", "5", "context window in timesteps"},
      {"attention", "block_causal", "block_causal | token_causal"},
      {"compression", "truncate", "truncate | recompose"},
      {"autoregressive", "false", "token-autoregressive denoiser"},
      {"recon", "exact", "reconstruction weight: exact | literal"},
      {"layers", "2", "transformer layers"},
      {"d_model", "64", "model width"},
      {"heads", "4", "attention heads"},
      {"seq_rotary_dims", "-1", "rotary dims for sequence position (-1: d_head/2)"},
      {"time_rotary_dims", "-1", "rotary dims for timestep (-1: d_head/4)"},
      {"seq_base", "10000", "rotary base for sequence position"},
      {"time_base", "10000", "rotary base for timestep"},
      {"seq_len", "64", "sequence length"},
      {"batch_size", "16", "sequences per step"},
      {"lr", "3e-4", "peak learning rate"},
      {"warmup", "100", "linear warmup steps"},
      {"train_steps", "1000", "optimizer steps"},
      {"weight_decay", "0.01", "decoupled weight decay"},
      {"grad_clip", "1.0", "global gradient norm clip (0 disables)"},
      {"random_offset", "false", "random crops instead of non-overlapping windows"},
      {"log_every", "10", "probe-loss interval in steps"},
      {"max_seconds", "0", "training wall-clock cap (0 disables)"},
      {"mode", "caddi", "caddi | caddi_ar | markov_baseline"},
      {"sample_steps", "0", "visited timesteps (0: T)"},
      {"temperature", "1.0", "sampling temperature"},
      {"top_k", "0", "top-k filter (0 disables)"},
      {"greedy", "false", "argmax decoding"},
      {"gamma", "1.0", "guidance scale"},
      {"speculative", "false", "draft verification for caddi_ar"},
      {"verify", "greedy", "greedy | threshold"},
      {"p_min", "0.9", "threshold verification confidence"},
      {"prompt", "", "TEXT@POS clamped prompt"},
      {"n", "4", "samples to generate"},
      {"length", "0", "sample length (0: checkpoint seq_len)"},
      {"dump_trajectory", "false", "write every latent row to trajectory.txt"},
      {"n_mc", "4", "trajectories per held-out sequence"},
      {"eval_fraction", "0.1", "held-out tail fraction of the corpus"},
      {"eval_sequences", "64", "maximum held-out sequences"},
      {"oracle_order", "3", "n-gram oracle order"},
      {"t_inject", "0", "injection timestep (0: T/2)"},
      {"fraction", "0.1", "fraction of tokens replaced"},
      {"n_seeds", "20", "paired seeds"},
      {"samples_per_seed", "4", "samples per seed and arm"},
      {"mc_samples", "100000", "Monte-Carlo samples for analyze"},
      {"vocab_size", "8", "uniform source size for analyze"},
  };
  return specs;
}

bool RunConfig::known(const std::string& key) {
  const auto& k = keys();
  return std::any_of(k.begin(), k.end(), [&](const KeySpec& s) { return s.key == key; });
}

RunConfig::RunConfig() {
  for (const KeySpec& s : keys()) values_[s.key] = s.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!known(key)) throw UsageError("unknown config key '" + key + "'");
  values_[key] = value;
  explicit_[key] = true;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::parse_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!known(key)) throw UsageError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
    set(key, trim(line.substr(eq + 1)));
  }
}

void RunConfig::load_file(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  parse_text(text, path);
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  const long r = std::strtol(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0') throw UsageError("config key '" + key + "' expects an integer, got '" + v + "'");
  return static_cast<int>(r);
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  const unsigned long long r = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || v[0] == '-') {
    throw UsageError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return r;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  const double r = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0') throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
  return r;
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("config key '" + key + "' expects true or false, got '" + v + "'");
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

NoiseSchedule RunConfig::schedule() const {
  const int T = get_int("T");
  if (T < 1) throw UsageError("T must be at least 1");
  return NoiseSchedule::linear(T);
}

DenoiseSetup RunConfig::setup() const {
  DenoiseSetup s;
  s.context.window = get_int("window");
  s.context.attention = parse_attention(get("attention"));
  s.context.compression = parse_compression(get("compression"));
  s.context.autoregressive = get_bool("autoregressive");
  s.kernel = parse_kernel(get("kernel"));
  s.process = parse_process(get("process"));
  s.recon = parse_recon(get("recon"));
  return s;
}

ModelConfig RunConfig::model(int vocab_augmented) const {
  ModelConfig m = ModelConfig::make(get_int("layers"), get_int("d_model"), get_int("heads"), vocab_augmented);
  if (get_int("seq_rotary_dims") >= 0) m.seq_rotary_dims = get_int("seq_rotary_dims");
  if (get_int("time_rotary_dims") >= 0) m.time_rotary_dims = get_int("time_rotary_dims");
  m.seq_base = get_double("seq_base");
  m.time_base = get_double("time_base");
  m.max_timesteps = std::max(m.max_timesteps, get_int("T"));
  return m;
}

TrainConfig RunConfig::train_config(int vocab_augmented) const {
  TrainConfig c;
  c.schedule = schedule();
  c.setup = setup();
  c.model = model(vocab_augmented);
  c.seq_len = static_cast<std::size_t>(std::max(0, get_int("seq_len")));
  c.batch_size = static_cast<std::size_t>(std::max(0, get_int("batch_size")));
  c.learning_rate = get_double("lr");
  c.total_steps = get_int("train_steps");
  c.warmup_steps = get_int("warmup");
  // The default warmup shrinks for short runs; an explicit one is validated.
  if (!explicitly_set("warmup")) c.warmup_steps = std::min(c.warmup_steps, c.total_steps / 10);
  c.weight_decay = get_double("weight_decay");
  c.grad_clip = get_double("grad_clip");
  c.random_offset = get_bool("random_offset");
  c.log_every = get_int("log_every");
  c.max_seconds = get_double("max_seconds");
  c.seed = get_u64("seed");
  return c;
}

SamplerConfig RunConfig::sampler_config() const {
  SamplerConfig s;
  s.mode = parse_sampler_mode(get("mode"));
  s.n_steps = get_int("sample_steps");
  s.temperature = get_double("temperature");
  s.top_k = get_int("top_k");
  s.greedy = get_bool("greedy");
  s.gamma = get_double("gamma");
  const DenoiseSetup d = setup();
  s.context = d.context;
  s.kernel = d.kernel;
  s.speculative = get_bool("speculative");
  s.verify = parse_verify(get("verify"));
  s.p_min = get_double("p_min");
  s.seed = get_u64("seed");
  return s;
}

namespace {

template <class E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> options, const char* what) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (s == name) return value;
    names += names.empty() ? name : std::string(" | ") + name;
  }
  throw UsageError(std::string("invalid ") + what + " '" + s + "' (expected " + names + ")");
}

}  // namespace

KernelKind parse_kernel(const std::string& s) {
  return parse_enum<KernelKind>(s, {{"absorbing", KernelKind::absorbing}, {"uniform", KernelKind::uniform}}, "kernel");
}

ProcessKind parse_process(const std::string& s) {
  return parse_enum<ProcessKind>(s, {{"nonmarkov", ProcessKind::nonmarkov}, {"markov", ProcessKind::markov}},
                                 "process");
}

MaskMode parse_attention(const std::string& s) {
  return parse_enum<MaskMode>(s, {{"block_causal", MaskMode::block_causal}, {"token_causal", MaskMode::token_causal}},
                              "attention");
}

Compression parse_compression(const std::string& s) {
  return parse_enum<Compression>(s, {{"truncate", Compression::truncate}, {"recompose", Compression::recompose}},
                                 "compression");
}

ReconWeight parse_recon(const std::string& s) {
  return parse_enum<ReconWeight>(s, {{"exact", ReconWeight::exact}, {"literal", ReconWeight::literal}}, "recon");
}

SamplerMode parse_sampler_mode(const std::string& s) {
  return parse_enum<SamplerMode>(s,
                                 {{"caddi", SamplerMode::caddi},
                                  {"caddi_ar", SamplerMode::caddi_ar},
                                  {"markov_baseline", SamplerMode::markov_baseline}},
                                 "mode");
}

VerifyPolicy parse_verify(const std::string& s) {
  return parse_enum<VerifyPolicy>(s, {{"greedy", VerifyPolicy::greedy}, {"threshold", VerifyPolicy::threshold}},
                                  "verify policy");
}

std::string to_string(KernelKind k) { return k == KernelKind::absorbing ? "absorbing" : "uniform"; }
std::string to_string(ProcessKind p) { return p == ProcessKind::nonmarkov ? "nonmarkov" : "markov"; }
std::string to_string(MaskMode m) { return m == MaskMode::block_causal ? "block_causal" : "token_causal"; }
std::string to_string(Compression c) { return c == Compression::truncate ? "truncate" : "recompose"; }
std::string to_string(ReconWeight r) { return r == ReconWeight::exact ? "exact" : "literal"; }

std::string encode_symbols(const Vocabulary& vocab) {
  std::ostringstream out;
  out << std::hex;
  bool first = true;
  for (char32_t c : vocab.symbols()) {
    if (!first) out << ',';
    out << static_cast<std::uint32_t>(c);
    first = false;
  }
  return out.str();
}

Vocabulary decode_symbols(const std::string& text) {
  std::u32string symbols;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    char* end = nullptr;
    const unsigned long cp = std::strtoul(item.c_str(), &end, 16);
    if (item.empty() || *end != '\0') throw Error("malformed vocabulary entry '" + item + "'");
    symbols.push_back(static_cast<char32_t>(cp));
  }
  return Vocabulary::from_symbols(symbols);
}

std::vector<PromptToken> parse_prompt(const std::string& spec, const Vocabulary& vocab) {
  if (spec.empty()) return {};
  const auto at = spec.rfind('@');
  if (at == std::string::npos) throw UsageError("prompt must look like TEXT@POS");
  char* end = nullptr;
  const std::string pos_text = spec.substr(at + 1);
  const unsigned long pos = std::strtoul(pos_text.c_str(), &end, 10);
  if (pos_text.empty() || *end != '\0') throw UsageError("prompt position must be a non-negative integer");
  const TokenSequence ids = vocab.encode(spec.substr(0, at));
  std::vector<PromptToken> out;
  for (std::size_t i = 0; i < ids.size(); ++i) out.push_back({pos + i, ids[i]});
  return out;
}

}  // namespace caddi
