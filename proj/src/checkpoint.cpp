#include "caddi/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace caddi {

namespace {

constexpr char kMagic[7] = {'C', 'A', 'D', 'D', 'I', '1', '\0'};
constexpr std::uint8_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

std::map<std::string, std::string> model_keys(const ModelConfig& c) {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"model.n_layers", std::to_string(c.n_layers)},
      {"model.d_model", std::to_string(c.d_model)},
      {"model.n_heads", std::to_string(c.n_heads)},
      {"model.seq_rotary_dims", std::to_string(c.seq_rotary_dims)},
      {"model.time_rotary_dims", std::to_string(c.time_rotary_dims)},
      {"model.seq_base", num(c.seq_base)},
      {"model.time_base", num(c.time_base)},
      {"model.vocab_augmented", std::to_string(c.vocab_augmented)},
      {"model.max_positions", std::to_string(c.max_positions)},
      {"model.max_timesteps", std::to_string(c.max_timesteps)},
  };
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointError("unexpected end of checkpoint");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    std::memcpy(&v, take(8), 8);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

int to_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint config lacks " + key);
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint config has malformed " + key);
  }
}

double to_double(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint config lacks " + key);
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint config has malformed " + key);
  }
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string text;
  for (const auto& [k, v] : model_keys(ckpt.params.config)) text += k + "=" + v + "\n";
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos) {
      throw Error("checkpoint metadata may not contain '=' in keys or newlines");
    }
    text += k + "=" + v + "\n";
  }
  std::string out(kMagic, sizeof kMagic);
  out.push_back(static_cast<char>(kVersion));
  put_u64(out, text.size());
  out += text;
  for (const TensorInfo& t : ckpt.params.tensors) {
    put_u64(out, t.size());
    const char* p = reinterpret_cast<const char*>(ckpt.params.data.data() + t.offset);
    out.append(p, t.size() * sizeof(float));
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("bad magic");
  }
  in.take(sizeof kMagic);
  const auto version = static_cast<std::uint8_t>(*in.take(1));
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t text_len = in.u64();
  const std::string text(in.take(text_len), text_len);

  std::map<std::string, std::string> kv;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("malformed checkpoint config line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }

  ModelConfig c;
  c.n_layers = to_int(kv, "model.n_layers");
  c.d_model = to_int(kv, "model.d_model");
  c.n_heads = to_int(kv, "model.n_heads");
  c.seq_rotary_dims = to_int(kv, "model.seq_rotary_dims");
  c.time_rotary_dims = to_int(kv, "model.time_rotary_dims");
  c.seq_base = to_double(kv, "model.seq_base");
  c.time_base = to_double(kv, "model.time_base");
  c.vocab_augmented = to_int(kv, "model.vocab_augmented");
  c.max_positions = to_int(kv, "model.max_positions");
  c.max_timesteps = to_int(kv, "model.max_timesteps");
  try {
    c.validate();
  } catch (const Error& e) {
    throw CheckpointError(std::string("invalid model config in checkpoint: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.params = Parameters<float>::zeros(c);
  for (const TensorInfo& t : ckpt.params.tensors) {
    const std::uint64_t count = in.u64();
    if (count != t.size()) {
      throw CheckpointError("shape mismatch for tensor " + t.name + ": expected " + std::to_string(t.size()) +
                            " values, found " + std::to_string(count));
    }
    std::memcpy(ckpt.params.data.data() + t.offset, in.take(count * sizeof(float)), count * sizeof(float));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after checkpoint tensors");
  for (auto& [k, v] : kv) {
    if (k.rfind("model.", 0) != 0) ckpt.meta[k] = v;
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to " + path + " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

}  // namespace caddi
