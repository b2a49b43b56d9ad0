#pragma once

// Binary checkpoint: "CADDI1\0", a version byte, a length-prefixed key=value
// config block, then each parameter tensor as a u64 element count followed by
// little-endian float32 values in declaration order.

#include <map>
#include <string>

#include "caddi/denoiser.hpp"

namespace caddi {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct Checkpoint {
  Parameters<float> params;
  // Run settings stored next to the model config (schedule horizon, kernel,
  // context layout, vocabulary, ...).
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// Errors: "bad magic", "unexpected end of checkpoint", "shape mismatch ...".
Checkpoint load_checkpoint(const std::string& path);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

}  // namespace caddi
