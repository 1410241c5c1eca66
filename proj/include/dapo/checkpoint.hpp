#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dapo/tensor.hpp"

namespace dapo {

// Versioned binary container: magic "DAPO", format version, config echo,
// vocabulary, named tensors, optimizer moments, counters, RNG state.
// All floats are little-endian 64-bit.
struct Checkpoint {
  int version = 1;
  std::string config_json;
  std::vector<std::string> vocab_tokens;
  std::vector<std::pair<std::string, Tensor>> tensors;  // fixed order
  std::vector<std::vector<double>> adam_m, adam_v;
  long adam_steps = 0;
  int epoch = 0;
  long step = 0;
  std::uint64_t rng_state = 0;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);

// Little-endian byte image of a tensor list; input to the freeze-contract hash.
std::vector<std::uint8_t> tensor_bytes(
    const std::vector<std::pair<std::string, Tensor>>& tensors);

}  // namespace dapo
