#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "canon/tensor.hpp"

namespace canon {

// Binary checkpoint container:
//   bytes 0..7   magic "CANONKPT"
//   u32 LE       format version (currently 1)
//   u32 LE       config JSON length, then that many UTF-8 bytes
//   u32 LE       parameter count, then per parameter:
//                  u32 LE name length + name bytes
//                  u32 LE rank + rank u64 LE dims
//                  numel f64 LE values
//   u32 LE       rng word count + that many u64 LE words
// Round-trips are bit-exact; loads reject unknown versions and truncated
// files without returning a partial bundle.
struct CheckpointBundle {
  std::uint32_t version = 1;
  std::string config_json;  // snapshot of the run configuration
  std::vector<Param> params;
  std::vector<std::uint64_t> rng_state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Atomic write: the payload lands in a temp file and is renamed into place.
void save_checkpoint(const std::string& path, const CheckpointBundle& bundle);
CheckpointBundle load_checkpoint(const std::string& path);

// Copy loaded parameter values into a live parameter list (matched by name).
void restore_params(std::vector<Param>& live, const std::vector<Param>& stored);

}  // namespace canon
