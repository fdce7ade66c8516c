#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "msl/model.hpp"
#include "msl/trainer.hpp"

namespace msl {

// Binary checkpoint, written little-endian regardless of host order:
//   magic "MSLCKPT1", u32 format version, u64 model config digest,
//   length-prefixed canonical config JSON, u64 training step,
//   u32 entry count, then per parameter: name, shape, f64 payload,
//   then an optional Adam block (step plus m/v in the same entry order).
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  int64_t step = 0;
  std::optional<AdamState> adam;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

// Loads and validates. When expect_config is given, refuses a checkpoint
// whose config digest differs instead of silently reshaping the model.
Checkpoint load_checkpoint(const std::string& path,
                           const ModelConfig* expect_config = nullptr);

}  // namespace msl
