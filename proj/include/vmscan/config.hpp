#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace vmscan {

// Key = value text file. Recognized keys: spill_dir, block_size, fs_offset,
// hash_truncation. Unknown keys are rejected.
struct Config {
  std::string spill_dir = "spill";
  uint32_t block_size = 4096;
  std::optional<uint64_t> fs_offset;
  size_t hash_truncation = 12;  // hex chars shown in the human report
};

Config load_config(const std::string& path);

}  // namespace vmscan
