#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vmscan/write_record.hpp"

namespace vmscan {

// Test-producer operations: apply writes to a RAW image and emit the
// matching trace records, as the hypervisor driver hook would have.
struct WorkloadOp {
  enum class Kind {
    Patch,   // overwrite part of a file's content (same size, new bytes)
    Touch,   // bump the file's mtime field only
    Raw,     // overwrite an absolute image byte range
    Become,  // byte-diff against a prepared target image, then adopt it
  };
  Kind kind = Kind::Raw;
  std::string path;     // Patch/Touch: guest path
  uint64_t at = 0;      // Patch: logical byte offset within the file
  uint64_t length = 0;  // Patch/Raw
  uint64_t offset = 0;  // Raw: absolute image offset
  std::string target;   // Become: path of the target image
  uint64_t seed = 0;    // per-op RNG seed
};

std::vector<WorkloadOp> parse_workload(const std::string& json_path);

struct ReplayResult {
  uint64_t ops_applied = 0;
  uint64_t records_emitted = 0;
  std::vector<WriteRecord> records;
};

// Applies the ops in order. Written bytes are guaranteed to differ from the
// previous content, so the emitted trace corresponds to real changes.
ReplayResult replay_workload(const std::string& image_path,
                             const std::vector<WorkloadOp>& ops, uint64_t seed,
                             const std::optional<std::string>& trace_out,
                             std::optional<uint64_t> fs_offset_override);

}  // namespace vmscan
