#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vmscan/baseline_db.hpp"
#include "vmscan/fs.hpp"

namespace vmscan {

// Overwrites every content block of the file with zeros, leaving its metadata
// untouched so the path still resolves. RAW images only; resident values are
// zeroed inside the metadata record. Returns the number of filesystem
// blocks/clusters zeroed (1 for a non-empty resident value).
uint64_t destroy_file_content(GuestFs& fs, const std::string& path);

struct RestoreRow {
  std::string guest_path;
  std::string source;  // "base" | "backup" | "unrestorable"
  std::string sha256;  // empty when unrestorable
};

struct RestoreBundle {
  std::string manifest_path;
  std::vector<RestoreRow> rows;
  uint64_t restored = 0;
  uint64_t unrestorable = 0;
};

// Assembles pristine copies of the given paths into out_dir, fetching from
// the base image when the content there still matches the baseline hash and
// from backup copies otherwise. A backup whose hash does not match the
// baseline aborts (data-layer corruption).
RestoreBundle build_restore_bundle(const BaselineDb& baseline, GuestFs* base_fs,
                                   const std::vector<std::string>& paths,
                                   const std::string& out_dir);

}  // namespace vmscan
