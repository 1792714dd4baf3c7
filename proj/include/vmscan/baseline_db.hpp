#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vmscan/fs.hpp"

namespace vmscan {

struct BaselineEntry {
  std::string guest_path;  // normalized
  std::string sha256;
  uint64_t size = 0;
  std::string backup_relpath;  // empty when no backup was taken
};

// Protected-file hashes and optional backup copies. On disk:
// <db_dir>/baseline.tsv (tab-separated, sorted, trailing body hash for
// tamper evidence) and <db_dir>/backups/... mirroring guest paths.
class BaselineDb {
 public:
  // Snapshots hashes for the given paths (nullopt = every regular file) from
  // a trusted image. Returns the number of entries written.
  static uint64_t snapshot(GuestFs& fs,
                           const std::optional<std::vector<std::string>>& paths,
                           const std::string& db_dir, bool with_backups);

  static BaselineDb load(const std::string& db_dir);

  std::optional<BaselineEntry> lookup(const std::string& guest_path) const;
  const std::map<std::string, BaselineEntry>& entries() const { return entries_; }
  const std::vector<std::string>& missing() const { return missing_; }
  bool empty() const { return entries_.empty(); }
  bool fold_case() const { return fold_case_; }
  const std::string& flavor() const { return flavor_; }
  const std::string& dir() const { return dir_; }

  // Absolute path of an entry's backup copy.
  std::string backup_path(const BaselineEntry& entry) const;
  // Checks every backup against its stored hash; returns offending paths.
  std::vector<std::string> verify_backups() const;

 private:
  std::string dir_;
  std::string flavor_;
  bool fold_case_ = false;
  std::map<std::string, BaselineEntry> entries_;
  std::vector<std::string> missing_;
};

// Filesystem-safe relative path for a guest path ("/a/b" -> "a/b", components
// sanitized). Shared by baseline backups, export and restore bundles.
std::string guest_path_to_relpath(const std::string& normalized_path);

}  // namespace vmscan
