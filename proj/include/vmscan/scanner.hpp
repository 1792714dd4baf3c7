#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vmscan/baseline_db.hpp"
#include "vmscan/dirty_map.hpp"
#include "vmscan/fs.hpp"

namespace vmscan {

enum class Verdict { Secure, Modified, New, Deleted, ScanError };

const char* verdict_name(Verdict v);

struct ScanResult {
  std::string path;
  Verdict verdict = Verdict::Secure;
  std::string detail;  // error reason for ScanError
  // Dirty block addresses (single-image) or allocated guest cluster indices
  // (overlay) that triggered the scan.
  std::vector<uint64_t> evidence;
  std::string sha256;  // set when content was hashed
  uint64_t bytes_read = 0;
};

struct ScanStats {
  uint64_t files_considered = 0;
  uint64_t files_hashed = 0;
  uint64_t content_bytes_read = 0;
  uint64_t secure = 0;
  uint64_t modified = 0;
  uint64_t created = 0;
  uint64_t deleted = 0;
  uint64_t errors = 0;
  uint64_t findings() const { return modified + created + deleted + errors; }
};

struct ScanOutcome {
  std::vector<ScanResult> results;  // sorted by path
  ScanStats stats;
};

struct ScanRequest {
  enum class Mode { SingleImage, MultiImage };
  Mode mode = Mode::SingleImage;
  const DirtyBlockMap* dirty_map = nullptr;  // SingleImage
  ImageHandle* overlay = nullptr;            // MultiImage
  // Explicit protected set; nullopt scans every file plus baseline entries.
  std::optional<std::vector<std::string>> paths;
  bool force_full = false;  // hash every candidate, ignoring the predicate
};

// True (plus the first dirty address) iff any block of the file is dirty.
std::optional<uint64_t> dirty_predicate_single(const DirtyBlockMap& map,
                                               const FileBlockMap& file_map);

// Fig.-6 flow: metadata record allocated in the overlay first, content
// ranges second. Returns allocated guest cluster indices (empty = no scan).
std::vector<uint64_t> dirty_predicate_overlay(ImageHandle& overlay,
                                              const FileMeta& meta,
                                              const std::vector<Extent>& extents,
                                              bool resident);

ScanOutcome scan(GuestFs& fs, const ScanRequest& request, const BaselineDb& baseline);

// Copies every non-Secure, non-Deleted file's content to out_dir/files/ and
// writes a tab-separated manifest. Returns the manifest path.
std::string export_dirty(const std::vector<ScanResult>& results, GuestFs& fs,
                         const std::string& out_dir);

}  // namespace vmscan
