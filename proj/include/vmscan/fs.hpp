#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vmscan/dirty_map.hpp"
#include "vmscan/image.hpp"

namespace vmscan {

// A hole entry in a FileBlockMap's block list.
constexpr uint64_t kUnmappedBlock = ~uint64_t{0};

// One contiguous piece of a file's content, in guest byte coordinates
// (absolute image offsets, partition offset already applied).
struct Extent {
  enum class Kind { Data, Hole, Unwritten };
  uint64_t guest_offset = 0;  // meaningless for holes
  uint64_t length = 0;
  Kind kind = Kind::Data;
};

enum class FileKind { Regular, Directory, Symlink, Other };

// Identity and on-disk location of a file's metadata record (EXT4 inode or
// NTFS MFT record).
struct FileMeta {
  uint64_t file_id = 0;  // inode number / MFT record number
  FileKind kind = FileKind::Other;
  uint64_t size = 0;
  uint64_t mtime = 0;          // parsed, never used for dirty decisions
  uint64_t meta_offset = 0;    // guest byte offset of the metadata record
  uint32_t meta_length = 0;    // size of that record
};

// A file's identity plus the image block addresses holding its content.
struct FileBlockMap {
  std::string path;
  uint64_t file_id = 0;
  uint64_t size = 0;
  bool resident = false;  // content lives inside the metadata record
  std::vector<Extent> extents;
  std::vector<uint64_t> blocks;  // geometry-relative; kUnmappedBlock for holes
};

// Expands content extents to geometry-relative block addresses, one entry per
// filesystem block (or per overlapped map block when sizes differ).
std::vector<uint64_t> blocks_for_extents(const std::vector<Extent>& extents,
                                         uint32_t fs_block_size,
                                         const ImageGeometry& geometry);

// Read-only reconstruction of a guest filesystem over an image.
class GuestFs {
 public:
  virtual ~GuestFs() = default;

  virtual std::string flavor() const = 0;
  virtual bool case_insensitive() const = 0;
  virtual uint32_t fs_block_size() const = 0;
  virtual uint64_t partition_offset() const = 0;
  virtual ImageHandle& image() const = 0;

  // NotFound is reported as nullopt; the scanner maps it to Deleted.
  virtual std::optional<FileMeta> resolve(const std::string& path) = 0;
  // Content location in guest bytes; for resident content (inline-data inode,
  // resident MFT value) the extent is the value range inside the metadata
  // record and *resident is set.
  virtual std::vector<Extent> content_extents(const FileMeta& meta, bool* resident) = 0;
  virtual std::vector<uint8_t> read_file(const FileMeta& meta) = 0;
  // Regular files and symlinks, each exactly once; symlinks are not followed.
  virtual std::vector<std::pair<std::string, FileMeta>> list_files() = 0;

  FileBlockMap file_block_map(const std::string& path, const FileMeta& meta,
                              const ImageGeometry& geometry);

  // Canonical key for baseline lookups: separators unified, case folded when
  // the filesystem is case-insensitive.
  std::string normalize_path(const std::string& path) const;
};

std::string normalize_guest_path(const std::string& path, bool fold_case);

// Sniffs EXT or NTFS at partition_offset and mounts the right reader.
std::unique_ptr<GuestFs> mount_filesystem(ImageHandle& image, uint64_t partition_offset);

}  // namespace vmscan
