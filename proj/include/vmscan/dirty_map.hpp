#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vmscan/write_record.hpp"

namespace vmscan {

// Where the guest filesystem lives inside the image and how it is blocked.
struct ImageGeometry {
  uint64_t header_offset = 0;  // bytes from image start to filesystem start
  uint32_t block_size = 4096;  // power of two
  uint64_t total_blocks = 0;

  void validate() const;
  bool operator==(const ImageGeometry&) const = default;
};

// Per-image boolean array answering "was this block written" in O(1).
// Marking is monotone: bits are only ever set, never cleared.
class DirtyBlockMap {
 public:
  explicit DirtyBlockMap(ImageGeometry geometry);

  const ImageGeometry& geometry() const { return geometry_; }

  void mark_write(const WriteRecord& rec);
  void mark_block(uint64_t block_addr);
  bool is_dirty(uint64_t block_addr) const;  // throws on out-of-range address

  uint64_t dirty_count() const { return dirty_count_; }
  uint64_t total_blocks() const { return geometry_.total_blocks; }

  // Writes below header_offset (partition table, bootloader) and the part of
  // a record extending past the end of the disk.
  uint64_t pre_fs_writes() const { return pre_fs_writes_; }
  uint64_t overflow_records() const { return overflow_records_; }

  std::vector<uint64_t> dirty_blocks() const;

  void save(const std::string& path) const;
  static DirtyBlockMap load(const std::string& path);

  bool operator==(const DirtyBlockMap& other) const;

 private:
  ImageGeometry geometry_;
  std::vector<uint64_t> bits_;
  uint64_t dirty_count_ = 0;
  uint64_t pre_fs_writes_ = 0;
  uint64_t overflow_records_ = 0;
};

}  // namespace vmscan
