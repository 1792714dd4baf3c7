#pragma once

#include <cstdint>
#include <memory>

#include "vmscan/fs.hpp"

namespace vmscan {

// Read-only EXT2/EXT4 reconstruction: superblock + group descriptors, inode
// decoding, directory walks, and both block-pointer schemes (12 direct +
// 3 levels of indirection, and extent trees).
class Ext4Fs : public GuestFs {
 public:
  struct Params {
    uint32_t block_size = 0;
    uint32_t inodes_per_group = 0;
    uint32_t blocks_per_group = 0;
    uint64_t blocks_count = 0;
    uint32_t inodes_count = 0;
    uint32_t inode_size = 0;
    uint32_t first_data_block = 0;
    uint32_t feature_incompat = 0;
    uint32_t group_count = 0;
  };

  static std::unique_ptr<Ext4Fs> mount(ImageHandle& image, uint64_t partition_offset);

  std::string flavor() const override { return "ext4"; }
  bool case_insensitive() const override { return false; }
  uint32_t fs_block_size() const override { return params_.block_size; }
  uint64_t partition_offset() const override { return partition_offset_; }
  ImageHandle& image() const override { return image_; }

  std::optional<FileMeta> resolve(const std::string& path) override;
  std::vector<Extent> content_extents(const FileMeta& meta, bool* resident) override;
  std::vector<uint8_t> read_file(const FileMeta& meta) override;
  std::vector<std::pair<std::string, FileMeta>> list_files() override;

  const Params& params() const { return params_; }
  FileMeta inode_meta(uint32_t inode_no);

 private:
  Ext4Fs(ImageHandle& image, uint64_t partition_offset) ;

  struct Inode {
    uint32_t inode_no = 0;
    uint16_t mode = 0;
    uint64_t size = 0;
    uint32_t mtime = 0;
    uint32_t flags = 0;
    uint32_t blocks_lo = 0;
    uint8_t block[60] = {};
    uint64_t meta_offset = 0;
  };

  Inode read_inode(uint32_t inode_no);
  static FileMeta to_meta(const Inode& ino);
  std::vector<Extent> extent_tree_extents(const Inode& ino);
  void walk_extent_node(const uint8_t* node, size_t node_len, uint64_t total_blocks,
                        uint32_t inode_no, int depth_budget,
                        std::vector<std::tuple<uint64_t, uint64_t, uint64_t, bool>>* runs);
  std::vector<Extent> indirect_extents(const Inode& ino);
  void collect_indirect(uint64_t ptr_block, int level, uint64_t logical_start,
                        uint64_t total_blocks, uint32_t inode_no,
                        std::vector<uint64_t>* physical);
  std::vector<uint8_t> read_extents(const std::vector<Extent>& extents, uint64_t size);
  std::vector<std::pair<std::string, uint32_t>> read_dir(const Inode& dir);
  uint64_t block_to_guest(uint64_t fs_block) const;

  ImageHandle& image_;
  uint64_t partition_offset_;
  Params params_;
  std::vector<uint64_t> group_inode_table_;  // first inode-table block per group
};

std::unique_ptr<GuestFs> mount_ext4(ImageHandle& image, uint64_t partition_offset);

}  // namespace vmscan
