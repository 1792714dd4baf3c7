#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vmscan::testing {

constexpr uint64_t kHoleBlock = ~uint64_t{0};

// Write-side EXT2/EXT4 volume builder. Lays out superblock, group
// descriptors, bitmaps, inode tables, directories, extent trees and indirect
// pointer chains by itself and records where every logical block of every
// file landed — the manifest is the oracle the read-side mapper is tested
// against.
class Ext4ImageBuilder {
 public:
  struct Options {
    uint32_t block_size = 4096;  // 1024, 2048 or 4096
    uint64_t total_blocks = 16384;
    bool use_extents = true;  // false -> classic indirect pointers everywhere
    bool use_64bit = false;
    uint32_t inodes_per_group = 0;  // 0 = derived from the file count
    uint32_t base_time = 1600000000;
  };

  struct Segment {
    uint64_t logical_block = 0;
    std::vector<uint8_t> data;  // multiple of block_size except the tail
  };

  struct ManifestEntry {
    std::string path;
    uint32_t inode_no = 0;
    char type = 'f';  // f / d / l
    uint64_t size = 0;
    std::string sha256;               // files: hash of logical content
    std::vector<uint64_t> fs_blocks;  // per logical block; kHoleBlock for holes
    bool inline_data = false;
  };

  struct Image {
    std::vector<uint8_t> bytes;
    std::vector<ManifestEntry> manifest;
    uint32_t block_size = 0;
    std::map<std::string, ManifestEntry> by_path;
  };

  explicit Ext4ImageBuilder(Options opts);

  void add_dir(const std::string& path, bool htree = false);
  void add_file(const std::string& path, std::vector<uint8_t> content,
                uint32_t fragment_every = 0, bool unwritten = false);
  void add_sparse_file(const std::string& path, uint64_t logical_size,
                       std::vector<Segment> segments);
  void add_inline_file(const std::string& path, std::vector<uint8_t> content);
  void add_symlink(const std::string& path, const std::string& target);
  // Guest-faithful metadata tweaks for overlay fixtures.
  void set_times(const std::string& path, std::optional<uint32_t> atime,
                 std::optional<uint32_t> mtime);

  Image build();

 private:
  struct Node {
    std::string path;
    std::string name;
    char type = 'f';
    int parent = -1;
    std::vector<int> children;  // node indices, add order
    std::vector<uint8_t> content;
    std::vector<Segment> segments;
    uint64_t logical_size = 0;
    std::string target;
    bool inline_data = false;
    bool unwritten = false;
    uint32_t fragment_every = 0;
    bool htree = false;
    std::optional<uint32_t> atime, mtime;

    uint32_t ino = 0;
    std::vector<uint64_t> block_map;   // logical -> physical (kHoleBlock = hole)
    std::vector<uint64_t> meta_blocks; // pointer / extent-index blocks
    std::vector<uint8_t> dir_content;  // built for directories
    uint64_t size = 0;
  };

  int ensure_node(const std::string& path, char type);
  int ensure_parent(const std::string& path);
  Node& node_for(const std::string& path);

  Options opts_;
  std::vector<Node> nodes_;
  std::map<std::string, int> by_path_;
};

}  // namespace vmscan::testing
