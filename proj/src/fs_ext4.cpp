#include "vmscan/fs_ext4.hpp"

#include <algorithm>
#include <set>
#include <tuple>

#include "vmscan/bytes.hpp"
#include "vmscan/errors.hpp"

namespace vmscan {

namespace {

constexpr uint16_t kExtMagic = 0xEF53;
constexpr uint32_t kRootInode = 2;
constexpr uint16_t kExtentHeaderMagic = 0xF30A;

constexpr uint32_t kIncompatFiletype = 0x0002;
constexpr uint32_t kIncompatExtents = 0x0040;
constexpr uint32_t kIncompat64Bit = 0x0080;
constexpr uint32_t kIncompatFlexBg = 0x0200;
constexpr uint32_t kIncompatInlineData = 0x8000;
constexpr uint32_t kIncompatSupported = kIncompatFiletype | kIncompatExtents |
                                        kIncompat64Bit | kIncompatFlexBg |
                                        kIncompatInlineData;

constexpr uint32_t kFlagIndex = 0x00001000;
constexpr uint32_t kFlagExtents = 0x00080000;
constexpr uint32_t kFlagInlineData = 0x10000000;

constexpr uint16_t kModeMask = 0xF000;
constexpr uint16_t kModeRegular = 0x8000;
constexpr uint16_t kModeDirectory = 0x4000;
constexpr uint16_t kModeSymlink = 0xA000;

FileKind kind_from_mode(uint16_t mode) {
  switch (mode & kModeMask) {
    case kModeRegular: return FileKind::Regular;
    case kModeDirectory: return FileKind::Directory;
    case kModeSymlink: return FileKind::Symlink;
    default: return FileKind::Other;
  }
}

}  // namespace

Ext4Fs::Ext4Fs(ImageHandle& image, uint64_t partition_offset)
    : image_(image), partition_offset_(partition_offset) {}

std::unique_ptr<Ext4Fs> Ext4Fs::mount(ImageHandle& image, uint64_t partition_offset) {
  if (partition_offset + 2048 > image.virtual_size())
    throw BadMagic("ext4: image too small for a superblock");
  std::vector<uint8_t> sb = image.read_guest(partition_offset + 1024, 1024);
  if (read_le16(sb.data() + 0x38) != kExtMagic)
    throw BadMagic("ext4: bad superblock magic");

  auto fs = std::unique_ptr<Ext4Fs>(new Ext4Fs(image, partition_offset));
  Params& p = fs->params_;
  p.inodes_count = read_le32(sb.data() + 0);
  uint32_t log_block_size = read_le32(sb.data() + 24);
  if (log_block_size > 2)
    throw Unsupported("ext4: block size larger than 4096 not supported");
  p.block_size = 1024u << log_block_size;
  p.first_data_block = read_le32(sb.data() + 20);
  p.blocks_per_group = read_le32(sb.data() + 32);
  p.inodes_per_group = read_le32(sb.data() + 40);
  uint32_t rev_level = read_le32(sb.data() + 76);
  p.inode_size = rev_level == 0 ? 128 : read_le16(sb.data() + 88);
  p.feature_incompat = rev_level == 0 ? 0 : read_le32(sb.data() + 96);
  p.blocks_count = read_le32(sb.data() + 4);
  if (p.feature_incompat & kIncompat64Bit)
    p.blocks_count |= static_cast<uint64_t>(read_le32(sb.data() + 0x150)) << 32;

  if (p.feature_incompat & ~kIncompatSupported)
    throw Unsupported("ext4: unsupported incompatible features");
  if (p.blocks_per_group == 0 || p.inodes_per_group == 0 ||
      p.inode_size < 128 || (p.inode_size & (p.inode_size - 1)) != 0)
    throw CorruptFs("ext4: implausible superblock geometry");

  p.group_count = static_cast<uint32_t>(
      (p.blocks_count - p.first_data_block + p.blocks_per_group - 1) /
      p.blocks_per_group);

  uint32_t desc_size = 32;
  if (p.feature_incompat & kIncompat64Bit) {
    desc_size = read_le16(sb.data() + 0xFE);
    if (desc_size < 32) desc_size = 32;
  }
  uint64_t gdt_block = p.first_data_block + 1;
  std::vector<uint8_t> gdt = image.read_guest(
      fs->block_to_guest(gdt_block),
      static_cast<uint64_t>(p.group_count) * desc_size);
  fs->group_inode_table_.resize(p.group_count);
  for (uint32_t g = 0; g < p.group_count; ++g) {
    const uint8_t* d = gdt.data() + static_cast<size_t>(g) * desc_size;
    uint64_t table = read_le32(d + 8);
    if (desc_size >= 64) table |= static_cast<uint64_t>(read_le32(d + 0x28)) << 32;
    fs->group_inode_table_[g] = table;
  }
  return fs;
}

uint64_t Ext4Fs::block_to_guest(uint64_t fs_block) const {
  return partition_offset_ + fs_block * params_.block_size;
}

Ext4Fs::Inode Ext4Fs::read_inode(uint32_t inode_no) {
  if (inode_no == 0 || inode_no > params_.inodes_count)
    throw CorruptFs("ext4: inode " + std::to_string(inode_no) + " out of range");
  uint32_t group = (inode_no - 1) / params_.inodes_per_group;
  uint32_t index = (inode_no - 1) % params_.inodes_per_group;
  uint64_t table_guest = block_to_guest(group_inode_table_[group]);
  uint64_t offset = table_guest + static_cast<uint64_t>(index) * params_.inode_size;
  std::vector<uint8_t> raw = image_.read_guest(offset, params_.inode_size);

  Inode ino;
  ino.inode_no = inode_no;
  ino.mode = read_le16(raw.data() + 0);
  ino.size = read_le32(raw.data() + 4);
  ino.mtime = read_le32(raw.data() + 16);
  ino.blocks_lo = read_le32(raw.data() + 28);
  ino.flags = read_le32(raw.data() + 32);
  std::memcpy(ino.block, raw.data() + 40, 60);
  if ((ino.mode & kModeMask) == kModeRegular)
    ino.size |= static_cast<uint64_t>(read_le32(raw.data() + 108)) << 32;
  ino.meta_offset = offset;
  return ino;
}

FileMeta Ext4Fs::to_meta(const Inode& ino) {
  FileMeta meta;
  meta.file_id = ino.inode_no;
  meta.kind = kind_from_mode(ino.mode);
  meta.size = ino.size;
  meta.mtime = ino.mtime;
  meta.meta_offset = ino.meta_offset;
  return meta;
}

FileMeta Ext4Fs::inode_meta(uint32_t inode_no) {
  FileMeta meta = to_meta(read_inode(inode_no));
  meta.meta_length = params_.inode_size;
  return meta;
}

void Ext4Fs::walk_extent_node(
    const uint8_t* node, size_t node_len, uint64_t total_blocks, uint32_t inode_no,
    int depth_budget,
    std::vector<std::tuple<uint64_t, uint64_t, uint64_t, bool>>* runs) {
  if (node_len < 12 || read_le16(node) != kExtentHeaderMagic)
    throw CorruptFs("ext4: bad extent header in inode " + std::to_string(inode_no));
  if (depth_budget < 0)
    throw CorruptFs("ext4: extent tree too deep in inode " + std::to_string(inode_no));
  uint16_t entries = read_le16(node + 2);
  uint16_t depth = read_le16(node + 6);
  if (12 + static_cast<size_t>(entries) * 12 > node_len)
    throw CorruptFs("ext4: extent node overflows its block in inode " +
                    std::to_string(inode_no));
  for (uint16_t i = 0; i < entries; ++i) {
    const uint8_t* e = node + 12 + i * 12;
    if (depth == 0) {
      uint64_t logical = read_le32(e);
      uint16_t raw_len = read_le16(e + 4);
      bool unwritten = raw_len > 32768;
      uint64_t len = unwritten ? raw_len - 32768u : raw_len;
      uint64_t physical = (static_cast<uint64_t>(read_le16(e + 6)) << 32) |
                          read_le32(e + 8);
      if (len == 0 || physical == 0 || physical + len > params_.blocks_count)
        throw CorruptFs("ext4: extent out of volume in inode " +
                        std::to_string(inode_no));
      if (logical < total_blocks)
        runs->emplace_back(logical, std::min(len, total_blocks - logical), physical,
                           unwritten);
    } else {
      uint64_t leaf = (static_cast<uint64_t>(read_le16(e + 8)) << 32) |
                      read_le32(e + 4);
      if (leaf == 0 || leaf >= params_.blocks_count)
        throw CorruptFs("ext4: extent index out of volume in inode " +
                        std::to_string(inode_no));
      std::vector<uint8_t> child =
          image_.read_guest(block_to_guest(leaf), params_.block_size);
      walk_extent_node(child.data(), child.size(), total_blocks, inode_no,
                       depth_budget - 1, runs);
    }
  }
}

std::vector<Extent> Ext4Fs::extent_tree_extents(const Inode& ino) {
  uint64_t total_blocks =
      (ino.size + params_.block_size - 1) / params_.block_size;
  std::vector<std::tuple<uint64_t, uint64_t, uint64_t, bool>> runs;
  walk_extent_node(ino.block, sizeof ino.block, total_blocks, ino.inode_no, 5, &runs);
  std::sort(runs.begin(), runs.end());

  std::vector<Extent> out;
  uint64_t next_logical = 0;
  for (const auto& [logical, len, physical, unwritten] : runs) {
    if (logical < next_logical)
      throw CorruptFs("ext4: overlapping extents in inode " +
                      std::to_string(ino.inode_no));
    if (logical > next_logical)
      out.push_back(Extent{0, (logical - next_logical) * params_.block_size,
                           Extent::Kind::Hole});
    out.push_back(Extent{block_to_guest(physical), len * params_.block_size,
                         unwritten ? Extent::Kind::Unwritten : Extent::Kind::Data});
    next_logical = logical + len;
  }
  if (next_logical < total_blocks)
    out.push_back(Extent{0, (total_blocks - next_logical) * params_.block_size,
                         Extent::Kind::Hole});
  return out;
}

void Ext4Fs::collect_indirect(uint64_t ptr_block, int level, uint64_t logical_start,
                              uint64_t total_blocks, uint32_t inode_no,
                              std::vector<uint64_t>* physical) {
  const uint64_t ppb = params_.block_size / 4;
  uint64_t span = 1;
  for (int i = 0; i < level; ++i) span *= ppb;

  if (ptr_block == 0) {
    // Missing subtree: all logical blocks in its span are holes.
    for (uint64_t i = 0; i < span && logical_start + i < total_blocks; ++i)
      physical->push_back(0);
    return;
  }
  if (ptr_block >= params_.blocks_count)
    throw CorruptFs("ext4: indirect pointer out of volume in inode " +
                    std::to_string(inode_no));
  if (level == 0) {
    physical->push_back(ptr_block);
    return;
  }
  std::vector<uint8_t> raw =
      image_.read_guest(block_to_guest(ptr_block), params_.block_size);
  uint64_t child_span = span / ppb;
  for (uint64_t i = 0; i < ppb; ++i) {
    uint64_t logical = logical_start + i * child_span;
    if (logical >= total_blocks) break;
    collect_indirect(read_le32(raw.data() + i * 4), level - 1, logical, total_blocks,
                     inode_no, physical);
  }
}

std::vector<Extent> Ext4Fs::indirect_extents(const Inode& ino) {
  const uint64_t bs = params_.block_size;
  const uint64_t ppb = bs / 4;
  uint64_t total_blocks = (ino.size + bs - 1) / bs;
  std::vector<uint64_t> physical;
  physical.reserve(total_blocks);

  for (int i = 0; i < 12 && static_cast<uint64_t>(i) < total_blocks; ++i)
    collect_indirect(read_le32(ino.block + i * 4), 0, i, total_blocks, ino.inode_no,
                     &physical);
  if (total_blocks > 12)
    collect_indirect(read_le32(ino.block + 12 * 4), 1, 12, total_blocks, ino.inode_no,
                     &physical);
  if (total_blocks > 12 + ppb)
    collect_indirect(read_le32(ino.block + 13 * 4), 2, 12 + ppb, total_blocks,
                     ino.inode_no, &physical);
  if (total_blocks > 12 + ppb + ppb * ppb)
    collect_indirect(read_le32(ino.block + 14 * 4), 3, 12 + ppb + ppb * ppb,
                     total_blocks, ino.inode_no, &physical);
  if (physical.size() != total_blocks)
    throw CorruptFs("ext4: block count mismatch in inode " +
                    std::to_string(ino.inode_no));

  // Coalesce per-block entries into extents.
  std::vector<Extent> out;
  for (uint64_t i = 0; i < physical.size();) {
    uint64_t j = i + 1;
    if (physical[i] == 0) {
      while (j < physical.size() && physical[j] == 0) ++j;
      out.push_back(Extent{0, (j - i) * bs, Extent::Kind::Hole});
    } else {
      while (j < physical.size() && physical[j] == physical[j - 1] + 1) ++j;
      out.push_back(Extent{block_to_guest(physical[i]), (j - i) * bs,
                           Extent::Kind::Data});
    }
    i = j;
  }
  return out;
}

std::vector<Extent> Ext4Fs::content_extents(const FileMeta& meta, bool* resident) {
  Inode ino = read_inode(static_cast<uint32_t>(meta.file_id));
  if (resident) *resident = false;
  if (ino.flags & kFlagInlineData) {
    if (ino.size > 60)
      throw Unsupported("ext4: inline data beyond the inode in inode " +
                        std::to_string(ino.inode_no));
    if (resident) *resident = true;
    if (ino.size == 0) return {};
    return {Extent{ino.meta_offset + 40, ino.size, Extent::Kind::Data}};
  }
  if (ino.size == 0) return {};
  if (ino.flags & kFlagExtents) return extent_tree_extents(ino);
  return indirect_extents(ino);
}

std::vector<uint8_t> Ext4Fs::read_extents(const std::vector<Extent>& extents,
                                          uint64_t size) {
  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(size));
  for (const auto& ext : extents) {
    if (out.size() >= size) break;
    uint64_t take = std::min<uint64_t>(ext.length, size - out.size());
    if (ext.kind == Extent::Kind::Data) {
      std::vector<uint8_t> piece = image_.read_guest(ext.guest_offset, take);
      out.insert(out.end(), piece.begin(), piece.end());
    } else {
      out.insert(out.end(), static_cast<size_t>(take), 0);
    }
  }
  if (out.size() < size) out.resize(static_cast<size_t>(size), 0);
  return out;
}

std::vector<uint8_t> Ext4Fs::read_file(const FileMeta& meta) {
  Inode ino = read_inode(static_cast<uint32_t>(meta.file_id));
  if (kind_from_mode(ino.mode) == FileKind::Symlink && ino.size < 60 &&
      ino.blocks_lo == 0) {
    // Fast symlink: target stored in the block-pointer area.
    return std::vector<uint8_t>(ino.block, ino.block + ino.size);
  }
  bool resident = false;
  std::vector<Extent> extents = content_extents(meta, &resident);
  if (resident) {
    if (extents.empty()) return {};
    std::vector<uint8_t> raw =
        image_.read_guest(extents[0].guest_offset, extents[0].length);
    return raw;
  }
  return read_extents(extents, ino.size);
}

std::vector<std::pair<std::string, uint32_t>> Ext4Fs::read_dir(const Inode& dir) {
  FileMeta meta = to_meta(dir);
  bool resident = false;
  std::vector<Extent> extents = content_extents(meta, &resident);
  std::vector<uint8_t> content =
      resident ? read_file(meta) : read_extents(extents, dir.size);
  const uint64_t bs = params_.block_size;
  const bool filetype = params_.feature_incompat & kIncompatFiletype;

  std::vector<std::pair<std::string, uint32_t>> out;
  for (uint64_t base = 0; base + bs <= content.size(); base += bs) {
    uint64_t off = 0;
    while (off + 8 <= bs) {
      const uint8_t* e = content.data() + base + off;
      uint32_t ino = read_le32(e);
      uint16_t rec_len = read_le16(e + 4);
      if (rec_len < 8 || rec_len % 4 != 0 || off + rec_len > bs)
        throw CorruptFs("ext4: bad directory entry in inode " +
                        std::to_string(dir.inode_no));
      uint16_t name_len = filetype ? e[6] : read_le16(e + 6);
      if (ino != 0 && name_len > 0) {
        if (8u + name_len > rec_len)
          throw CorruptFs("ext4: directory name overflows entry in inode " +
                          std::to_string(dir.inode_no));
        std::string name(reinterpret_cast<const char*>(e + 8), name_len);
        if (name != "." && name != "..") out.emplace_back(std::move(name), ino);
      }
      off += rec_len;
    }
  }
  return out;
}

std::optional<FileMeta> Ext4Fs::resolve(const std::string& path) {
  std::string norm = normalize_path(path);
  Inode current = read_inode(kRootInode);
  size_t pos = 1;
  while (pos < norm.size()) {
    size_t next = norm.find('/', pos);
    if (next == std::string::npos) next = norm.size();
    std::string component = norm.substr(pos, next - pos);
    pos = next + 1;
    if (component.empty()) continue;
    if (kind_from_mode(current.mode) != FileKind::Directory) return std::nullopt;
    uint32_t child = 0;
    for (const auto& [name, ino] : read_dir(current)) {
      if (name == component) {
        child = ino;
        break;
      }
    }
    if (child == 0) return std::nullopt;
    current = read_inode(child);
  }
  FileMeta meta = to_meta(current);
  meta.meta_length = params_.inode_size;
  return meta;
}

std::vector<std::pair<std::string, FileMeta>> Ext4Fs::list_files() {
  std::vector<std::pair<std::string, FileMeta>> out;
  std::set<uint32_t> visited;
  // Iterative DFS so corrupt loops fail cleanly instead of overflowing.
  std::vector<std::pair<std::string, uint32_t>> stack{{"", kRootInode}};
  while (!stack.empty()) {
    auto [prefix, ino_no] = stack.back();
    stack.pop_back();
    if (!visited.insert(ino_no).second)
      throw CorruptFs("ext4: directory loop at inode " + std::to_string(ino_no));
    Inode dir = read_inode(ino_no);
    for (const auto& [name, child_no] : read_dir(dir)) {
      Inode child = read_inode(child_no);
      std::string path = prefix + "/" + name;
      switch (kind_from_mode(child.mode)) {
        case FileKind::Directory:
          stack.emplace_back(path, child_no);
          break;
        case FileKind::Regular:
        case FileKind::Symlink: {
          FileMeta meta = to_meta(child);
          meta.meta_length = params_.inode_size;
          out.emplace_back(path, meta);
          break;
        }
        default:
          break;
      }
    }
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

std::unique_ptr<GuestFs> mount_ext4(ImageHandle& image, uint64_t partition_offset) {
  return Ext4Fs::mount(image, partition_offset);
}

}  // namespace vmscan
