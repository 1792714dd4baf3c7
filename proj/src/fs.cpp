#include "vmscan/fs.hpp"

#include <algorithm>

#include "vmscan/bytes.hpp"
#include "vmscan/errors.hpp"
#include "vmscan/fs_ext4.hpp"
#include "vmscan/fs_ntfs.hpp"

namespace vmscan {

std::vector<uint64_t> blocks_for_extents(const std::vector<Extent>& extents,
                                         uint32_t fs_block_size,
                                         const ImageGeometry& geometry) {
  std::vector<uint64_t> out;
  const uint64_t bs = geometry.block_size;
  for (const auto& ext : extents) {
    uint64_t fs_blocks = (ext.length + fs_block_size - 1) / fs_block_size;
    if (ext.kind == Extent::Kind::Hole) {
      out.insert(out.end(), fs_blocks, kUnmappedBlock);
      continue;
    }
    for (uint64_t i = 0; i < fs_blocks; ++i) {
      uint64_t begin = ext.guest_offset + i * fs_block_size;
      uint64_t end = std::min(begin + fs_block_size, ext.guest_offset + ext.length);
      if (begin < geometry.header_offset)
        throw GeometryError("fs: content below filesystem start");
      uint64_t first = (begin - geometry.header_offset) / bs;
      uint64_t last = (end - 1 - geometry.header_offset) / bs;
      if (last >= geometry.total_blocks)
        throw GeometryError("fs: content block beyond geometry");
      for (uint64_t b = first; b <= last; ++b) out.push_back(b);
    }
  }
  return out;
}

std::string normalize_guest_path(const std::string& path, bool fold_case) {
  std::string out;
  out.reserve(path.size() + 1);
  for (char c : path) {
    if (c == '\\') c = '/';
    if (fold_case && c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if (c == '/' && !out.empty() && out.back() == '/') continue;
    out.push_back(c);
  }
  if (out.empty() || out[0] != '/') out.insert(out.begin(), '/');
  if (out.size() > 1 && out.back() == '/') out.pop_back();
  return out;
}

std::string GuestFs::normalize_path(const std::string& path) const {
  return normalize_guest_path(path, case_insensitive());
}

FileBlockMap GuestFs::file_block_map(const std::string& path, const FileMeta& meta,
                                     const ImageGeometry& geometry) {
  FileBlockMap map;
  map.path = normalize_path(path);
  map.file_id = meta.file_id;
  map.size = meta.size;
  map.extents = content_extents(meta, &map.resident);
  if (map.resident) {
    // A content change dirties the block holding the metadata record.
    if (meta.meta_offset < geometry.header_offset)
      throw GeometryError("fs: metadata record below filesystem start");
    uint64_t addr = (meta.meta_offset - geometry.header_offset) / geometry.block_size;
    if (addr >= geometry.total_blocks)
      throw GeometryError("fs: metadata record beyond geometry");
    map.blocks = {addr};
  } else {
    map.blocks = blocks_for_extents(map.extents, fs_block_size(), geometry);
  }
  return map;
}

std::unique_ptr<GuestFs> mount_filesystem(ImageHandle& image, uint64_t partition_offset) {
  std::string ext_err;
  try {
    return mount_ext4(image, partition_offset);
  } catch (const BadMagic& e) {
    ext_err = e.what();
  }
  try {
    return mount_ntfs(image, partition_offset);
  } catch (const BadMagic&) {
    throw BadMagic("fs: neither EXT nor NTFS at partition offset " +
                   std::to_string(partition_offset) + " (" + ext_err + ")");
  }
}

}  // namespace vmscan
