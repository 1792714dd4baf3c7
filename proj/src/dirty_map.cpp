#include "vmscan/dirty_map.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "vmscan/bytes.hpp"
#include "vmscan/errors.hpp"

namespace vmscan {

namespace {
constexpr char kMagic[4] = {'D', 'B', 'M', 'P'};
constexpr uint32_t kVersion = 1;
constexpr size_t kHeaderSize = 40;
}  // namespace

void ImageGeometry::validate() const {
  if (block_size == 0 || (block_size & (block_size - 1)) != 0)
    throw GeometryError("geometry: block_size must be a nonzero power of two");
  if (total_blocks == 0) throw GeometryError("geometry: total_blocks must be > 0");
}

DirtyBlockMap::DirtyBlockMap(ImageGeometry geometry) : geometry_(geometry) {
  geometry_.validate();
  bits_.assign((geometry_.total_blocks + 63) / 64, 0);
}

void DirtyBlockMap::mark_block(uint64_t block_addr) {
  if (block_addr >= geometry_.total_blocks)
    throw GeometryError("dirty map: block address out of range");
  uint64_t word = block_addr / 64;
  uint64_t mask = uint64_t{1} << (block_addr % 64);
  if (!(bits_[word] & mask)) {
    bits_[word] |= mask;
    ++dirty_count_;
  }
}

void DirtyBlockMap::mark_write(const WriteRecord& rec) {
  if (rec.length == 0) throw MalformedRecord("dirty map: zero-length record");
  const uint64_t header = geometry_.header_offset;
  const uint64_t bs = geometry_.block_size;
  uint64_t begin = rec.offset;
  uint64_t end = rec.offset + rec.length;

  if (begin < header) {
    // Bytes before the filesystem start cannot belong to file content.
    ++pre_fs_writes_;
    if (end <= header) return;
    begin = header;
  }

  uint64_t first = (begin - header) / bs;
  uint64_t last = (end - 1 - header) / bs;
  if (first >= geometry_.total_blocks) {
    ++overflow_records_;
    return;
  }
  if (last >= geometry_.total_blocks) {
    ++overflow_records_;
    last = geometry_.total_blocks - 1;
  }
  for (uint64_t b = first; b <= last; ++b) mark_block(b);
}

bool DirtyBlockMap::is_dirty(uint64_t block_addr) const {
  if (block_addr >= geometry_.total_blocks)
    throw GeometryError("dirty map: block address out of range");
  return (bits_[block_addr / 64] >> (block_addr % 64)) & 1;
}

std::vector<uint64_t> DirtyBlockMap::dirty_blocks() const {
  std::vector<uint64_t> out;
  out.reserve(dirty_count_);
  for (uint64_t w = 0; w < bits_.size(); ++w) {
    uint64_t word = bits_[w];
    while (word) {
      int bit = std::countr_zero(word);
      out.push_back(w * 64 + static_cast<uint64_t>(bit));
      word &= word - 1;
    }
  }
  return out;
}

bool DirtyBlockMap::operator==(const DirtyBlockMap& other) const {
  return geometry_ == other.geometry_ && bits_ == other.bits_;
}

void DirtyBlockMap::save(const std::string& path) const {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("dirty map: cannot create " + path);
  uint8_t header[kHeaderSize] = {};
  std::memcpy(header, kMagic, 4);
  write_le32(header + 4, kVersion);
  write_le32(header + 8, geometry_.block_size);
  write_le32(header + 12, 0);
  write_le64(header + 16, geometry_.header_offset);
  write_le64(header + 24, geometry_.total_blocks);
  write_le64(header + 32, dirty_count_);
  bool ok = std::fwrite(header, 1, sizeof header, f) == sizeof header;
  std::vector<uint8_t> word(8);
  for (uint64_t w : bits_) {
    write_le64(word.data(), w);
    ok = ok && std::fwrite(word.data(), 1, 8, f) == 8;
  }
  ok = std::fclose(f) == 0 && ok;
  if (!ok) throw IoError("dirty map: short write to " + path);
}

DirtyBlockMap DirtyBlockMap::load(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("dirty map: cannot open " + path);
  uint8_t header[kHeaderSize];
  if (std::fread(header, 1, sizeof header, f) != sizeof header) {
    std::fclose(f);
    throw IoError("dirty map: truncated header in " + path);
  }
  if (std::memcmp(header, kMagic, 4) != 0) {
    std::fclose(f);
    throw BadMagic("dirty map: bad magic in " + path);
  }
  if (read_le32(header + 4) != kVersion) {
    std::fclose(f);
    throw Unsupported("dirty map: unsupported version in " + path);
  }
  ImageGeometry geometry;
  geometry.block_size = read_le32(header + 8);
  geometry.header_offset = read_le64(header + 16);
  geometry.total_blocks = read_le64(header + 24);
  uint64_t claimed_dirty = read_le64(header + 32);

  DirtyBlockMap map(geometry);
  std::vector<uint8_t> raw(map.bits_.size() * 8);
  size_t got = std::fread(raw.data(), 1, raw.size(), f);
  long leftover = 0;
  {
    uint8_t probe;
    leftover = static_cast<long>(std::fread(&probe, 1, 1, f));
  }
  std::fclose(f);
  if (got != raw.size() || leftover != 0)
    throw IoError("dirty map: bit array size mismatch in " + path);

  uint64_t count = 0;
  for (size_t i = 0; i < map.bits_.size(); ++i) {
    map.bits_[i] = read_le64(raw.data() + i * 8);
    count += static_cast<uint64_t>(std::popcount(map.bits_[i]));
  }
  // Bits beyond total_blocks must be clear.
  uint64_t tail_bits = map.geometry_.total_blocks % 64;
  if (tail_bits != 0 && (map.bits_.back() >> tail_bits) != 0)
    throw IoError("dirty map: stray bits past total_blocks in " + path);
  if (count != claimed_dirty)
    throw IoError("dirty map: dirty count mismatch in " + path);
  map.dirty_count_ = count;
  return map;
}

}  // namespace vmscan
