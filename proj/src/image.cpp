#include "vmscan/image.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <span>

#include "vmscan/bytes.hpp"
#include "vmscan/errors.hpp"

namespace vmscan {

namespace {

constexpr uint32_t kQcow2Magic = 0x514649FB;  // "QFI\xfb"
constexpr uint64_t kL2OffsetMask = 0x00FFFFFFFFFFFE00ULL;
constexpr uint64_t kL2Compressed = 1ULL << 62;
constexpr uint64_t kL2ZeroFlag = 1ULL << 0;
constexpr int kMaxChainDepth = 8;

// v3 incompatible feature bits
constexpr uint64_t kFeatDirty = 1ULL << 0;
constexpr uint64_t kFeatCorrupt = 1ULL << 1;
constexpr uint64_t kFeatExternalData = 1ULL << 2;
constexpr uint64_t kFeatCompression = 1ULL << 3;
constexpr uint64_t kFeatExtendedL2 = 1ULL << 4;

}  // namespace

ImageHandle::~ImageHandle() {
  if (fd_ >= 0) ::close(fd_);
}

int ImageHandle::chain_depth() const {
  return backing_ ? 1 + backing_->chain_depth() : 1;
}

void ImageHandle::read_host(uint64_t offset, uint8_t* out, size_t len) const {
  size_t done = 0;
  while (done < len) {
    ssize_t got = ::pread(fd_, out + done, len - done,
                          static_cast<off_t>(offset + done));
    if (got < 0) throw IoError("image: read failed in " + path_);
    if (got == 0) {
      // Past end of file; treat as zeros.
      std::memset(out + done, 0, len - done);
      return;
    }
    done += static_cast<size_t>(got);
  }
}

std::unique_ptr<ImageHandle> ImageHandle::open_internal(const std::string& path,
                                                        int depth,
                                                        bool require_qcow2) {
  if (depth >= kMaxChainDepth)
    throw Unsupported("image: backing chain deeper than " +
                      std::to_string(kMaxChainDepth) + " at " + path);
  auto img = std::unique_ptr<ImageHandle>(new ImageHandle());
  img->path_ = path;
  img->fd_ = ::open(path.c_str(), O_RDONLY);
  if (img->fd_ < 0) throw IoError("image: cannot open " + path);
  struct stat st{};
  if (::fstat(img->fd_, &st) != 0) throw IoError("image: cannot stat " + path);
  img->file_size_ = static_cast<uint64_t>(st.st_size);

  uint8_t magic_buf[8] = {};
  if (img->file_size_ >= 8) img->read_host(0, magic_buf, 8);
  bool is_qcow = img->file_size_ >= 72 && read_be32(magic_buf) == kQcow2Magic;

  if (!is_qcow) {
    if (require_qcow2) throw BadMagic("image: not a QCOW2 file: " + path);
    img->format_ = ImageFormat::Raw;
    img->virtual_size_ = img->file_size_;
    return img;
  }
  img->format_ = ImageFormat::Qcow2;
  img->parse_qcow2_header(depth);
  return img;
}

void ImageHandle::parse_qcow2_header(int depth) {
  uint8_t h[104] = {};
  read_host(0, h, std::min<uint64_t>(file_size_, sizeof h));

  version_ = read_be32(h + 4);
  if (version_ != 2 && version_ != 3)
    throw Unsupported("image: qcow version " + std::to_string(version_) +
                      " not supported: " + path_);
  uint64_t backing_offset = read_be64(h + 8);
  uint32_t backing_size = read_be32(h + 16);
  cluster_bits_ = read_be32(h + 20);
  if (cluster_bits_ < 9 || cluster_bits_ > 21)
    throw CorruptFs("image: invalid cluster_bits in " + path_);
  cluster_size_ = uint64_t{1} << cluster_bits_;
  l2_bits_ = cluster_bits_ - 3;
  virtual_size_ = read_be64(h + 24);
  uint32_t crypt_method = read_be32(h + 32);
  if (crypt_method != 0) throw Unsupported("image: encrypted qcow2: " + path_);
  uint32_t l1_size = read_be32(h + 36);
  uint64_t l1_offset = read_be64(h + 40);
  uint32_t nb_snapshots = read_be32(h + 60);
  if (nb_snapshots != 0)
    throw Unsupported("image: internal snapshots present: " + path_);

  if (version_ == 3) {
    uint64_t incompat = read_be64(h + 72);
    if (incompat & kFeatCompression)
      throw Unsupported("image: compressed qcow2: " + path_);
    if (incompat & kFeatExternalData)
      throw Unsupported("image: external data file: " + path_);
    if (incompat & (kFeatDirty | kFeatCorrupt))
      throw Unsupported("image: dirty/corrupt refcounts: " + path_);
    if (incompat & kFeatExtendedL2)
      throw Unsupported("image: extended L2 entries: " + path_);
    if (incompat & ~(kFeatDirty | kFeatCorrupt | kFeatExternalData |
                     kFeatCompression | kFeatExtendedL2))
      throw Unsupported("image: unknown incompatible features: " + path_);
  }

  uint64_t needed_l1 =
      (virtual_size_ + (cluster_size_ << l2_bits_) - 1) / (cluster_size_ << l2_bits_);
  if (l1_size < needed_l1)
    throw CorruptFs("image: L1 table too small for virtual size in " + path_);
  l1_.resize(l1_size);
  std::vector<uint8_t> raw(static_cast<size_t>(l1_size) * 8);
  if (!raw.empty()) read_host(l1_offset, raw.data(), raw.size());
  for (uint32_t i = 0; i < l1_size; ++i) l1_[i] = read_be64(raw.data() + i * 8);

  if (backing_offset != 0 && backing_size != 0) {
    if (backing_size > 1023) throw CorruptFs("image: backing name too long in " + path_);
    std::vector<uint8_t> name(backing_size);
    read_host(backing_offset, name.data(), name.size());
    std::string backing_name(reinterpret_cast<char*>(name.data()), name.size());
    std::filesystem::path bp(backing_name);
    if (bp.is_relative())
      bp = std::filesystem::path(path_).parent_path() / bp;
    backing_ = open_internal(bp.string(), depth + 1, false);
  }
}

const std::vector<uint64_t>& ImageHandle::l2_table(uint64_t l2_offset) const {
  auto it = l2_cache_.find(l2_offset);
  if (it != l2_cache_.end()) return it->second;
  size_t entries = size_t{1} << l2_bits_;
  std::vector<uint8_t> raw(entries * 8);
  read_host(l2_offset, raw.data(), raw.size());
  std::vector<uint64_t> table(entries);
  for (size_t i = 0; i < entries; ++i) table[i] = read_be64(raw.data() + i * 8);
  return l2_cache_.emplace(l2_offset, std::move(table)).first->second;
}

Allocation ImageHandle::lookup_cluster(uint64_t guest_offset) const {
  if (guest_offset >= virtual_size_)
    throw GeometryError("image: guest offset beyond virtual size in " + path_);
  if (format_ == ImageFormat::Raw)
    return Allocation{Allocation::Kind::InOverlay, guest_offset};

  Allocation miss{backing_ ? Allocation::Kind::InBacking
                           : Allocation::Kind::Unallocated,
                  0};
  uint64_t l1_index = guest_offset >> (cluster_bits_ + l2_bits_);
  if (l1_index >= l1_.size()) return miss;
  uint64_t l2_offset = l1_[l1_index] & kL2OffsetMask;
  if (l2_offset == 0) return miss;

  uint64_t l2_index = (guest_offset >> cluster_bits_) & ((uint64_t{1} << l2_bits_) - 1);
  uint64_t entry = l2_table(l2_offset)[l2_index];
  if (entry & kL2Compressed)
    throw Unsupported("image: compressed cluster in " + path_);
  uint64_t host = entry & kL2OffsetMask;
  if (entry & kL2ZeroFlag) return Allocation{Allocation::Kind::ZeroCluster, 0};
  if (host == 0) return miss;
  return Allocation{Allocation::Kind::InOverlay,
                    host + (guest_offset & (cluster_size_ - 1))};
}

void ImageHandle::read_through(uint64_t guest_offset, std::span<uint8_t> out) const {
  if (out.empty()) return;
  if (format_ == ImageFormat::Raw) {
    read_host(guest_offset, out.data(), out.size());
    return;
  }
  uint64_t pos = guest_offset;
  size_t done = 0;
  while (done < out.size()) {
    uint64_t in_cluster = pos & (cluster_size_ - 1);
    size_t chunk = static_cast<size_t>(
        std::min<uint64_t>(out.size() - done, cluster_size_ - in_cluster));
    Allocation a = lookup_cluster(pos);
    switch (a.kind) {
      case Allocation::Kind::InOverlay:
        read_host(a.host_offset, out.data() + done, chunk);
        break;
      case Allocation::Kind::ZeroCluster:
      case Allocation::Kind::Unallocated:
        std::memset(out.data() + done, 0, chunk);
        break;
      case Allocation::Kind::InBacking:
        if (pos < backing_->virtual_size()) {
          uint64_t avail = backing_->virtual_size() - pos;
          size_t from_backing = static_cast<size_t>(std::min<uint64_t>(chunk, avail));
          backing_->read_through(pos, out.subspan(done, from_backing));
          if (from_backing < chunk)
            std::memset(out.data() + done + from_backing, 0, chunk - from_backing);
        } else {
          std::memset(out.data() + done, 0, chunk);
        }
        break;
    }
    pos += chunk;
    done += chunk;
  }
}

void ImageHandle::read_guest(uint64_t guest_offset, std::span<uint8_t> out) const {
  if (out.empty()) return;
  if (guest_offset >= virtual_size_ || out.size() > virtual_size_ - guest_offset)
    throw GeometryError("image: read beyond virtual size in " + path_);
  read_through(guest_offset, out);
  bytes_read_.fetch_add(out.size(), std::memory_order_relaxed);
}

std::vector<uint8_t> ImageHandle::read_guest(uint64_t guest_offset,
                                             uint64_t length) const {
  std::vector<uint8_t> out(static_cast<size_t>(length));
  read_guest(guest_offset, std::span<uint8_t>(out));
  return out;
}

bool ImageHandle::allocated_in_overlay(uint64_t guest_offset, uint64_t length) const {
  if (format_ != ImageFormat::Qcow2 || !backing_)
    throw WrongMode("image: overlay predicate needs a QCOW2 overlay with backing");
  if (length == 0) return false;
  if (guest_offset >= virtual_size_ || length > virtual_size_ - guest_offset)
    throw GeometryError("image: range beyond virtual size in " + path_);
  uint64_t first = guest_offset / cluster_size_;
  uint64_t last = (guest_offset + length - 1) / cluster_size_;
  for (uint64_t c = first; c <= last; ++c)
    if (lookup_cluster(c * cluster_size_).in_overlay()) return true;
  return false;
}

uint64_t ImageHandle::locate_filesystem() const {
  if (virtual_size_ < 512) return 0;
  uint8_t mbr[512];
  read_through(0, std::span<uint8_t>(mbr, sizeof mbr));
  if (read_le16(mbr + 510) != 0xAA55) return 0;

  for (int i = 0; i < 4; ++i) {
    const uint8_t* e = mbr + 446 + 16 * i;
    uint8_t type = e[4];
    uint32_t start_lba = read_le32(e + 8);
    if (type == 0 || start_lba == 0) continue;
    if (type == 0xEE) {
      // Protective MBR: follow the GPT header.
      if (virtual_size_ < 1024 + 512) return 0;
      uint8_t gpt[512];
      read_through(512, std::span<uint8_t>(gpt, sizeof gpt));
      if (std::memcmp(gpt, "EFI PART", 8) != 0) return 0;
      uint64_t entries_lba = read_le64(gpt + 72);
      uint32_t num_entries = read_le32(gpt + 80);
      uint32_t entry_size = read_le32(gpt + 84);
      if (entry_size < 128 || num_entries == 0) return 0;
      std::vector<uint8_t> entry(entry_size);
      for (uint32_t n = 0; n < num_entries; ++n) {
        uint64_t off = entries_lba * 512 + static_cast<uint64_t>(n) * entry_size;
        if (off + entry_size > virtual_size_) return 0;
        read_through(off, std::span<uint8_t>(entry));
        bool used = false;
        for (int b = 0; b < 16; ++b) used = used || entry[b] != 0;
        if (used) return read_le64(entry.data() + 32) * 512;
      }
      return 0;
    }
    return static_cast<uint64_t>(start_lba) * 512;
  }
  return 0;
}

std::unique_ptr<ImageHandle> open_image(const std::string& path) {
  return ImageHandle::open_internal(path, 0, false);
}

std::unique_ptr<ImageHandle> open_qcow2(const std::string& path) {
  return ImageHandle::open_internal(path, 0, true);
}

}  // namespace vmscan
