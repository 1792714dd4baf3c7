#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace vmscan {

enum class ImageFormat { Raw, Qcow2 };

struct Allocation {
  enum class Kind {
    InOverlay,    // data cluster present in this image
    ZeroCluster,  // allocated "reads as zero" cluster (v3)
    InBacking,    // defer to the backing image
    Unallocated,  // no backing; reads as zeros
  };
  Kind kind = Kind::Unallocated;
  uint64_t host_offset = 0;  // valid for InOverlay only; includes intra-cluster remainder

  bool in_overlay() const {
    return kind == Kind::InOverlay || kind == Kind::ZeroCluster;
  }
};

// Read-only handle on a RAW or QCOW2 (v2/v3) image. Backing chains are opened
// recursively; compression, encryption and internal snapshots are rejected.
class ImageHandle {
 public:
  ~ImageHandle();
  ImageHandle(const ImageHandle&) = delete;
  ImageHandle& operator=(const ImageHandle&) = delete;

  ImageFormat format() const { return format_; }
  uint64_t virtual_size() const { return virtual_size_; }
  uint64_t cluster_size() const { return cluster_size_; }
  const std::string& path() const { return path_; }
  const ImageHandle* backing() const { return backing_.get(); }
  int chain_depth() const;

  Allocation lookup_cluster(uint64_t guest_offset) const;
  void read_guest(uint64_t guest_offset, std::span<uint8_t> out) const;
  std::vector<uint8_t> read_guest(uint64_t guest_offset, uint64_t length) const;

  // True iff any cluster overlapping [guest_offset, guest_offset+length) is
  // allocated in this overlay. Requires a QCOW2 image with a backing file.
  bool allocated_in_overlay(uint64_t guest_offset, uint64_t length) const;

  // First partition start (MBR or GPT), or 0 for a bare-filesystem image.
  uint64_t locate_filesystem() const;

  // Guest bytes served through read_guest on this handle.
  uint64_t bytes_read() const { return bytes_read_.load(std::memory_order_relaxed); }

  friend std::unique_ptr<ImageHandle> open_image(const std::string& path);
  friend std::unique_ptr<ImageHandle> open_qcow2(const std::string& path);

 private:
  ImageHandle() = default;
  static std::unique_ptr<ImageHandle> open_internal(const std::string& path, int depth,
                                                    bool require_qcow2);
  void parse_qcow2_header(int depth);
  const std::vector<uint64_t>& l2_table(uint64_t l2_offset) const;
  void read_host(uint64_t offset, uint8_t* out, size_t len) const;
  void read_through(uint64_t guest_offset, std::span<uint8_t> out) const;

  std::string path_;
  int fd_ = -1;
  uint64_t file_size_ = 0;
  ImageFormat format_ = ImageFormat::Raw;
  uint64_t virtual_size_ = 0;

  // QCOW2 fields
  uint32_t version_ = 0;
  uint32_t cluster_bits_ = 0;
  uint64_t cluster_size_ = 0;
  uint32_t l2_bits_ = 0;
  std::vector<uint64_t> l1_;
  std::unique_ptr<ImageHandle> backing_;
  mutable std::unordered_map<uint64_t, std::vector<uint64_t>> l2_cache_;

  mutable std::atomic<uint64_t> bytes_read_{0};
};

// Auto-detects QCOW2 by magic; anything else is a RAW image.
std::unique_ptr<ImageHandle> open_image(const std::string& path);
// Requires the QCOW2 magic; throws BadMagic otherwise.
std::unique_ptr<ImageHandle> open_qcow2(const std::string& path);

}  // namespace vmscan
