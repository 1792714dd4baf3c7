#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace vmscan::testing {

// Write-side QCOW2 builder for fixtures. Independent of the reader under
// test: it lays out headers, L1/L2 tables, refcounts and data clusters
// itself, and maintains a parallel flattened reference buffer that tests
// compare reads against.
class Qcow2Writer {
 public:
  struct Options {
    uint32_t version = 3;
    uint32_t cluster_bits = 16;
    uint64_t virtual_size = 0;
    std::string backing_name;            // stored in the header (may be relative)
    std::vector<uint8_t> backing_bytes;  // content of the backing chain, flattened
  };

  explicit Qcow2Writer(Options opts);

  void write_guest(uint64_t guest_offset, std::span<const uint8_t> bytes);
  // v3 "reads as zero" cluster: allocated for the predicate, content zero.
  void set_zero_cluster(uint64_t guest_cluster_index);

  uint64_t cluster_size() const { return cluster_size_; }
  const std::vector<uint8_t>& flat() const { return flat_; }
  std::vector<uint64_t> allocated_guest_clusters() const;

  std::vector<uint8_t> finish();

 private:
  uint64_t alloc_cluster();
  std::vector<uint64_t>& l2_for(uint64_t l1_index);
  uint64_t data_cluster_for(uint64_t guest_cluster);

  Options opts_;
  uint64_t cluster_size_;
  uint32_t l2_bits_;
  std::vector<uint8_t> file_;
  std::vector<uint64_t> l1_;
  uint64_t l1_offset_ = 0;
  std::map<uint64_t, std::pair<uint64_t, std::vector<uint64_t>>> l2_;  // l1_idx -> (offset, entries)
  std::vector<uint8_t> flat_;
};

// Convenience: one-cluster-aligned full-file qcow2 with no writes yet.
std::vector<uint8_t> make_empty_overlay(const std::string& backing_name,
                                        const std::vector<uint8_t>& backing_bytes,
                                        uint32_t cluster_bits = 16,
                                        uint32_t version = 3);

}  // namespace vmscan::testing
