#include "fixture_qcow2.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "vmscan/bytes.hpp"

namespace vmscan::testing {

namespace {
constexpr uint64_t kOflagCopied = 1ULL << 63;
constexpr uint64_t kZeroFlag = 1ULL << 0;
}  // namespace

using vmscan::write_be16;
using vmscan::write_be32;
using vmscan::write_be64;

Qcow2Writer::Qcow2Writer(Options opts) : opts_(std::move(opts)) {
  if (opts_.version != 2 && opts_.version != 3)
    throw std::runtime_error("qcow2 writer: version must be 2 or 3");
  cluster_size_ = uint64_t{1} << opts_.cluster_bits;
  l2_bits_ = opts_.cluster_bits - 3;

  // Cluster 0: header (+ backing name). L1 gets its own cluster now; L2 and
  // data clusters are allocated on demand. Refcount structures are appended
  // by finish().
  file_.assign(cluster_size_, 0);
  l1_offset_ = alloc_cluster();
  uint64_t clusters = (opts_.virtual_size + cluster_size_ - 1) / cluster_size_;
  uint64_t l1_size = (clusters + (1ULL << l2_bits_) - 1) >> l2_bits_;
  if (l1_size * 8 > cluster_size_)
    throw std::runtime_error("qcow2 writer: L1 larger than one cluster");
  l1_.assign(l1_size, 0);

  flat_ = opts_.backing_bytes;
  flat_.resize(opts_.virtual_size, 0);
}

uint64_t Qcow2Writer::alloc_cluster() {
  uint64_t off = file_.size();
  file_.resize(file_.size() + cluster_size_, 0);
  return off;
}

std::vector<uint64_t>& Qcow2Writer::l2_for(uint64_t l1_index) {
  auto it = l2_.find(l1_index);
  if (it == l2_.end()) {
    uint64_t off = alloc_cluster();
    it = l2_.emplace(l1_index,
                     std::make_pair(off, std::vector<uint64_t>(1ULL << l2_bits_, 0)))
             .first;
    l1_[l1_index] = off | kOflagCopied;
  }
  return it->second.second;
}

uint64_t Qcow2Writer::data_cluster_for(uint64_t guest_cluster) {
  uint64_t l1_index = guest_cluster >> l2_bits_;
  uint64_t l2_index = guest_cluster & ((1ULL << l2_bits_) - 1);
  std::vector<uint64_t>& l2 = l2_for(l1_index);
  uint64_t entry = l2[l2_index];
  if ((entry & ~(kOflagCopied | kZeroFlag)) != 0)
    return entry & ~(kOflagCopied | kZeroFlag);

  uint64_t off = alloc_cluster();
  // Copy-on-write: populate from the backing content before the overlay
  // write lands.
  uint64_t guest_off = guest_cluster * cluster_size_;
  uint64_t n = std::min<uint64_t>(cluster_size_,
                                  opts_.backing_bytes.size() > guest_off
                                      ? opts_.backing_bytes.size() - guest_off
                                      : 0);
  if (n > 0 && !(entry & kZeroFlag))
    std::memcpy(file_.data() + off, opts_.backing_bytes.data() + guest_off,
                static_cast<size_t>(n));
  l2[l2_index] = off | kOflagCopied;
  return off;
}

void Qcow2Writer::write_guest(uint64_t guest_offset, std::span<const uint8_t> bytes) {
  if (guest_offset + bytes.size() > opts_.virtual_size)
    throw std::runtime_error("qcow2 writer: write beyond virtual size");
  size_t done = 0;
  while (done < bytes.size()) {
    uint64_t pos = guest_offset + done;
    uint64_t cluster = pos / cluster_size_;
    uint64_t within = pos % cluster_size_;
    size_t chunk = static_cast<size_t>(
        std::min<uint64_t>(bytes.size() - done, cluster_size_ - within));
    uint64_t host = data_cluster_for(cluster);
    std::memcpy(file_.data() + host + within, bytes.data() + done, chunk);
    done += chunk;
  }
  std::memcpy(flat_.data() + guest_offset, bytes.data(), bytes.size());
}

void Qcow2Writer::set_zero_cluster(uint64_t guest_cluster_index) {
  if (opts_.version != 3)
    throw std::runtime_error("qcow2 writer: zero clusters need v3");
  uint64_t l1_index = guest_cluster_index >> l2_bits_;
  uint64_t l2_index = guest_cluster_index & ((1ULL << l2_bits_) - 1);
  l2_for(l1_index)[l2_index] = kZeroFlag;
  uint64_t off = guest_cluster_index * cluster_size_;
  uint64_t n = std::min<uint64_t>(cluster_size_, opts_.virtual_size - off);
  std::fill(flat_.begin() + off, flat_.begin() + off + n, 0);
}

std::vector<uint64_t> Qcow2Writer::allocated_guest_clusters() const {
  std::vector<uint64_t> out;
  for (const auto& [l1_index, entry] : l2_) {
    const auto& table = entry.second;
    for (uint64_t i = 0; i < table.size(); ++i)
      if (table[i] != 0) out.push_back((l1_index << l2_bits_) + i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<uint8_t> Qcow2Writer::finish() {
  // L2 tables.
  for (const auto& [l1_index, entry] : l2_) {
    const auto& [off, table] = entry;
    for (uint64_t i = 0; i < table.size(); ++i)
      write_be64(file_.data() + off + i * 8, table[i]);
  }
  // L1 table.
  for (uint64_t i = 0; i < l1_.size(); ++i)
    write_be64(file_.data() + l1_offset_ + i * 8, l1_[i]);

  // Refcount table + blocks appended at the end; every cluster in the file
  // (including these) gets refcount 1.
  const uint64_t entries_per_block = cluster_size_ / 2;
  uint64_t refcount_table_offset = file_.size();
  file_.resize(file_.size() + cluster_size_, 0);
  uint64_t data_clusters = file_.size() / cluster_size_;
  uint64_t rc_blocks = (data_clusters + entries_per_block - 1) / entries_per_block;
  while ((data_clusters + rc_blocks + entries_per_block - 1) / entries_per_block >
         rc_blocks)
    ++rc_blocks;
  uint64_t rc_block_base = file_.size();
  file_.resize(file_.size() + rc_blocks * cluster_size_, 0);
  uint64_t total_clusters = file_.size() / cluster_size_;
  for (uint64_t b = 0; b < rc_blocks; ++b)
    write_be64(file_.data() + refcount_table_offset + b * 8,
               rc_block_base + b * cluster_size_);
  for (uint64_t c = 0; c < total_clusters; ++c) {
    uint64_t block = c / entries_per_block;
    uint64_t slot = c % entries_per_block;
    write_be16(file_.data() + rc_block_base + block * cluster_size_ + slot * 2, 1);
  }

  // Header.
  uint8_t* h = file_.data();
  write_be32(h + 0, 0x514649FB);
  write_be32(h + 4, opts_.version);
  uint32_t header_len = opts_.version == 3 ? 104 : 72;
  if (!opts_.backing_name.empty()) {
    if (header_len + opts_.backing_name.size() > cluster_size_)
      throw std::runtime_error("qcow2 writer: backing name too long");
    write_be64(h + 8, header_len);
    write_be32(h + 16, static_cast<uint32_t>(opts_.backing_name.size()));
    std::memcpy(h + header_len, opts_.backing_name.data(),
                opts_.backing_name.size());
  }
  write_be32(h + 20, opts_.cluster_bits);
  write_be64(h + 24, opts_.virtual_size);
  write_be32(h + 32, 0);  // crypt_method
  write_be32(h + 36, static_cast<uint32_t>(l1_.size()));
  write_be64(h + 40, l1_offset_);
  write_be64(h + 48, refcount_table_offset);
  write_be32(h + 56, 1);  // refcount_table_clusters
  write_be32(h + 60, 0);  // nb_snapshots
  write_be64(h + 64, 0);  // snapshots_offset
  if (opts_.version == 3) {
    write_be64(h + 72, 0);   // incompatible_features
    write_be64(h + 80, 0);   // compatible_features
    write_be64(h + 88, 0);   // autoclear_features
    write_be32(h + 96, 4);   // refcount_order
    write_be32(h + 100, header_len);
  }
  return file_;
}

std::vector<uint8_t> make_empty_overlay(const std::string& backing_name,
                                        const std::vector<uint8_t>& backing_bytes,
                                        uint32_t cluster_bits, uint32_t version) {
  Qcow2Writer::Options opts;
  opts.version = version;
  opts.cluster_bits = cluster_bits;
  opts.virtual_size = backing_bytes.size();
  opts.backing_name = backing_name;
  opts.backing_bytes = backing_bytes;
  Qcow2Writer w(std::move(opts));
  return w.finish();
}

}  // namespace vmscan::testing
