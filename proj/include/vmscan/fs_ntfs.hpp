#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>

#include "vmscan/fs.hpp"

namespace vmscan {

// One decoded data run. LCN deltas have already been accumulated; sparse runs
// carry no location.
struct NtfsRun {
  uint64_t cluster_count = 0;
  int64_t lcn = 0;
  bool sparse = false;

  bool operator==(const NtfsRun&) const = default;
};

struct RunList {
  std::vector<NtfsRun> runs;
  uint64_t total_clusters() const;
};

// Decodes an NTFS mapping-pairs region (length/offset nibble headers, signed
// accumulated LCN deltas, 0x00 terminator). Throws MalformedRunList on a
// truncated pair.
RunList decode_run_list(std::span<const uint8_t> raw);

// Read-only NTFS reconstruction: boot sector, MFT bootstrap via record 0,
// attribute iteration, resident/non-resident data, run-list decoding. Path
// resolution uses a linear MFT pass over FILE_NAME parent references.
class NtfsFs : public GuestFs {
 public:
  struct Params {
    uint32_t bytes_per_sector = 0;
    uint32_t sectors_per_cluster = 0;
    uint32_t cluster_size = 0;
    uint32_t record_size = 0;
    uint64_t total_sectors = 0;
    uint64_t mft_lcn = 0;
    uint64_t record_count = 0;
  };

  static std::unique_ptr<NtfsFs> mount(ImageHandle& image, uint64_t partition_offset);

  std::string flavor() const override { return "ntfs"; }
  bool case_insensitive() const override { return true; }
  uint32_t fs_block_size() const override { return params_.cluster_size; }
  uint64_t partition_offset() const override { return partition_offset_; }
  ImageHandle& image() const override { return image_; }

  std::optional<FileMeta> resolve(const std::string& path) override;
  std::vector<Extent> content_extents(const FileMeta& meta, bool* resident) override;
  std::vector<uint8_t> read_file(const FileMeta& meta) override;
  std::vector<std::pair<std::string, FileMeta>> list_files() override;

  const Params& params() const { return params_; }
  uint64_t record_guest_offset(uint64_t record_no) const;
  FileMeta record_meta(uint64_t record_no);
  // Guest byte offset of the STANDARD_INFORMATION mtime field (test producer
  // uses it to simulate guest metadata updates).
  uint64_t standard_info_mtime_offset(uint64_t record_no) const;
  uint64_t alternate_streams_skipped() const { return ads_skipped_; }

  // For content destruction of a resident value: returns the raw on-disk
  // record with the unnamed DATA value zeroed, update-sequence tags and their
  // USA slots kept consistent.
  std::vector<uint8_t> zeroed_resident_record(uint64_t record_no);

 private:
  struct Attribute {
    uint32_t type = 0;
    std::string name;
    bool non_resident = false;
    uint16_t flags = 0;
    std::vector<uint8_t> value;          // resident
    std::vector<uint8_t> mapping_pairs;  // non-resident
    uint64_t data_size = 0;
    uint64_t init_size = 0;
    uint16_t value_offset = 0;  // within the record, resident only
    uint16_t record_offset = 0;  // attribute start within the record
  };
  struct Record {
    uint64_t record_no = 0;
    bool in_use = false;
    bool is_dir = false;
    std::vector<Attribute> attrs;
  };
  enum class RecordState { Ok, Empty, BadFixup };

  NtfsFs(ImageHandle& image, uint64_t partition_offset);

  std::vector<uint8_t> read_record_raw(uint64_t record_no) const;
  RecordState parse_record(std::vector<uint8_t> raw, uint64_t record_no,
                           Record* out) const;
  Record require_record(uint64_t record_no) const;
  const Attribute* find_data(const Record& rec) const;  // unnamed DATA
  void build_tree();
  std::vector<Extent> data_extents(const Attribute& data, uint64_t record_no) const;

  ImageHandle& image_;
  uint64_t partition_offset_;
  Params params_;
  std::vector<NtfsRun> mft_runs_;

  struct Node {
    uint64_t parent = 0;
    std::string name;  // utf-8
    bool is_dir = false;
  };
  bool tree_built_ = false;
  std::map<uint64_t, Node> nodes_;
  std::multimap<uint64_t, uint64_t> children_;
  mutable uint64_t ads_skipped_ = 0;
};

std::unique_ptr<GuestFs> mount_ntfs(ImageHandle& image, uint64_t partition_offset);

}  // namespace vmscan
