#include "vmscan/workload.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include <json.hpp>

#include "vmscan/errors.hpp"
#include "vmscan/fs.hpp"
#include "vmscan/fs_ext4.hpp"
#include "vmscan/fs_ntfs.hpp"
#include "vmscan/image.hpp"

namespace vmscan {

namespace {

class RawImageWriter {
 public:
  explicit RawImageWriter(const std::string& path) : path_(path) {
    file_ = std::fopen(path.c_str(), "r+b");
    if (!file_) throw IoError("replay: cannot open image for writing: " + path);
  }
  ~RawImageWriter() {
    if (file_) std::fclose(file_);
  }
  void write(uint64_t offset, const uint8_t* data, size_t len) {
    if (std::fseek(file_, static_cast<long>(offset), SEEK_SET) != 0 ||
        std::fwrite(data, 1, len, file_) != len)
      throw IoError("replay: short write to " + path_);
  }

 private:
  std::string path_;
  FILE* file_ = nullptr;
};

std::vector<uint8_t> random_bytes(std::mt19937_64& rng, size_t n) {
  std::vector<uint8_t> out(n);
  for (auto& b : out) b = static_cast<uint8_t>(rng());
  return out;
}

// Maps a logical byte range of a file onto absolute image ranges.
std::vector<std::pair<uint64_t, uint64_t>> map_logical_range(
    const std::vector<Extent>& extents, uint64_t at, uint64_t length,
    const std::string& path) {
  std::vector<std::pair<uint64_t, uint64_t>> out;
  uint64_t logical = 0;
  uint64_t end = at + length;
  for (const auto& ext : extents) {
    uint64_t ext_end = logical + ext.length;
    uint64_t lo = std::max(logical, at);
    uint64_t hi = std::min(ext_end, end);
    if (lo < hi) {
      if (ext.kind != Extent::Kind::Data)
        throw Error("replay: patch range crosses a hole in " + path);
      out.emplace_back(ext.guest_offset + (lo - logical), hi - lo);
    }
    logical = ext_end;
    if (logical >= end) break;
  }
  if (logical < end)
    throw Error("replay: patch range beyond end of " + path);
  return out;
}

std::vector<uint8_t> read_whole_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("replay: cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                              std::istreambuf_iterator<char>());
}

}  // namespace

std::vector<WorkloadOp> parse_workload(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("workload: cannot open " + json_path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("workload: invalid JSON in " + json_path + ": " + e.what());
  }
  if (!doc.is_array()) throw ConfigError("workload: top level must be an array");

  std::vector<WorkloadOp> ops;
  for (const auto& item : doc) {
    WorkloadOp op;
    std::string kind = item.value("op", "");
    if (kind == "patch") {
      op.kind = WorkloadOp::Kind::Patch;
      op.path = item.at("path").get<std::string>();
      op.at = item.value("at", 0ull);
      op.length = item.at("len").get<uint64_t>();
    } else if (kind == "touch") {
      op.kind = WorkloadOp::Kind::Touch;
      op.path = item.at("path").get<std::string>();
    } else if (kind == "raw") {
      op.kind = WorkloadOp::Kind::Raw;
      op.offset = item.at("offset").get<uint64_t>();
      op.length = item.at("len").get<uint64_t>();
    } else if (kind == "become") {
      op.kind = WorkloadOp::Kind::Become;
      op.target = item.at("image").get<std::string>();
    } else {
      throw ConfigError("workload: unknown op '" + kind + "'");
    }
    op.seed = item.value("seed", 0ull);
    ops.push_back(std::move(op));
  }
  return ops;
}

ReplayResult replay_workload(const std::string& image_path,
                             const std::vector<WorkloadOp>& ops, uint64_t seed,
                             const std::optional<std::string>& trace_out,
                             std::optional<uint64_t> fs_offset_override) {
  ReplayResult result;

  for (const auto& op : ops) {
    std::mt19937_64 rng(seed ^ (op.seed * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL));
    if (op.kind == WorkloadOp::Kind::Become) {
      std::vector<uint8_t> target = read_whole_file(op.target);
      std::vector<uint8_t> current = read_whole_file(image_path);
      if (target.size() != current.size())
        throw Error("replay: become target size differs from image");
      // Emit one record per maximal differing run.
      size_t i = 0;
      while (i < target.size()) {
        if (target[i] == current[i]) {
          ++i;
          continue;
        }
        size_t j = i + 1;
        while (j < target.size() && target[j] != current[j]) ++j;
        result.records.push_back(WriteRecord{i, j - i});
        i = j;
      }
      RawImageWriter writer(image_path);
      writer.write(0, target.data(), target.size());
      result.ops_applied++;
      continue;
    }

    auto image = open_image(image_path);
    if (image->format() != ImageFormat::Raw)
      throw Unsupported("replay: in-place workloads need a RAW image");

    if (op.kind == WorkloadOp::Kind::Raw) {
      if (op.length == 0) throw Error("replay: raw op with zero length");
      std::vector<uint8_t> current = image->read_guest(op.offset, op.length);
      std::vector<uint8_t> fresh = random_bytes(rng, current.size());
      if (fresh == current) fresh[0] ^= 0xFF;
      RawImageWriter writer(image_path);
      writer.write(op.offset, fresh.data(), fresh.size());
      result.records.push_back(WriteRecord{op.offset, op.length});
      result.ops_applied++;
      continue;
    }

    uint64_t part = fs_offset_override ? *fs_offset_override
                                       : image->locate_filesystem();
    auto fs_handle = mount_filesystem(*image, part);
    auto meta = fs_handle->resolve(op.path);
    if (!meta) throw Error("replay: no such file: " + op.path);
    if (meta->kind != FileKind::Regular)
      throw Error("replay: not a regular file: " + op.path);

    RawImageWriter writer(image_path);
    if (op.kind == WorkloadOp::Kind::Patch) {
      if (op.length == 0) throw Error("replay: patch op with zero length");
      if (op.at + op.length > meta->size)
        throw Error("replay: patch range beyond file size for " + op.path);
      bool resident = false;
      std::vector<Extent> extents = fs_handle->content_extents(*meta, &resident);
      auto ranges = map_logical_range(extents, op.at, op.length, op.path);
      bool any_diff = false;
      std::vector<std::vector<uint8_t>> payloads;
      for (const auto& [off, len] : ranges) {
        std::vector<uint8_t> current = image->read_guest(off, len);
        std::vector<uint8_t> fresh = random_bytes(rng, current.size());
        if (fresh != current) any_diff = true;
        payloads.push_back(std::move(fresh));
      }
      if (!any_diff && !payloads.empty()) payloads[0][0] ^= 0xFF;
      for (size_t i = 0; i < ranges.size(); ++i) {
        writer.write(ranges[i].first, payloads[i].data(), payloads[i].size());
        result.records.push_back(WriteRecord{ranges[i].first, payloads[i].size()});
      }
    }

    // Patch implies a metadata update, the way a guest write would.
    uint64_t mtime_off = 0;
    uint32_t mtime_len = 0;
    if (fs_handle->flavor() == "ext4") {
      mtime_off = meta->meta_offset + 16;  // i_mtime
      mtime_len = 4;
    } else {
      auto* ntfs = dynamic_cast<NtfsFs*>(fs_handle.get());
      if (!ntfs) throw Error("replay: unexpected filesystem flavor");
      mtime_off = ntfs->standard_info_mtime_offset(meta->file_id);
      mtime_len = 8;
    }
    std::vector<uint8_t> stamp = image->read_guest(mtime_off, mtime_len);
    stamp[0] = static_cast<uint8_t>(stamp[0] + 1);
    writer.write(mtime_off, stamp.data(), stamp.size());
    result.records.push_back(WriteRecord{mtime_off, mtime_len});
    result.ops_applied++;
  }

  result.records_emitted = result.records.size();
  if (trace_out) write_trace_file(*trace_out, result.records);
  return result;
}

}  // namespace vmscan
