#include "vmscan/remediation.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vmscan/errors.hpp"
#include "vmscan/fs_ntfs.hpp"
#include "vmscan/sha256.hpp"

namespace fs = std::filesystem;

namespace vmscan {

namespace {

// pwrite-style patch of a flat (RAW) image file.
class RawPatcher {
 public:
  explicit RawPatcher(const std::string& path) : path_(path) {
    file_ = std::fopen(path.c_str(), "r+b");
    if (!file_) throw IoError("remediation: cannot open for writing: " + path);
  }
  ~RawPatcher() {
    if (file_) std::fclose(file_);
  }
  void write(uint64_t offset, const uint8_t* data, size_t len) {
    if (std::fseek(file_, static_cast<long>(offset), SEEK_SET) != 0 ||
        std::fwrite(data, 1, len, file_) != len)
      throw IoError("remediation: short write to " + path_);
  }
  void zero(uint64_t offset, uint64_t len) {
    std::vector<uint8_t> zeros(static_cast<size_t>(std::min<uint64_t>(len, 1 << 16)), 0);
    uint64_t done = 0;
    while (done < len) {
      size_t chunk = static_cast<size_t>(std::min<uint64_t>(len - done, zeros.size()));
      write(offset + done, zeros.data(), chunk);
      done += chunk;
    }
  }

 private:
  std::string path_;
  FILE* file_ = nullptr;
};

}  // namespace

uint64_t destroy_file_content(GuestFs& fs_handle, const std::string& path) {
  ImageHandle& image = fs_handle.image();
  if (image.format() != ImageFormat::Raw)
    throw Unsupported(
        "destroy: only RAW/flattened images are supported (QCOW2 would need "
        "cluster allocation)");

  auto meta = fs_handle.resolve(path);
  if (!meta) throw Error("destroy: path not found: " + path);
  if (meta->kind != FileKind::Regular)
    throw Error("destroy: not a regular file: " + path);

  bool resident = false;
  std::vector<Extent> extents = fs_handle.content_extents(*meta, &resident);
  RawPatcher patcher(image.path());

  if (resident) {
    if (extents.empty() || meta->size == 0) return 0;
    if (fs_handle.flavor() == "ntfs") {
      // The record's update-sequence tags must stay consistent.
      auto* ntfs = dynamic_cast<NtfsFs*>(&fs_handle);
      if (!ntfs) throw Error("destroy: ntfs flavor without an NTFS handle");
      std::vector<uint8_t> record = ntfs->zeroed_resident_record(meta->file_id);
      patcher.write(meta->meta_offset, record.data(), record.size());
    } else {
      for (const auto& ext : extents)
        if (ext.kind == Extent::Kind::Data) patcher.zero(ext.guest_offset, ext.length);
    }
    return 1;
  }

  const uint32_t fs_bs = fs_handle.fs_block_size();
  uint64_t zeroed_blocks = 0;
  for (const auto& ext : extents) {
    if (ext.kind != Extent::Kind::Data && ext.kind != Extent::Kind::Unwritten)
      continue;
    // Whole blocks, including tail slack: blocks belong to this file alone.
    uint64_t len = (ext.length + fs_bs - 1) / fs_bs * fs_bs;
    patcher.zero(ext.guest_offset, len);
    zeroed_blocks += len / fs_bs;
  }
  return zeroed_blocks;
}

RestoreBundle build_restore_bundle(const BaselineDb& baseline, GuestFs* base_fs,
                                   const std::vector<std::string>& paths,
                                   const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "files");
  RestoreBundle bundle;

  std::vector<std::string> sorted;
  for (const auto& p : paths)
    sorted.push_back(normalize_guest_path(p, baseline.fold_case()));
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  for (const auto& path : sorted) {
    RestoreRow row;
    row.guest_path = path;
    auto entry = baseline.lookup(path);
    std::vector<uint8_t> content;
    bool have = false;

    if (entry && base_fs) {
      try {
        auto meta = base_fs->resolve(path);
        if (meta && meta->kind == FileKind::Regular) {
          std::vector<uint8_t> candidate = base_fs->read_file(*meta);
          if (sha256_hex(candidate) == entry->sha256) {
            content = std::move(candidate);
            row.source = "base";
            have = true;
          }
        }
      } catch (const Error&) {
        // fall through to the backup copy
      }
    }
    if (entry && !have && !entry->backup_relpath.empty()) {
      std::string backup = baseline.backup_path(*entry);
      std::ifstream in(backup, std::ios::binary);
      if (in) {
        content.assign(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
        if (sha256_hex(content) != entry->sha256)
          throw Error("restore: backup hash mismatch for " + path +
                      " (data layer corruption)");
        row.source = "backup";
        have = true;
      }
    }

    if (!have) {
      row.source = "unrestorable";
      bundle.unrestorable++;
    } else {
      row.sha256 = entry->sha256;
      fs::path dest = fs::path(out_dir) / "files" / guest_path_to_relpath(path);
      fs::create_directories(dest.parent_path());
      std::ofstream out(dest, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(content.data()),
                static_cast<std::streamsize>(content.size()));
      if (!out) throw IoError("restore: short write to " + dest.string());
      bundle.restored++;
    }
    bundle.rows.push_back(std::move(row));
  }

  fs::path manifest_path = fs::path(out_dir) / "manifest.tsv";
  std::ofstream manifest(manifest_path, std::ios::binary | std::ios::trunc);
  if (!manifest) throw IoError("restore: cannot create manifest in " + out_dir);
  manifest << "#guest_path\tsource\tsha256\n";
  for (const auto& row : bundle.rows)
    manifest << row.guest_path << "\t" << row.source << "\t"
             << (row.sha256.empty() ? "-" : row.sha256) << "\n";
  bundle.manifest_path = manifest_path.string();
  return bundle;
}

}  // namespace vmscan
