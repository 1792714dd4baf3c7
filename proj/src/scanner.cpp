#include "vmscan/scanner.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "vmscan/errors.hpp"
#include "vmscan/sha256.hpp"

namespace fs = std::filesystem;

namespace vmscan {

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::Secure: return "Secure";
    case Verdict::Modified: return "Modified";
    case Verdict::New: return "New";
    case Verdict::Deleted: return "Deleted";
    case Verdict::ScanError: return "ScanError";
  }
  return "?";
}

std::optional<uint64_t> dirty_predicate_single(const DirtyBlockMap& map,
                                               const FileBlockMap& file_map) {
  for (uint64_t addr : file_map.blocks) {
    if (addr == kUnmappedBlock) continue;
    if (map.is_dirty(addr)) return addr;  // first hit is enough
  }
  return std::nullopt;
}

std::vector<uint64_t> dirty_predicate_overlay(ImageHandle& overlay,
                                              const FileMeta& meta,
                                              const std::vector<Extent>& extents,
                                              bool resident) {
  const uint64_t cs = overlay.cluster_size();
  // Step 1: an unmodified file cannot have a modified metadata record.
  if (!overlay.allocated_in_overlay(meta.meta_offset, meta.meta_length)) return {};

  // Step 2: metadata allocation alone (e.g. access-time update) does not mean
  // the content changed; require an allocated content range.
  std::vector<uint64_t> clusters;
  if (resident) {
    clusters.push_back(meta.meta_offset / cs);
    return clusters;
  }
  for (const auto& ext : extents) {
    if (ext.kind == Extent::Kind::Hole || ext.length == 0) continue;
    uint64_t first = ext.guest_offset / cs;
    uint64_t last = (ext.guest_offset + ext.length - 1) / cs;
    for (uint64_t c = first; c <= last; ++c) {
      if (overlay.lookup_cluster(c * cs).in_overlay()) {
        clusters.push_back(c);
        return clusters;
      }
    }
  }
  return {};
}

namespace {

struct Candidate {
  std::string path;
  std::optional<FileMeta> meta;  // already resolved when coming from a listing
};

std::vector<Candidate> gather_candidates(GuestFs& fs_handle, const ScanRequest& request,
                                         const BaselineDb& baseline) {
  std::vector<Candidate> out;
  std::set<std::string> seen;
  if (request.paths.has_value()) {
    for (const auto& p : *request.paths) {
      std::string norm = fs_handle.normalize_path(p);
      if (seen.insert(norm).second) out.push_back(Candidate{norm, std::nullopt});
    }
    return out;
  }
  for (auto& [path, meta] : fs_handle.list_files()) {
    if (meta.kind != FileKind::Regular) continue;
    std::string norm = fs_handle.normalize_path(path);
    if (seen.insert(norm).second) out.push_back(Candidate{norm, meta});
  }
  // Baseline entries that no longer resolve must still be reported (Deleted).
  for (const auto& [path, entry] : baseline.entries()) {
    if (seen.insert(path).second) out.push_back(Candidate{path, std::nullopt});
  }
  return out;
}

}  // namespace

ScanOutcome scan(GuestFs& fs_handle, const ScanRequest& request,
                 const BaselineDb& baseline) {
  if (request.mode == ScanRequest::Mode::SingleImage && !request.dirty_map &&
      !request.force_full)
    throw Error("scan: single-image mode needs a dirty map");
  if (request.mode == ScanRequest::Mode::MultiImage && !request.overlay)
    throw Error("scan: overlay mode needs an overlay image");

  std::vector<Candidate> candidates = gather_candidates(fs_handle, request, baseline);
  std::sort(candidates.begin(), candidates.end(),
            [](const auto& a, const auto& b) { return a.path < b.path; });

  ScanOutcome outcome;
  for (auto& cand : candidates) {
    outcome.stats.files_considered++;
    ScanResult res;
    res.path = cand.path;
    try {
      std::optional<FileMeta> meta =
          cand.meta ? cand.meta : fs_handle.resolve(cand.path);
      if (!meta) {
        res.verdict = Verdict::Deleted;
        outcome.stats.deleted++;
        outcome.results.push_back(std::move(res));
        continue;
      }
      if (meta->kind != FileKind::Regular) {
        res.verdict = Verdict::ScanError;
        res.detail = "not a regular file";
        outcome.stats.errors++;
        outcome.results.push_back(std::move(res));
        continue;
      }

      bool dirty = false;
      if (request.force_full) {
        dirty = true;
      } else if (request.mode == ScanRequest::Mode::SingleImage) {
        FileBlockMap file_map = fs_handle.file_block_map(
            cand.path, *meta, request.dirty_map->geometry());
        if (auto hit = dirty_predicate_single(*request.dirty_map, file_map)) {
          dirty = true;
          res.evidence.push_back(*hit);
        }
      } else {
        bool resident = false;
        std::vector<Extent> extents = fs_handle.content_extents(*meta, &resident);
        res.evidence = dirty_predicate_overlay(*request.overlay, *meta, extents,
                                               resident);
        dirty = !res.evidence.empty();
      }

      if (!dirty) {
        // No dirty evidence: secure without reading any content byte.
        res.verdict = Verdict::Secure;
        outcome.stats.secure++;
        outcome.results.push_back(std::move(res));
        continue;
      }

      std::vector<uint8_t> content = fs_handle.read_file(*meta);
      res.bytes_read = content.size();
      outcome.stats.files_hashed++;
      outcome.stats.content_bytes_read += content.size();
      res.sha256 = sha256_hex(content);

      auto entry = baseline.lookup(cand.path);
      if (!entry) {
        res.verdict = Verdict::New;
        outcome.stats.created++;
      } else if (entry->sha256 == res.sha256) {
        // Dirty blocks but identical content: the hash is ground truth.
        res.verdict = Verdict::Secure;
        outcome.stats.secure++;
      } else {
        res.verdict = Verdict::Modified;
        outcome.stats.modified++;
      }
    } catch (const Error& e) {
      res.verdict = Verdict::ScanError;
      res.detail = e.what();
      outcome.stats.errors++;
    }
    outcome.results.push_back(std::move(res));
  }
  return outcome;
}

std::string export_dirty(const std::vector<ScanResult>& results, GuestFs& fs_handle,
                         const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "files");
  std::ofstream manifest(fs::path(out_dir) / "manifest.tsv",
                         std::ios::binary | std::ios::trunc);
  if (!manifest) throw IoError("export: cannot create manifest in " + out_dir);
  manifest << "#guest_path\tverdict\tsha256\texport_relpath\n";

  for (const auto& res : results) {
    if (res.verdict == Verdict::Secure || res.verdict == Verdict::Deleted) continue;
    std::string relpath = "files/" + guest_path_to_relpath(res.path);
    try {
      auto meta = fs_handle.resolve(res.path);
      if (!meta || meta->kind != FileKind::Regular)
        throw Error("path no longer resolves to a regular file");
      std::vector<uint8_t> content = fs_handle.read_file(*meta);
      fs::path dest = fs::path(out_dir) / relpath;
      fs::create_directories(dest.parent_path());
      std::ofstream out(dest, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(content.data()),
                static_cast<std::streamsize>(content.size()));
      if (!out) throw IoError("short write");
      manifest << res.path << "\t" << verdict_name(res.verdict) << "\t"
               << sha256_hex(content) << "\t" << relpath << "\n";
    } catch (const std::exception& e) {
      // Extraction failures are recorded, not fatal.
      manifest << res.path << "\t" << verdict_name(res.verdict) << "\t-\terror:"
               << e.what() << "\n";
    }
  }
  return (fs::path(out_dir) / "manifest.tsv").string();
}

}  // namespace vmscan
