#include "vmscan/cli.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "vmscan/baseline_db.hpp"
#include "vmscan/config.hpp"
#include "vmscan/dirty_map.hpp"
#include "vmscan/errors.hpp"
#include "vmscan/fs.hpp"
#include "vmscan/image.hpp"
#include "vmscan/remediation.hpp"
#include "vmscan/scanner.hpp"
#include "vmscan/trace_transport.hpp"
#include "vmscan/workload.hpp"

namespace vmscan {

namespace {

std::vector<std::string> read_paths_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cli: cannot open paths file " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

uint64_t resolve_fs_offset(const ImageHandle& image, const Config& cfg,
                           std::optional<uint64_t> flag_value) {
  if (flag_value) return *flag_value;
  if (cfg.fs_offset) return *cfg.fs_offset;
  return image.locate_filesystem();
}

ImageGeometry derive_geometry(const ImageHandle& image, uint64_t header,
                              uint32_t block_size) {
  if (header >= image.virtual_size())
    throw GeometryError("cli: filesystem offset beyond image size");
  ImageGeometry g;
  g.header_offset = header;
  g.block_size = block_size;
  g.total_blocks = (image.virtual_size() - header) / block_size;
  g.validate();
  return g;
}

nlohmann::json results_to_json(const ScanOutcome& outcome) {
  nlohmann::json doc;
  doc["results"] = nlohmann::json::array();
  for (const auto& r : outcome.results) {
    nlohmann::json row;
    row["path"] = r.path;
    row["verdict"] = verdict_name(r.verdict);
    row["hash"] = r.sha256;
    row["evidence_count"] = r.evidence.size();
    if (!r.detail.empty()) row["detail"] = r.detail;
    doc["results"].push_back(std::move(row));
  }
  doc["stats"] = {{"files_considered", outcome.stats.files_considered},
                  {"files_hashed", outcome.stats.files_hashed},
                  {"content_bytes_read", outcome.stats.content_bytes_read},
                  {"secure", outcome.stats.secure},
                  {"modified", outcome.stats.modified},
                  {"new", outcome.stats.created},
                  {"deleted", outcome.stats.deleted},
                  {"errors", outcome.stats.errors}};
  return doc;
}

void print_report(const ScanOutcome& outcome, const Config& cfg, bool as_json,
                  std::ostream& out) {
  if (as_json) {
    out << results_to_json(outcome).dump(2) << "\n";
    return;
  }
  size_t trunc = cfg.hash_truncation == 0 ? 64 : cfg.hash_truncation;
  out << std::left << std::setw(48) << "PATH" << std::setw(10) << "VERDICT"
      << std::setw(trunc + 2) << "HASH" << "EVIDENCE\n";
  for (const auto& r : outcome.results) {
    std::string hash = r.sha256.empty() ? "-" : r.sha256.substr(0, trunc);
    out << std::left << std::setw(48) << r.path << std::setw(10)
        << verdict_name(r.verdict) << std::setw(trunc + 2) << hash
        << r.evidence.size();
    if (!r.detail.empty()) out << "  " << r.detail;
    out << "\n";
  }
  const auto& s = outcome.stats;
  out << s.modified << " modified, " << s.created << " new, " << s.deleted
      << " deleted, " << s.secure << " secure, " << s.errors << " errors; "
      << s.files_hashed << " files hashed, " << s.content_bytes_read
      << " content bytes read\n";
}

int finish_scan(const ScanOutcome& outcome, const Config& cfg, bool as_json,
                const std::string& results_out, std::ostream& out) {
  if (!results_out.empty()) {
    std::ofstream f(results_out, std::ios::trunc);
    if (!f) throw IoError("cli: cannot write results to " + results_out);
    f << results_to_json(outcome).dump(2) << "\n";
  }
  print_report(outcome, cfg, as_json, out);
  return outcome.stats.findings() > 0 ? kExitFindings : kExitClean;
}

struct ScanArgs {
  std::string image;
  std::string map_file;
  std::string baseline_dir;
  std::string paths_file;
  bool all = false;
  bool as_json = false;
  bool force_full = false;
  std::string results_out;
  std::optional<uint64_t> fs_offset;
};

std::optional<std::vector<std::string>> scan_path_set(const ScanArgs& args) {
  if (args.all) return std::nullopt;
  return read_paths_file(args.paths_file);
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out,
                std::ostream& err) {
  CLI::App app{"Out-of-VM disk image filesystem scanner"};
  app.require_subcommand(1);

  std::string config_file;
  app.add_option("--config", config_file, "key = value config file");

  // --- baseline ---
  auto* cmd_baseline = app.add_subcommand("baseline", "Snapshot protected-file hashes");
  std::string b_image, b_db, b_paths;
  bool b_all = false, b_backups = false;
  std::optional<uint64_t> b_fs_offset;
  cmd_baseline->add_option("image", b_image, "trusted image")->required();
  cmd_baseline->add_option("--db", b_db, "baseline directory")->required();
  auto* b_all_flag = cmd_baseline->add_flag("--all", b_all, "every regular file");
  cmd_baseline->add_option("--paths", b_paths, "protected paths file")->excludes(b_all_flag);
  cmd_baseline->add_flag("--backups", b_backups, "store backup copies");
  cmd_baseline->add_option("--fs-offset", b_fs_offset, "filesystem offset override");

  // --- ingest ---
  auto* cmd_ingest = app.add_subcommand("ingest", "Build a dirty block map from traces");
  std::string i_image, i_out, i_spill_dir;
  std::vector<std::string> i_traces;
  std::optional<uint64_t> i_fs_offset;
  std::optional<uint32_t> i_block_size;
  cmd_ingest->add_option("image", i_image, "image the trace belongs to")->required();
  cmd_ingest->add_option("--trace", i_traces, "trace file(s) to replay");
  cmd_ingest->add_option("--spill-dir", i_spill_dir, "recover records from spill files");
  cmd_ingest->add_option("--out", i_out, "map output file")->required();
  cmd_ingest->add_option("--fs-offset", i_fs_offset, "filesystem offset override");
  cmd_ingest->add_option("--block-size", i_block_size, "map block size");

  // --- scan-single ---
  auto* cmd_single = app.add_subcommand("scan-single", "Scan with a dirty block map");
  ScanArgs s1;
  cmd_single->add_option("image", s1.image, "image to scan")->required();
  cmd_single->add_option("--map", s1.map_file, "dirty block map")->required();
  cmd_single->add_option("--baseline", s1.baseline_dir, "baseline directory")->required();
  auto* s1_all = cmd_single->add_flag("--all", s1.all, "scan every file");
  cmd_single->add_option("--paths", s1.paths_file, "protected paths file")->excludes(s1_all);
  cmd_single->add_flag("--json", s1.as_json, "machine-readable output");
  cmd_single->add_flag("--force-full", s1.force_full, "ignore the map, hash everything");
  cmd_single->add_option("--results-out", s1.results_out, "write JSON results here");
  cmd_single->add_option("--fs-offset", s1.fs_offset, "filesystem offset override");

  // --- scan-overlay ---
  auto* cmd_overlay = app.add_subcommand("scan-overlay", "Scan a QCOW2 overlay chain");
  ScanArgs s2;
  cmd_overlay->add_option("overlay", s2.image, "overlay image")->required();
  cmd_overlay->add_option("--baseline", s2.baseline_dir, "baseline directory")->required();
  auto* s2_all = cmd_overlay->add_flag("--all", s2.all, "scan every file");
  cmd_overlay->add_option("--paths", s2.paths_file, "protected paths file")->excludes(s2_all);
  cmd_overlay->add_flag("--json", s2.as_json, "machine-readable output");
  cmd_overlay->add_option("--results-out", s2.results_out, "write JSON results here");
  cmd_overlay->add_option("--fs-offset", s2.fs_offset, "filesystem offset override");

  // --- export ---
  auto* cmd_export = app.add_subcommand("export", "Copy flagged files out for an AV scan");
  std::string e_image, e_results, e_out;
  std::optional<uint64_t> e_fs_offset;
  cmd_export->add_option("image", e_image, "image to extract from")->required();
  cmd_export->add_option("--results", e_results, "scan results JSON")->required();
  cmd_export->add_option("--out", e_out, "export directory")->required();
  cmd_export->add_option("--fs-offset", e_fs_offset, "filesystem offset override");

  // --- destroy ---
  auto* cmd_destroy = app.add_subcommand("destroy", "Zero a file's content blocks");
  std::string d_image, d_path;
  bool d_confirm = false;
  std::optional<uint64_t> d_fs_offset;
  cmd_destroy->add_option("image", d_image, "RAW image")->required();
  cmd_destroy->add_option("--path", d_path, "guest path to destroy")->required();
  cmd_destroy->add_flag("--i-know-what-im-doing", d_confirm, "required confirmation");
  cmd_destroy->add_option("--fs-offset", d_fs_offset, "filesystem offset override");

  // --- restore-bundle ---
  auto* cmd_restore = app.add_subcommand("restore-bundle", "Assemble pristine copies");
  std::string r_db, r_base, r_paths, r_out;
  std::optional<uint64_t> r_fs_offset;
  cmd_restore->add_option("--baseline", r_db, "baseline directory")->required();
  cmd_restore->add_option("--base", r_base, "base image with original content");
  cmd_restore->add_option("--paths", r_paths, "paths to restore")->required();
  cmd_restore->add_option("--out", r_out, "bundle directory")->required();
  cmd_restore->add_option("--fs-offset", r_fs_offset, "filesystem offset override");

  // --- replay ---
  auto* cmd_replay = app.add_subcommand("replay", "Apply a workload and emit its trace");
  std::string p_image, p_workload, p_trace_out;
  uint64_t p_seed = 0;
  std::optional<uint64_t> p_fs_offset;
  cmd_replay->add_option("image", p_image, "RAW image to write")->required();
  cmd_replay->add_option("--workload", p_workload, "workload spec (JSON)")->required();
  cmd_replay->add_option("--trace-out", p_trace_out, "trace output file")->required();
  cmd_replay->add_option("--seed", p_seed, "workload RNG seed");
  cmd_replay->add_option("--fs-offset", p_fs_offset, "filesystem offset override");

  std::vector<const char*> argv;
  argv.push_back("vmscan");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitClean;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << app.help();
    return kExitUsage;
  }

  try {
    Config cfg;
    if (!config_file.empty()) cfg = load_config(config_file);

    if (cmd_baseline->parsed()) {
      if (!b_all && b_paths.empty())
        throw ConfigError("baseline: need --all or --paths");
      auto image = open_image(b_image);
      uint64_t part = resolve_fs_offset(*image, cfg, b_fs_offset);
      auto fs_handle = mount_filesystem(*image, part);
      std::optional<std::vector<std::string>> paths;
      if (!b_all) paths = read_paths_file(b_paths);
      uint64_t n = BaselineDb::snapshot(*fs_handle, paths, b_db, b_backups);
      out << "baseline: " << n << " entries written to " << b_db << "\n";
      return kExitClean;
    }

    if (cmd_ingest->parsed()) {
      if (i_traces.empty() && i_spill_dir.empty())
        throw ConfigError("ingest: need --trace and/or --spill-dir");
      auto image = open_image(i_image);
      uint64_t header = resolve_fs_offset(*image, cfg, i_fs_offset);
      uint32_t bs = i_block_size ? *i_block_size : cfg.block_size;
      DirtyBlockMap map(derive_geometry(*image, header, bs));

      uint64_t total_records = 0;
      if (!i_traces.empty()) {
        // Run the transport pair for real: producer replays the trace files,
        // consumer drains into the map.
        TraceTransport transport(cfg.spill_dir);
        std::atomic<bool> done{false};
        std::exception_ptr producer_error;
        std::thread producer([&] {
          try {
            for (const auto& file : i_traces)
              for (const auto& rec : read_trace_file(file))
                transport.append(rec.offset, rec.length);
            transport.close_producer();
          } catch (...) {
            producer_error = std::current_exception();
          }
          done.store(true);
        });
        std::vector<DrainError> drain_errors;
        auto consume = [&] {
          DrainOutcome got = transport.drain();
          for (const auto& batch : got.batches)
            for (const auto& rec : batch.records) {
              map.mark_write(rec);
              ++total_records;
            }
          for (auto& e : got.errors) drain_errors.push_back(std::move(e));
          return !got.batches.empty();
        };
        while (!done.load()) {
          if (!consume()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
        while (consume()) {
        }
        producer.join();
        if (producer_error) std::rethrow_exception(producer_error);
        if (!drain_errors.empty())
          throw TransportError("ingest: corrupt spill file " +
                               drain_errors.front().source + ": " +
                               drain_errors.front().reason);
      }
      if (!i_spill_dir.empty()) {
        DrainOutcome got = TraceTransport::drain_spill_dir(i_spill_dir);
        for (const auto& batch : got.batches)
          for (const auto& rec : batch.records) {
            map.mark_write(rec);
            ++total_records;
          }
        if (!got.errors.empty())
          throw TransportError("ingest: corrupt spill file " +
                               got.errors.front().source + ": " +
                               got.errors.front().reason);
      }
      map.save(i_out);
      out << "ingest: " << total_records << " records, " << map.dirty_count()
          << " dirty blocks, " << map.pre_fs_writes() << " pre-fs writes, "
          << map.overflow_records() << " overflowing records -> " << i_out << "\n";
      return kExitClean;
    }

    if (cmd_single->parsed()) {
      if (!s1.all && s1.paths_file.empty())
        throw ConfigError("scan-single: need --all or --paths");
      auto image = open_image(s1.image);
      DirtyBlockMap map = DirtyBlockMap::load(s1.map_file);
      uint64_t part = s1.fs_offset ? *s1.fs_offset : map.geometry().header_offset;
      auto fs_handle = mount_filesystem(*image, part);
      BaselineDb baseline = BaselineDb::load(s1.baseline_dir);
      ScanRequest req;
      req.mode = ScanRequest::Mode::SingleImage;
      req.dirty_map = &map;
      req.paths = scan_path_set(s1);
      req.force_full = s1.force_full;
      ScanOutcome outcome = scan(*fs_handle, req, baseline);
      return finish_scan(outcome, cfg, s1.as_json, s1.results_out, out);
    }

    if (cmd_overlay->parsed()) {
      if (!s2.all && s2.paths_file.empty())
        throw ConfigError("scan-overlay: need --all or --paths");
      auto overlay = open_qcow2(s2.image);
      if (!overlay->backing())
        throw WrongMode("scan-overlay: image has no backing file");
      uint64_t part = resolve_fs_offset(*overlay, cfg, s2.fs_offset);
      auto fs_handle = mount_filesystem(*overlay, part);
      BaselineDb baseline = BaselineDb::load(s2.baseline_dir);
      ScanRequest req;
      req.mode = ScanRequest::Mode::MultiImage;
      req.overlay = overlay.get();
      req.paths = scan_path_set(s2);
      ScanOutcome outcome = scan(*fs_handle, req, baseline);
      return finish_scan(outcome, cfg, s2.as_json, s2.results_out, out);
    }

    if (cmd_export->parsed()) {
      std::ifstream in(e_results);
      if (!in) throw IoError("export: cannot open results " + e_results);
      nlohmann::json doc = nlohmann::json::parse(in);
      std::vector<ScanResult> results;
      for (const auto& row : doc.at("results")) {
        ScanResult r;
        r.path = row.at("path").get<std::string>();
        std::string v = row.at("verdict").get<std::string>();
        if (v == "Modified") r.verdict = Verdict::Modified;
        else if (v == "New") r.verdict = Verdict::New;
        else if (v == "Deleted") r.verdict = Verdict::Deleted;
        else if (v == "ScanError") r.verdict = Verdict::ScanError;
        else r.verdict = Verdict::Secure;
        results.push_back(std::move(r));
      }
      auto image = open_image(e_image);
      uint64_t part = resolve_fs_offset(*image, cfg, e_fs_offset);
      auto fs_handle = mount_filesystem(*image, part);
      std::string manifest = export_dirty(results, *fs_handle, e_out);
      out << "export: manifest at " << manifest << "\n";
      return kExitClean;
    }

    if (cmd_destroy->parsed()) {
      if (!d_confirm) {
        err << "error: destroy requires --i-know-what-im-doing\n";
        return kExitUsage;
      }
      auto image = open_image(d_image);
      uint64_t part = resolve_fs_offset(*image, cfg, d_fs_offset);
      auto fs_handle = mount_filesystem(*image, part);
      uint64_t blocks = destroy_file_content(*fs_handle, d_path);
      out << "destroy: zeroed " << blocks << " blocks of " << d_path << "\n";
      return kExitClean;
    }

    if (cmd_restore->parsed()) {
      BaselineDb baseline = BaselineDb::load(r_db);
      std::unique_ptr<ImageHandle> base_image;
      std::unique_ptr<GuestFs> base_fs;
      if (!r_base.empty()) {
        base_image = open_image(r_base);
        uint64_t part = resolve_fs_offset(*base_image, cfg, r_fs_offset);
        base_fs = mount_filesystem(*base_image, part);
      }
      std::vector<std::string> paths = read_paths_file(r_paths);
      RestoreBundle bundle =
          build_restore_bundle(baseline, base_fs.get(), paths, r_out);
      out << "restore-bundle: " << bundle.restored << " restored, "
          << bundle.unrestorable << " unrestorable -> " << bundle.manifest_path
          << "\n";
      return kExitClean;
    }

    if (cmd_replay->parsed()) {
      std::vector<WorkloadOp> ops = parse_workload(p_workload);
      ReplayResult res =
          replay_workload(p_image, ops, p_seed, p_trace_out, p_fs_offset);
      out << "replay: " << res.ops_applied << " ops, " << res.records_emitted
          << " records -> " << p_trace_out << "\n";
      return kExitClean;
    }

    err << "error: no subcommand\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntimeError;
  }
}

}  // namespace vmscan
