#include "vmscan/baseline_db.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vmscan/errors.hpp"
#include "vmscan/sha256.hpp"

namespace fs = std::filesystem;

namespace vmscan {

namespace {

constexpr const char* kDbFile = "baseline.tsv";
constexpr const char* kHeaderTag = "#vmscan-baseline";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (true) {
    size_t tab = line.find('\t', pos);
    if (tab == std::string::npos) {
      out.push_back(line.substr(pos));
      return out;
    }
    out.push_back(line.substr(pos, tab - pos));
    pos = tab + 1;
  }
}

void write_file_bytes(const fs::path& path, const std::vector<uint8_t>& bytes) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("baseline: cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("baseline: short write to " + path.string());
}

}  // namespace

std::string guest_path_to_relpath(const std::string& normalized_path) {
  std::string rel;
  size_t pos = 0;
  while (pos < normalized_path.size()) {
    while (pos < normalized_path.size() && normalized_path[pos] == '/') ++pos;
    size_t next = normalized_path.find('/', pos);
    if (next == std::string::npos) next = normalized_path.size();
    std::string comp = normalized_path.substr(pos, next - pos);
    pos = next;
    if (comp.empty()) continue;
    if (comp == "." || comp == "..") comp = "_";
    if (!rel.empty()) rel.push_back('/');
    rel += comp;
  }
  return rel.empty() ? "_root" : rel;
}

uint64_t BaselineDb::snapshot(GuestFs& fs_handle,
                              const std::optional<std::vector<std::string>>& paths,
                              const std::string& db_dir, bool with_backups) {
  fs::create_directories(db_dir);

  std::vector<std::pair<std::string, FileMeta>> targets;
  std::vector<std::string> missing;
  if (paths.has_value()) {
    for (const auto& p : *paths) {
      std::string norm = fs_handle.normalize_path(p);
      auto meta = fs_handle.resolve(norm);
      if (!meta || meta->kind != FileKind::Regular)
        missing.push_back(norm);
      else
        targets.emplace_back(norm, *meta);
    }
  } else {
    for (auto& [path, meta] : fs_handle.list_files())
      if (meta.kind == FileKind::Regular)
        targets.emplace_back(fs_handle.normalize_path(path), meta);
  }
  std::sort(targets.begin(), targets.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  targets.erase(std::unique(targets.begin(), targets.end(),
                            [](const auto& a, const auto& b) {
                              return a.first == b.first;
                            }),
                targets.end());
  std::sort(missing.begin(), missing.end());
  missing.erase(std::unique(missing.begin(), missing.end()), missing.end());

  std::ostringstream body;
  body << kHeaderTag << "\tv1\tflavor=" << fs_handle.flavor()
       << "\tfold=" << (fs_handle.case_insensitive() ? 1 : 0) << "\n";
  for (const auto& m : missing) body << "#missing\t" << m << "\n";

  uint64_t count = 0;
  for (auto& [path, meta] : targets) {
    std::vector<uint8_t> content = fs_handle.read_file(meta);
    std::string hash = sha256_hex(content);
    std::string backup_rel;
    if (with_backups) {
      backup_rel = "backups/" + guest_path_to_relpath(path);
      write_file_bytes(fs::path(db_dir) / backup_rel, content);
    }
    body << path << "\t" << hash << "\t" << content.size() << "\t"
         << (backup_rel.empty() ? "-" : backup_rel) << "\n";
    ++count;
  }

  std::string text = body.str();
  std::ofstream out(fs::path(db_dir) / kDbFile, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("baseline: cannot create db in " + db_dir);
  out << text << "#sha256\t" << sha256_hex(text) << "\n";
  if (!out) throw IoError("baseline: short write in " + db_dir);
  return count;
}

BaselineDb BaselineDb::load(const std::string& db_dir) {
  fs::path file = fs::path(db_dir) / kDbFile;
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("baseline: cannot open " + file.string());

  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.empty()) throw Error("baseline: empty db file " + file.string());

  std::string trailer = lines.back();
  lines.pop_back();
  auto trailer_fields = split_tabs(trailer);
  if (trailer_fields.size() != 2 || trailer_fields[0] != "#sha256")
    throw Error("baseline: missing body hash trailer in " + file.string());
  std::string body;
  for (const auto& l : lines) body += l + "\n";
  if (sha256_hex(body) != trailer_fields[1])
    throw Error("baseline: body hash mismatch (db tampered?) in " + file.string());

  auto header = split_tabs(lines[0]);
  if (header.size() < 4 || header[0] != kHeaderTag || header[1] != "v1")
    throw Error("baseline: bad header in " + file.string());

  BaselineDb db;
  db.dir_ = db_dir;
  db.flavor_ = header[2].rfind("flavor=", 0) == 0 ? header[2].substr(7) : header[2];
  db.fold_case_ = header[3] == "fold=1";

  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto fields = split_tabs(lines[i]);
    if (fields[0] == "#missing") {
      if (fields.size() >= 2) db.missing_.push_back(fields[1]);
      continue;
    }
    if (fields.size() != 4)
      throw Error("baseline: malformed row " + std::to_string(i + 1) + " in " +
                  file.string());
    BaselineEntry entry;
    entry.guest_path = fields[0];
    entry.sha256 = fields[1];
    entry.size = std::stoull(fields[2]);
    entry.backup_relpath = fields[3] == "-" ? "" : fields[3];
    db.entries_[entry.guest_path] = std::move(entry);
  }
  return db;
}

std::optional<BaselineEntry> BaselineDb::lookup(const std::string& guest_path) const {
  auto it = entries_.find(normalize_guest_path(guest_path, fold_case_));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string BaselineDb::backup_path(const BaselineEntry& entry) const {
  if (entry.backup_relpath.empty()) return {};
  return (fs::path(dir_) / entry.backup_relpath).string();
}

std::vector<std::string> BaselineDb::verify_backups() const {
  std::vector<std::string> bad;
  for (const auto& [path, entry] : entries_) {
    if (entry.backup_relpath.empty()) continue;
    std::string file = backup_path(entry);
    try {
      if (sha256_file_hex(file) != entry.sha256) bad.push_back(path);
    } catch (const std::exception&) {
      bad.push_back(path);
    }
  }
  return bad;
}

}  // namespace vmscan
