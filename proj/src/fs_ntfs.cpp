#include "vmscan/fs_ntfs.hpp"

#include <algorithm>
#include <cstring>
#include <set>

#include "vmscan/bytes.hpp"
#include "vmscan/errors.hpp"

namespace vmscan {

namespace {

constexpr uint64_t kRootRecord = 5;
constexpr uint64_t kFirstUserRecord = 16;

constexpr uint32_t kAttrStandardInformation = 0x10;
constexpr uint32_t kAttrAttributeList = 0x20;
constexpr uint32_t kAttrFileName = 0x30;
constexpr uint32_t kAttrData = 0x80;
constexpr uint32_t kAttrEnd = 0xFFFFFFFF;

constexpr uint16_t kAttrFlagCompressed = 0x0001;
constexpr uint16_t kAttrFlagEncrypted = 0x4000;

constexpr uint8_t kNamespaceDos = 2;

std::string utf16le_to_utf8(const uint8_t* data, size_t code_units) {
  std::string out;
  out.reserve(code_units);
  size_t i = 0;
  while (i < code_units) {
    uint32_t cp = read_le16(data + i * 2);
    ++i;
    if (cp >= 0xD800 && cp <= 0xDBFF && i < code_units) {
      uint32_t low = read_le16(data + i * 2);
      if (low >= 0xDC00 && low <= 0xDFFF) {
        cp = 0x10000 + ((cp - 0xD800) << 10) + (low - 0xDC00);
        ++i;
      }
    }
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

std::string fold_ascii(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

}  // namespace

uint64_t RunList::total_clusters() const {
  uint64_t n = 0;
  for (const auto& r : runs) n += r.cluster_count;
  return n;
}

RunList decode_run_list(std::span<const uint8_t> raw) {
  RunList out;
  int64_t lcn = 0;
  size_t off = 0;
  while (off < raw.size()) {
    uint8_t header = raw[off];
    if (header == 0) return out;  // terminator
    size_t len_size = header & 0x0F;
    size_t off_size = header >> 4;
    if (len_size == 0 || len_size > 8 || off_size > 8)
      throw MalformedRunList("ntfs: invalid run header nibble");
    if (off + 1 + len_size + off_size > raw.size())
      throw MalformedRunList("ntfs: truncated run pair");
    ++off;

    uint64_t count = 0;
    for (size_t i = 0; i < len_size; ++i)
      count |= static_cast<uint64_t>(raw[off + i]) << (8 * i);
    off += len_size;
    if (count == 0) throw MalformedRunList("ntfs: zero-length run");

    if (off_size == 0) {
      out.runs.push_back(NtfsRun{count, 0, true});
      continue;
    }
    uint64_t delta_raw = 0;
    for (size_t i = 0; i < off_size; ++i)
      delta_raw |= static_cast<uint64_t>(raw[off + i]) << (8 * i);
    off += off_size;
    int64_t delta;
    if (off_size < 8 && (delta_raw & (uint64_t{1} << (8 * off_size - 1))))
      delta = static_cast<int64_t>(delta_raw - (uint64_t{1} << (8 * off_size)));
    else
      delta = static_cast<int64_t>(delta_raw);
    lcn += delta;
    if (lcn < 0) throw MalformedRunList("ntfs: run LCN went negative");
    out.runs.push_back(NtfsRun{count, lcn, false});
  }
  return out;
}

NtfsFs::NtfsFs(ImageHandle& image, uint64_t partition_offset)
    : image_(image), partition_offset_(partition_offset) {}

std::unique_ptr<NtfsFs> NtfsFs::mount(ImageHandle& image, uint64_t partition_offset) {
  if (partition_offset + 512 > image.virtual_size())
    throw BadMagic("ntfs: image too small for a boot sector");
  std::vector<uint8_t> boot = image.read_guest(partition_offset, 512);
  if (std::memcmp(boot.data() + 3, "NTFS    ", 8) != 0)
    throw BadMagic("ntfs: bad OEM id");
  if (read_le16(boot.data() + 510) != 0xAA55)
    throw BadMagic("ntfs: bad boot signature");

  auto fs = std::unique_ptr<NtfsFs>(new NtfsFs(image, partition_offset));
  Params& p = fs->params_;
  p.bytes_per_sector = read_le16(boot.data() + 11);
  p.sectors_per_cluster = boot[13];
  if (p.bytes_per_sector < 256 || (p.bytes_per_sector & (p.bytes_per_sector - 1)))
    throw CorruptFs("ntfs: implausible bytes_per_sector");
  if (p.sectors_per_cluster == 0)
    throw CorruptFs("ntfs: zero sectors_per_cluster");
  if (p.sectors_per_cluster > 0x80)
    p.sectors_per_cluster = 1u << (256 - p.sectors_per_cluster);
  p.cluster_size = p.bytes_per_sector * p.sectors_per_cluster;
  p.total_sectors = read_le64(boot.data() + 0x28);
  p.mft_lcn = read_le64(boot.data() + 0x30);
  int8_t clusters_per_record = static_cast<int8_t>(boot[0x40]);
  p.record_size = clusters_per_record > 0
                      ? static_cast<uint32_t>(clusters_per_record) * p.cluster_size
                      : 1u << (-clusters_per_record);
  if (p.record_size < 512 || p.record_size > 4096 * 16)
    throw CorruptFs("ntfs: implausible MFT record size");

  // Bootstrap: record 0 describes the MFT's own extents.
  fs->mft_runs_ = {NtfsRun{1, static_cast<int64_t>(p.mft_lcn), false}};
  p.record_count = p.cluster_size / p.record_size;
  if (p.record_count == 0) p.record_count = 1;
  Record mft0;
  RecordState st = fs->parse_record(fs->read_record_raw(0), 0, &mft0);
  if (st != RecordState::Ok) throw CorruptFs("ntfs: cannot parse $MFT record 0");
  const Attribute* data = fs->find_data(mft0);
  if (!data || !data->non_resident)
    throw CorruptFs("ntfs: $MFT has no usable DATA attribute");
  RunList runs = decode_run_list(std::span<const uint8_t>(data->mapping_pairs));
  if (runs.runs.empty()) throw CorruptFs("ntfs: $MFT run list empty");
  fs->mft_runs_ = runs.runs;
  p.record_count = data->data_size / p.record_size;
  return fs;
}

uint64_t NtfsFs::record_guest_offset(uint64_t record_no) const {
  uint64_t byte = record_no * params_.record_size;
  uint64_t vcn = byte / params_.cluster_size;
  uint64_t within = byte % params_.cluster_size;
  uint64_t seen = 0;
  for (const auto& run : mft_runs_) {
    if (vcn < seen + run.cluster_count) {
      if (run.sparse) throw CorruptFs("ntfs: MFT record in sparse run");
      uint64_t lcn = static_cast<uint64_t>(run.lcn) + (vcn - seen);
      return partition_offset_ + lcn * params_.cluster_size + within;
    }
    seen += run.cluster_count;
  }
  throw CorruptFs("ntfs: record " + std::to_string(record_no) + " beyond MFT");
}

std::vector<uint8_t> NtfsFs::read_record_raw(uint64_t record_no) const {
  return image_.read_guest(record_guest_offset(record_no), params_.record_size);
}

NtfsFs::RecordState NtfsFs::parse_record(std::vector<uint8_t> raw, uint64_t record_no,
                                         Record* out) const {
  if (raw.size() < 48) return RecordState::Empty;
  if (std::memcmp(raw.data(), "FILE", 4) != 0) return RecordState::Empty;

  // Update-sequence (fixup) verification; nothing is trusted before it passes.
  uint16_t usa_offset = read_le16(raw.data() + 4);
  uint16_t usa_count = read_le16(raw.data() + 6);
  uint32_t sector = params_.bytes_per_sector;
  if (usa_count < 2 || usa_offset + usa_count * 2 > raw.size() ||
      static_cast<size_t>(usa_count - 1) * sector > raw.size())
    return RecordState::BadFixup;
  uint16_t usn = read_le16(raw.data() + usa_offset);
  for (uint32_t s = 0; s + 1 < usa_count; ++s) {
    size_t pos = (s + 1) * sector - 2;
    if (read_le16(raw.data() + pos) != usn) return RecordState::BadFixup;
    uint16_t stored = read_le16(raw.data() + usa_offset + 2 * (s + 1));
    write_le16(raw.data() + pos, stored);
  }

  out->record_no = record_no;
  uint16_t flags = read_le16(raw.data() + 22);
  out->in_use = flags & 0x1;
  out->is_dir = flags & 0x2;
  out->attrs.clear();

  size_t off = read_le16(raw.data() + 20);
  while (off + 8 <= raw.size()) {
    uint32_t type = read_le32(raw.data() + off);
    if (type == kAttrEnd) break;
    uint32_t length = read_le32(raw.data() + off + 4);
    if (length < 24 || length % 8 != 0 || off + length > raw.size())
      throw CorruptFs("ntfs: bad attribute length in record " +
                      std::to_string(record_no));
    Attribute attr;
    attr.type = type;
    attr.record_offset = static_cast<uint16_t>(off);
    attr.non_resident = raw[off + 8] != 0;
    uint8_t name_len = raw[off + 9];
    uint16_t name_off = read_le16(raw.data() + off + 10);
    attr.flags = read_le16(raw.data() + off + 12);
    if (name_len > 0) {
      if (name_off + name_len * 2 > length)
        throw CorruptFs("ntfs: attribute name overflow in record " +
                        std::to_string(record_no));
      attr.name = utf16le_to_utf8(raw.data() + off + name_off, name_len);
    }
    if (!attr.non_resident) {
      uint32_t value_len = read_le32(raw.data() + off + 16);
      uint16_t value_off = read_le16(raw.data() + off + 20);
      if (static_cast<uint64_t>(value_off) + value_len > length)
        throw CorruptFs("ntfs: resident value overflow in record " +
                        std::to_string(record_no));
      attr.value.assign(raw.begin() + off + value_off,
                        raw.begin() + off + value_off + value_len);
      attr.value_offset = static_cast<uint16_t>(off + value_off);
      attr.data_size = value_len;
      attr.init_size = value_len;
    } else {
      uint16_t run_off = read_le16(raw.data() + off + 32);
      attr.data_size = read_le64(raw.data() + off + 48);
      attr.init_size = read_le64(raw.data() + off + 56);
      if (run_off < 64 || run_off > length)
        throw CorruptFs("ntfs: bad run list offset in record " +
                        std::to_string(record_no));
      attr.mapping_pairs.assign(raw.begin() + off + run_off, raw.begin() + off + length);
    }
    out->attrs.push_back(std::move(attr));
    off += length;
  }
  return RecordState::Ok;
}

NtfsFs::Record NtfsFs::require_record(uint64_t record_no) const {
  if (record_no >= params_.record_count)
    throw CorruptFs("ntfs: record " + std::to_string(record_no) + " out of range");
  Record rec;
  switch (parse_record(read_record_raw(record_no), record_no, &rec)) {
    case RecordState::Ok:
      return rec;
    case RecordState::Empty:
      throw CorruptFs("ntfs: record " + std::to_string(record_no) + " is empty");
    case RecordState::BadFixup:
    default:
      throw CorruptFs("ntfs: record " + std::to_string(record_no) +
                      " failed update-sequence verification");
  }
}

const NtfsFs::Attribute* NtfsFs::find_data(const Record& rec) const {
  for (const auto& attr : rec.attrs) {
    if (attr.type == kAttrAttributeList)
      throw Unsupported("ntfs: attribute list in record " +
                        std::to_string(rec.record_no));
  }
  const Attribute* found = nullptr;
  for (const auto& attr : rec.attrs) {
    if (attr.type != kAttrData) continue;
    if (!attr.name.empty()) {
      ++ads_skipped_;  // alternate data stream
      continue;
    }
    if (attr.flags & kAttrFlagCompressed)
      throw Unsupported("ntfs: compressed data in record " +
                        std::to_string(rec.record_no));
    if (attr.flags & kAttrFlagEncrypted)
      throw Unsupported("ntfs: encrypted data in record " +
                        std::to_string(rec.record_no));
    found = &attr;
  }
  return found;
}

void NtfsFs::build_tree() {
  if (tree_built_) return;
  for (uint64_t n = 0; n < params_.record_count; ++n) {
    Record rec;
    if (parse_record(read_record_raw(n), n, &rec) != RecordState::Ok) continue;
    if (!rec.in_use) continue;
    const Attribute* best = nullptr;
    uint8_t best_ns = 0xFF;
    for (const auto& attr : rec.attrs) {
      if (attr.type != kAttrFileName || attr.non_resident) continue;
      if (attr.value.size() < 66) continue;
      uint8_t ns = attr.value[65];
      // Prefer a non-DOS name.
      bool better = !best || (best_ns == kNamespaceDos && ns != kNamespaceDos);
      if (better) {
        best = &attr;
        best_ns = ns;
      }
    }
    if (!best) continue;
    uint8_t name_len = best->value[64];
    if (66 + static_cast<size_t>(name_len) * 2 > best->value.size()) continue;
    Node node;
    node.parent = read_le64(best->value.data()) & 0xFFFFFFFFFFFFULL;
    node.name = utf16le_to_utf8(best->value.data() + 66, name_len);
    node.is_dir = rec.is_dir;
    nodes_[n] = node;
    if (n != kRootRecord) children_.emplace(node.parent, n);
  }
  tree_built_ = true;
}

FileMeta NtfsFs::record_meta(uint64_t record_no) {
  Record rec = require_record(record_no);
  FileMeta meta;
  meta.file_id = record_no;
  meta.kind = rec.is_dir ? FileKind::Directory : FileKind::Regular;
  meta.meta_offset = record_guest_offset(record_no);
  meta.meta_length = params_.record_size;
  for (const auto& attr : rec.attrs) {
    if (attr.type == kAttrStandardInformation && !attr.non_resident &&
        attr.value.size() >= 16)
      meta.mtime = read_le64(attr.value.data() + 8);
  }
  if (!rec.is_dir) {
    const Attribute* data = find_data(rec);
    if (data) meta.size = data->data_size;
  }
  return meta;
}

uint64_t NtfsFs::standard_info_mtime_offset(uint64_t record_no) const {
  Record rec = require_record(record_no);
  for (const auto& attr : rec.attrs) {
    if (attr.type == kAttrStandardInformation && !attr.non_resident &&
        attr.value.size() >= 16)
      return record_guest_offset(record_no) + attr.value_offset + 8;
  }
  throw CorruptFs("ntfs: record " + std::to_string(record_no) +
                  " has no STANDARD_INFORMATION");
}

std::optional<FileMeta> NtfsFs::resolve(const std::string& path) {
  build_tree();
  std::string norm = normalize_path(path);
  uint64_t current = kRootRecord;
  size_t pos = 1;
  while (pos < norm.size()) {
    size_t next = norm.find('/', pos);
    if (next == std::string::npos) next = norm.size();
    std::string component = norm.substr(pos, next - pos);
    pos = next + 1;
    if (component.empty()) continue;
    bool found = false;
    auto [lo, hi] = children_.equal_range(current);
    for (auto it = lo; it != hi; ++it) {
      const Node& node = nodes_[it->second];
      if (fold_ascii(node.name) == component) {
        current = it->second;
        found = true;
        break;
      }
    }
    if (!found) return std::nullopt;
  }
  return record_meta(current);
}

std::vector<Extent> NtfsFs::data_extents(const Attribute& data,
                                         uint64_t record_no) const {
  const uint64_t cs = params_.cluster_size;
  RunList runs = decode_run_list(std::span<const uint8_t>(data.mapping_pairs));
  uint64_t wanted = (data.data_size + cs - 1) / cs * cs;
  std::vector<Extent> out;
  uint64_t have = 0;
  for (const auto& run : runs.runs) {
    if (have >= wanted) break;
    uint64_t len = std::min(run.cluster_count * cs, wanted - have);
    if (run.sparse) {
      out.push_back(Extent{0, len, Extent::Kind::Hole});
    } else {
      uint64_t lcn = static_cast<uint64_t>(run.lcn);
      if ((lcn + (len + cs - 1) / cs) * cs >
          params_.total_sectors * params_.bytes_per_sector + cs)
        throw CorruptFs("ntfs: run beyond volume in record " +
                        std::to_string(record_no));
      out.push_back(Extent{partition_offset_ + lcn * cs, len, Extent::Kind::Data});
    }
    have += len;
  }
  if (have < wanted)
    out.push_back(Extent{0, wanted - have, Extent::Kind::Hole});
  return out;
}

std::vector<Extent> NtfsFs::content_extents(const FileMeta& meta, bool* resident) {
  Record rec = require_record(meta.file_id);
  const Attribute* data = find_data(rec);
  if (resident) *resident = false;
  if (!data)
    throw CorruptFs("ntfs: no DATA attribute in record " +
                    std::to_string(meta.file_id));
  if (!data->non_resident) {
    if (resident) *resident = true;
    if (data->value.empty()) return {};
    return {Extent{meta.meta_offset + data->value_offset, data->value.size(),
                   Extent::Kind::Data}};
  }
  return data_extents(*data, meta.file_id);
}

std::vector<uint8_t> NtfsFs::read_file(const FileMeta& meta) {
  Record rec = require_record(meta.file_id);
  const Attribute* data = find_data(rec);
  if (!data)
    throw CorruptFs("ntfs: no DATA attribute in record " +
                    std::to_string(meta.file_id));
  if (!data->non_resident) return data->value;

  std::vector<Extent> extents = data_extents(*data, meta.file_id);
  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(data->data_size));
  for (const auto& ext : extents) {
    if (out.size() >= data->data_size) break;
    uint64_t take = std::min<uint64_t>(ext.length, data->data_size - out.size());
    if (ext.kind == Extent::Kind::Data) {
      std::vector<uint8_t> piece = image_.read_guest(ext.guest_offset, take);
      out.insert(out.end(), piece.begin(), piece.end());
    } else {
      out.insert(out.end(), static_cast<size_t>(take), 0);
    }
  }
  out.resize(static_cast<size_t>(data->data_size), 0);
  // Bytes past initialized_size read as zeros regardless of what the
  // clusters hold.
  if (data->init_size < data->data_size)
    std::fill(out.begin() + static_cast<size_t>(data->init_size), out.end(), 0);
  return out;
}

std::vector<std::pair<std::string, FileMeta>> NtfsFs::list_files() {
  build_tree();
  std::vector<std::pair<std::string, FileMeta>> out;
  std::vector<std::pair<std::string, uint64_t>> stack{{"", kRootRecord}};
  std::set<uint64_t> visited;
  while (!stack.empty()) {
    auto [prefix, rec_no] = stack.back();
    stack.pop_back();
    if (!visited.insert(rec_no).second)
      throw CorruptFs("ntfs: directory loop at record " + std::to_string(rec_no));
    auto [lo, hi] = children_.equal_range(rec_no);
    for (auto it = lo; it != hi; ++it) {
      uint64_t child = it->second;
      if (rec_no == kRootRecord && child < kFirstUserRecord) continue;  // metafiles
      const Node& node = nodes_[child];
      std::string path = prefix + "/" + node.name;
      if (node.is_dir) {
        stack.emplace_back(path, child);
      } else {
        try {
          out.emplace_back(path, record_meta(child));
        } catch (const Unsupported&) {
          FileMeta meta;
          meta.file_id = child;
          meta.kind = FileKind::Regular;
          meta.meta_offset = record_guest_offset(child);
          meta.meta_length = params_.record_size;
          out.emplace_back(path, meta);
        }
      }
    }
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

std::vector<uint8_t> NtfsFs::zeroed_resident_record(uint64_t record_no) {
  std::vector<uint8_t> raw = read_record_raw(record_no);
  Record rec;
  if (parse_record(raw, record_no, &rec) != RecordState::Ok)
    throw CorruptFs("ntfs: record " + std::to_string(record_no) +
                    " failed update-sequence verification");
  const Attribute* data = find_data(rec);
  if (!data || data->non_resident)
    throw CorruptFs("ntfs: record " + std::to_string(record_no) +
                    " has no resident DATA value");

  uint16_t usa_offset = read_le16(raw.data() + 4);
  uint16_t usa_count = read_le16(raw.data() + 6);
  uint32_t sector = params_.bytes_per_sector;
  size_t begin = data->value_offset;
  size_t end = begin + data->value.size();
  for (size_t pos = begin; pos < end; ++pos) {
    // The last two bytes of each sector hold the update-sequence tag; their
    // true content lives in the USA slot, so zero that instead.
    size_t in_sector = pos % sector;
    if (in_sector >= sector - 2) {
      size_t sector_no = pos / sector;
      size_t slot = usa_offset + 2 * (sector_no + 1) + (in_sector - (sector - 2));
      if (sector_no + 2 <= usa_count) raw[slot] = 0;
    } else {
      raw[pos] = 0;
    }
  }
  return raw;
}

std::unique_ptr<GuestFs> mount_ntfs(ImageHandle& image, uint64_t partition_offset) {
  return NtfsFs::mount(image, partition_offset);
}

}  // namespace vmscan
