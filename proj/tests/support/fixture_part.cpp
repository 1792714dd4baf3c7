#include "fixture_part.hpp"

#include <zlib.h>

#include <cstring>

#include "vmscan/bytes.hpp"

namespace vmscan::testing {

using vmscan::write_le16;
using vmscan::write_le32;
using vmscan::write_le64;

std::vector<uint8_t> wrap_mbr(const std::vector<uint8_t>& fs_bytes,
                              uint64_t part_start_lba, uint8_t type) {
  uint64_t part_sectors = (fs_bytes.size() + 511) / 512;
  std::vector<uint8_t> image(part_start_lba * 512 + part_sectors * 512, 0);
  uint8_t* entry = image.data() + 446;
  entry[0] = 0x00;  // not bootable
  entry[4] = type;
  write_le32(entry + 8, static_cast<uint32_t>(part_start_lba));
  write_le32(entry + 12, static_cast<uint32_t>(part_sectors));
  write_le16(image.data() + 510, 0xAA55);
  std::memcpy(image.data() + part_start_lba * 512, fs_bytes.data(), fs_bytes.size());
  return image;
}

std::vector<uint8_t> wrap_gpt(const std::vector<uint8_t>& fs_bytes,
                              uint64_t part_start_lba) {
  uint64_t part_sectors = (fs_bytes.size() + 511) / 512;
  uint64_t total_sectors = part_start_lba + part_sectors + 34;  // backup area slack
  std::vector<uint8_t> image(total_sectors * 512, 0);

  // Protective MBR.
  uint8_t* pmbr = image.data() + 446;
  pmbr[4] = 0xEE;
  write_le32(pmbr + 8, 1);
  write_le32(pmbr + 12, static_cast<uint32_t>(total_sectors - 1));
  write_le16(image.data() + 510, 0xAA55);

  // Partition entry array at LBA 2.
  constexpr uint32_t kNumEntries = 128;
  constexpr uint32_t kEntrySize = 128;
  uint8_t* entries = image.data() + 2 * 512;
  uint8_t* e0 = entries;
  for (int i = 0; i < 16; ++i) e0[i] = static_cast<uint8_t>(0xA0 + i);  // type GUID
  for (int i = 0; i < 16; ++i) e0[16 + i] = static_cast<uint8_t>(0x50 + i);
  write_le64(e0 + 32, part_start_lba);
  write_le64(e0 + 40, part_start_lba + part_sectors - 1);
  uint32_t entries_crc = crc32(0, entries, kNumEntries * kEntrySize);

  // GPT header at LBA 1.
  uint8_t* gpt = image.data() + 512;
  std::memcpy(gpt, "EFI PART", 8);
  write_le32(gpt + 8, 0x00010000);  // revision
  write_le32(gpt + 12, 92);         // header size
  write_le64(gpt + 24, 1);          // current LBA
  write_le64(gpt + 32, total_sectors - 1);
  write_le64(gpt + 40, 34);  // first usable
  write_le64(gpt + 48, total_sectors - 34);
  for (int i = 0; i < 16; ++i) gpt[56 + i] = static_cast<uint8_t>(0x10 + i);  // disk GUID
  write_le64(gpt + 72, 2);  // entry array LBA
  write_le32(gpt + 80, kNumEntries);
  write_le32(gpt + 84, kEntrySize);
  write_le32(gpt + 88, entries_crc);
  write_le32(gpt + 16, 0);
  uint32_t header_crc = crc32(0, gpt, 92);
  write_le32(gpt + 16, header_crc);

  std::memcpy(image.data() + part_start_lba * 512, fs_bytes.data(), fs_bytes.size());
  return image;
}

}  // namespace vmscan::testing
