#pragma once

#include <cstdint>
#include <vector>

namespace vmscan::testing {

// Embeds a bare filesystem image into a partitioned disk image.
std::vector<uint8_t> wrap_mbr(const std::vector<uint8_t>& fs_bytes,
                              uint64_t part_start_lba = 2048, uint8_t type = 0x83);

std::vector<uint8_t> wrap_gpt(const std::vector<uint8_t>& fs_bytes,
                              uint64_t part_start_lba = 2048);

}  // namespace vmscan::testing
