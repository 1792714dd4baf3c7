#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vmscan {

// One intercepted disk write. On the wire this is exactly 16 bytes:
// offset then length, both 64-bit little-endian.
struct WriteRecord {
  uint64_t offset = 0;
  uint64_t length = 0;

  bool operator==(const WriteRecord&) const = default;
};

constexpr size_t kWriteRecordWireSize = 16;

void encode_record(const WriteRecord& rec, uint8_t out[kWriteRecordWireSize]);
WriteRecord decode_record(const uint8_t in[kWriteRecordWireSize]);

// Header-less stream of 16-byte records. Used both for offline replay traces
// and for transport spill files.
std::vector<WriteRecord> read_trace_file(const std::string& path);
void write_trace_file(const std::string& path, const std::vector<WriteRecord>& records);

// Appends records to an already-open stream-style sink.
class TraceWriter {
 public:
  explicit TraceWriter(const std::string& path);
  ~TraceWriter();
  TraceWriter(const TraceWriter&) = delete;
  TraceWriter& operator=(const TraceWriter&) = delete;

  void append(const WriteRecord& rec);
  void close();

 private:
  void* file_;
  std::string path_;
};

}  // namespace vmscan
