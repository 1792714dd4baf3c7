#include "vmscan/write_record.hpp"

#include <cstdio>
#include <filesystem>

#include "vmscan/bytes.hpp"
#include "vmscan/errors.hpp"

namespace vmscan {

void encode_record(const WriteRecord& rec, uint8_t out[kWriteRecordWireSize]) {
  write_le64(out, rec.offset);
  write_le64(out + 8, rec.length);
}

WriteRecord decode_record(const uint8_t in[kWriteRecordWireSize]) {
  return WriteRecord{read_le64(in), read_le64(in + 8)};
}

std::vector<WriteRecord> read_trace_file(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("trace: cannot open " + path);
  std::fseek(f, 0, SEEK_END);
  long size = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  if (size < 0) {
    std::fclose(f);
    throw IoError("trace: cannot stat " + path);
  }
  if (size % kWriteRecordWireSize != 0) {
    std::fclose(f);
    throw MalformedRecord("trace: size of " + path + " is not a multiple of 16");
  }
  std::vector<WriteRecord> out;
  out.reserve(static_cast<size_t>(size) / kWriteRecordWireSize);
  uint8_t buf[kWriteRecordWireSize];
  while (std::fread(buf, 1, kWriteRecordWireSize, f) == kWriteRecordWireSize) {
    WriteRecord rec = decode_record(buf);
    if (rec.length == 0) {
      std::fclose(f);
      throw MalformedRecord("trace: zero-length record in " + path);
    }
    out.push_back(rec);
  }
  std::fclose(f);
  return out;
}

void write_trace_file(const std::string& path, const std::vector<WriteRecord>& records) {
  TraceWriter w(path);
  for (const auto& r : records) w.append(r);
  w.close();
}

TraceWriter::TraceWriter(const std::string& path) : path_(path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("trace: cannot create " + path);
  file_ = f;
}

TraceWriter::~TraceWriter() {
  if (file_) std::fclose(static_cast<FILE*>(file_));
}

void TraceWriter::append(const WriteRecord& rec) {
  if (!file_) throw IoError("trace: writer closed: " + path_);
  if (rec.length == 0) throw MalformedRecord("trace: zero-length record");
  uint8_t buf[kWriteRecordWireSize];
  encode_record(rec, buf);
  if (std::fwrite(buf, 1, sizeof buf, static_cast<FILE*>(file_)) != sizeof buf)
    throw IoError("trace: short write to " + path_);
}

void TraceWriter::close() {
  if (!file_) return;
  FILE* f = static_cast<FILE*>(file_);
  file_ = nullptr;
  if (std::fclose(f) != 0) throw IoError("trace: close failed for " + path_);
}

}  // namespace vmscan
