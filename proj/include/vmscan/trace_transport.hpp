#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "vmscan/write_record.hpp"

namespace vmscan {

// A full batch is 100,000 records (1.6 MB of payload); the ring holds four
// of them (6.4 MB).
constexpr size_t kBatchCapacity = 100'000;
constexpr size_t kRingSlots = 4;

struct RecordBatch {
  uint64_t producer_id = 0;
  uint64_t seq = 0;  // diagnostics only; cross-source ordering is not guaranteed
  std::vector<WriteRecord> records;
};

enum class FlushOutcome { NoRecords, ToRing, ToSpill };

struct TransportStats {
  uint64_t appended = 0;
  uint64_t flushes_to_ring = 0;
  uint64_t flushes_to_spill = 0;
  uint64_t drained_records = 0;
  uint64_t drained_batches = 0;
  uint64_t drained_spill_files = 0;
};

struct DrainError {
  std::string source;  // spill file path
  std::string reason;
};

struct DrainOutcome {
  std::vector<RecordBatch> batches;
  std::vector<DrainError> errors;
  uint64_t record_count() const;
};

// Fixed four-slot queue between exactly one producer and one consumer.
// A slot goes Empty->Full only on the producer side and Full->Empty only on
// the consumer side.
class SharedRing {
 public:
  bool try_publish(RecordBatch&& batch);
  std::vector<RecordBatch> take_full();
  size_t full_slots() const;

 private:
  struct Slot {
    std::atomic<bool> full{false};
    RecordBatch batch;
  };
  std::array<Slot, kRingSlots> slots_;
};

// Carries write records from a producer to a consumer through the ring,
// overflowing into spill files so the producer never waits on the consumer.
class TraceTransport {
 public:
  TraceTransport(std::string spill_dir, uint64_t producer_id = 1);
  ~TraceTransport();
  TraceTransport(const TraceTransport&) = delete;
  TraceTransport& operator=(const TraceTransport&) = delete;

  // --- producer side ---
  void append(uint64_t offset, uint64_t length);
  FlushOutcome flush();
  // Flushes any partial batch and blocks until queued spill writes are on
  // disk. Call before the final drain.
  void close_producer();

  // --- consumer side ---
  DrainOutcome drain();

  TransportStats stats() const;
  const std::string& spill_dir() const { return spill_dir_; }

  // Reads every pending spill file in a directory (consumer recovery path
  // after a crash; also used by `ingest --spill-dir`).
  static DrainOutcome drain_spill_dir(const std::string& dir);

 private:
  void spill_worker();
  void enqueue_spill(RecordBatch&& batch);
  void rethrow_spill_error();

  std::string spill_dir_;
  uint64_t producer_id_;
  uint64_t next_seq_ = 0;
  RecordBatch native_;
  SharedRing ring_;

  std::thread spill_thread_;
  mutable std::mutex spill_mu_;
  std::condition_variable spill_cv_;
  std::deque<RecordBatch> spill_queue_;
  bool spill_stop_ = false;
  std::exception_ptr spill_error_;

  struct AtomicStats {
    std::atomic<uint64_t> appended{0};
    std::atomic<uint64_t> flushes_to_ring{0};
    std::atomic<uint64_t> flushes_to_spill{0};
    std::atomic<uint64_t> drained_records{0};
    std::atomic<uint64_t> drained_batches{0};
    std::atomic<uint64_t> drained_spill_files{0};
  };
  AtomicStats stats_;
};

}  // namespace vmscan
