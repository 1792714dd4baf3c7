#include "vmscan/trace_transport.hpp"

#include <algorithm>
#include <filesystem>

#include "vmscan/errors.hpp"

namespace fs = std::filesystem;

namespace vmscan {

uint64_t DrainOutcome::record_count() const {
  uint64_t n = 0;
  for (const auto& b : batches) n += b.records.size();
  return n;
}

bool SharedRing::try_publish(RecordBatch&& batch) {
  for (auto& slot : slots_) {
    if (!slot.full.load(std::memory_order_acquire)) {
      slot.batch = std::move(batch);
      slot.full.store(true, std::memory_order_release);
      return true;
    }
  }
  return false;
}

std::vector<RecordBatch> SharedRing::take_full() {
  std::vector<RecordBatch> out;
  for (auto& slot : slots_) {
    if (slot.full.load(std::memory_order_acquire)) {
      out.push_back(std::move(slot.batch));
      slot.batch = RecordBatch{};
      slot.full.store(false, std::memory_order_release);
    }
  }
  return out;
}

size_t SharedRing::full_slots() const {
  size_t n = 0;
  for (const auto& slot : slots_)
    if (slot.full.load(std::memory_order_acquire)) ++n;
  return n;
}

TraceTransport::TraceTransport(std::string spill_dir, uint64_t producer_id)
    : spill_dir_(std::move(spill_dir)), producer_id_(producer_id) {
  fs::create_directories(spill_dir_);
  native_.producer_id = producer_id_;
  native_.records.reserve(kBatchCapacity);
  spill_thread_ = std::thread(&TraceTransport::spill_worker, this);
}

TraceTransport::~TraceTransport() {
  {
    std::lock_guard<std::mutex> lk(spill_mu_);
    spill_stop_ = true;
  }
  spill_cv_.notify_all();
  if (spill_thread_.joinable()) spill_thread_.join();
}

void TraceTransport::append(uint64_t offset, uint64_t length) {
  if (length == 0) throw MalformedRecord("transport: zero-length write record");
  native_.records.push_back(WriteRecord{offset, length});
  stats_.appended.fetch_add(1, std::memory_order_relaxed);
  if (native_.records.size() >= kBatchCapacity) flush();
}

FlushOutcome TraceTransport::flush() {
  rethrow_spill_error();
  if (native_.records.empty()) return FlushOutcome::NoRecords;

  RecordBatch out = std::move(native_);
  out.seq = next_seq_++;
  native_ = RecordBatch{};
  native_.producer_id = producer_id_;
  native_.records.reserve(kBatchCapacity);

  if (ring_.try_publish(std::move(out))) {
    stats_.flushes_to_ring.fetch_add(1, std::memory_order_relaxed);
    return FlushOutcome::ToRing;
  }
  // Ring full: hand the batch to the spill task instead of waiting for the
  // consumer.
  enqueue_spill(std::move(out));
  stats_.flushes_to_spill.fetch_add(1, std::memory_order_relaxed);
  return FlushOutcome::ToSpill;
}

void TraceTransport::close_producer() {
  flush();
  std::unique_lock<std::mutex> lk(spill_mu_);
  spill_cv_.wait(lk, [&] { return spill_queue_.empty() || spill_error_; });
  if (spill_error_) std::rethrow_exception(spill_error_);
}

void TraceTransport::enqueue_spill(RecordBatch&& batch) {
  {
    std::lock_guard<std::mutex> lk(spill_mu_);
    spill_queue_.push_back(std::move(batch));
  }
  spill_cv_.notify_all();
}

void TraceTransport::rethrow_spill_error() {
  std::lock_guard<std::mutex> lk(spill_mu_);
  if (spill_error_) std::rethrow_exception(spill_error_);
}

void TraceTransport::spill_worker() {
  for (;;) {
    RecordBatch batch;
    {
      std::unique_lock<std::mutex> lk(spill_mu_);
      spill_cv_.wait(lk, [&] { return spill_stop_ || !spill_queue_.empty(); });
      if (spill_queue_.empty()) {
        if (spill_stop_) return;
        continue;
      }
      batch = std::move(spill_queue_.front());
      spill_queue_.pop_front();
    }
    try {
      std::string name = "spill-" + std::to_string(batch.producer_id) + "-" +
                         std::to_string(batch.seq) + ".bin";
      fs::path final_path = fs::path(spill_dir_) / name;
      fs::path tmp_path = final_path;
      tmp_path += ".tmp";
      write_trace_file(tmp_path.string(), batch.records);
      fs::rename(tmp_path, final_path);
    } catch (...) {
      std::lock_guard<std::mutex> lk(spill_mu_);
      spill_error_ = std::current_exception();
      spill_cv_.notify_all();
      return;
    }
    spill_cv_.notify_all();
  }
}

static DrainOutcome drain_spill_files(const std::string& dir, TransportStats* stats) {
  DrainOutcome out;
  if (!fs::is_directory(dir)) return out;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("spill-", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".bin")
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    try {
      RecordBatch batch;
      batch.records = read_trace_file(path.string());
      out.batches.push_back(std::move(batch));
      fs::remove(path);
      if (stats) stats->drained_spill_files++;
    } catch (const std::exception& e) {
      out.errors.push_back(DrainError{path.string(), e.what()});
    }
  }
  return out;
}

DrainOutcome TraceTransport::drain() {
  DrainOutcome out;
  out.batches = ring_.take_full();
  TransportStats scratch;
  DrainOutcome spilled = drain_spill_files(spill_dir_, &scratch);
  stats_.drained_spill_files.fetch_add(scratch.drained_spill_files, std::memory_order_relaxed);
  for (auto& b : spilled.batches) out.batches.push_back(std::move(b));
  for (auto& e : spilled.errors) out.errors.push_back(std::move(e));
  stats_.drained_batches.fetch_add(out.batches.size(), std::memory_order_relaxed);
  stats_.drained_records.fetch_add(out.record_count(), std::memory_order_relaxed);
  return out;
}

DrainOutcome TraceTransport::drain_spill_dir(const std::string& dir) {
  return drain_spill_files(dir, nullptr);
}

TransportStats TraceTransport::stats() const {
  TransportStats s;
  s.appended = stats_.appended.load(std::memory_order_relaxed);
  s.flushes_to_ring = stats_.flushes_to_ring.load(std::memory_order_relaxed);
  s.flushes_to_spill = stats_.flushes_to_spill.load(std::memory_order_relaxed);
  s.drained_records = stats_.drained_records.load(std::memory_order_relaxed);
  s.drained_batches = stats_.drained_batches.load(std::memory_order_relaxed);
  s.drained_spill_files = stats_.drained_spill_files.load(std::memory_order_relaxed);
  return s;
}

}  // namespace vmscan
