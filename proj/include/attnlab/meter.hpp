#pragma once

#include <atomic>
#include <cstdint>

namespace attnlab {

// Process-wide accounting of live tensor-buffer bytes. Every Buffer<T>
// registers its payload size on construction and deregisters on destruction,
// so live/peak reflect exactly the bytes held by tensor storage at any
// moment. Benchmark runs execute sequentially and call reset() between runs.
class MemoryMeter {
 public:
  static std::int64_t live_bytes() { return live_().load(std::memory_order_relaxed); }
  static std::int64_t peak_bytes() { return peak_().load(std::memory_order_relaxed); }

  static void reset() {
    live_().store(0, std::memory_order_relaxed);
    peak_().store(0, std::memory_order_relaxed);
  }

  static void add(std::int64_t bytes) {
    const std::int64_t now = live_().fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::int64_t prev = peak_().load(std::memory_order_relaxed);
    while (now > prev && !peak_().compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
  }

  static void sub(std::int64_t bytes) { live_().fetch_sub(bytes, std::memory_order_relaxed); }

 private:
  static std::atomic<std::int64_t>& live_() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static std::atomic<std::int64_t>& peak_() {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
};

}  // namespace attnlab
