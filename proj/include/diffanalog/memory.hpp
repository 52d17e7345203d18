#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <vector>

namespace diffanalog {

/// Per-thread byte counters for buffers allocated through TrackingAllocator.
/// Used to check the memory contracts of the gradient routines.
struct MemoryCounter {
  static std::size_t& current() {
    thread_local std::size_t bytes = 0;
    return bytes;
  }
  static std::size_t& peak() {
    thread_local std::size_t bytes = 0;
    return bytes;
  }
  /// Restarts peak tracking from the current level.
  static void reset_peak() { peak() = current(); }
};

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>().allocate(n);
    MemoryCounter::current() += n * sizeof(T);
    MemoryCounter::peak() = std::max(MemoryCounter::peak(), MemoryCounter::current());
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    MemoryCounter::current() -= n * sizeof(T);
    std::allocator<T>().deallocate(p, n);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

template <class T>
using TrackedVector = std::vector<T, TrackingAllocator<T>>;

}  // namespace diffanalog
