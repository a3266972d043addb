#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace latseg {

// Input that violates an operation precondition (bad shapes, non-finite data, ...).
struct invalid_input : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid model / run configuration detected at build time.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file content.
struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training aborted (e.g. NaN loss).
struct train_abort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Intra-op thread count. 0 = all hardware threads.
inline int& thread_setting() {
  static int n = 0;
  return n;
}

inline void set_threads(int n) { thread_setting() = n; }

inline int effective_threads() {
  int n = thread_setting();
  if (n <= 0) {
    unsigned hw = std::thread::hardware_concurrency();
    n = hw == 0 ? 1 : static_cast<int>(hw);
  }
  return n;
}

// Splits [0,count) into one contiguous chunk per worker and runs
// fn(begin, end, chunk_index). Chunk boundaries depend only on the
// configured thread count, so results that reduce per-chunk in chunk
// order are reproducible for a fixed --threads value.
template <typename Fn>
void parallel_for(int64_t count, Fn&& fn) {
  int nt = effective_threads();
  if (nt <= 1 || count < 2048) {
    fn(int64_t{0}, count, 0);
    return;
  }
  int chunks = nt;
  int64_t per = (count + chunks - 1) / chunks;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(chunks) - 1);
  for (int c = 1; c < chunks; ++c) {
    int64_t b = c * per, e = std::min(count, (c + 1) * per);
    if (b >= e) break;
    workers.emplace_back([&fn, b, e, c] { fn(b, e, c); });
  }
  fn(int64_t{0}, std::min(per, count), 0);
  for (auto& w : workers) w.join();
}

inline int parallel_chunks(int64_t count) {
  int nt = effective_threads();
  if (nt <= 1 || count < 2048) return 1;
  return nt;
}

// FNV-1a over raw bytes; used for checksums of parameters and files.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a_str(const std::string& s, uint64_t h = 1469598103934665603ull) {
  return fnv1a(s.data(), s.size(), h);
}

}  // namespace latseg
