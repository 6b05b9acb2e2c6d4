#pragma once

#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>

namespace atomflow {

namespace detail {

[[noreturn]] inline void fail(const char* file, int line, const std::string& msg) {
  std::ostringstream oss;
  oss << file << ":" << line << ": " << msg;
  throw std::runtime_error(oss.str());
}

struct MsgStream {
  std::ostringstream oss;
  template <typename T>
  MsgStream& operator<<(const T& v) {
    oss << v;
    return *this;
  }
};

}  // namespace detail

// Invariant checks that survive in release builds; failures throw
// std::runtime_error with file:line context.
#define AF_CHECK(cond, msg)                                           \
  do {                                                                \
    if (!(cond)) {                                                    \
      ::atomflow::detail::MsgStream af_ms_;                           \
      af_ms_ << msg;                                                  \
      ::atomflow::detail::fail(__FILE__, __LINE__, af_ms_.oss.str()); \
    }                                                                 \
  } while (0)

// splitmix64 finalizer; derives independent stream seeds from one root seed
// so that e.g. clip generation and split shuffling never share a stream.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ATOMFLOW_THREADS caps worker threads; 0 means "library default".
inline int env_thread_cap() {
  const char* s = std::getenv("ATOMFLOW_THREADS");
  if (!s) return 0;
  int v = std::atoi(s);
  return v > 0 ? v : 0;
}

}  // namespace atomflow
