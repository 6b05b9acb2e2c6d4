#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "atomflow/common.hpp"
#include "atomflow/tensor.hpp"

namespace atomflow {

// ATF1 tensor file format:
//   magic "ATF1" | u8 dtype (0 = f64) | u8 ndim | ndim x u32 LE dims |
//   row-major LE payload.
// Used for checkpoints, dataset tensors and codebook sidecars. The writer
// emits host byte order and requires a little-endian host.

namespace atf {

static_assert(sizeof(double) == 8, "f64 payload requires 8-byte double");

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  AF_CHECK(t.ndim() >= 1, "cannot serialize rank-0 tensor");
  AF_CHECK(t.ndim() <= 255, "tensor rank exceeds ATF1 limit");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  AF_CHECK(f.good(), "cannot open " << path.string() << " for writing");
  f.write("ATF1", 4);
  uint8_t dtype = 0;
  uint8_t ndim = static_cast<uint8_t>(t.ndim());
  f.write(reinterpret_cast<const char*>(&dtype), 1);
  f.write(reinterpret_cast<const char*>(&ndim), 1);
  for (int i = 0; i < t.ndim(); ++i) {
    uint32_t d = static_cast<uint32_t>(t.dim(i));
    f.write(reinterpret_cast<const char*>(&d), 4);
  }
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  AF_CHECK(f.good(), "write failed for " << path.string());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  AF_CHECK(f.good(), "cannot open " << path.string());
  char magic[4];
  f.read(magic, 4);
  AF_CHECK(f.good() && std::memcmp(magic, "ATF1", 4) == 0,
           path.string() << ": bad ATF1 magic");
  uint8_t dtype = 0, ndim = 0;
  f.read(reinterpret_cast<char*>(&dtype), 1);
  f.read(reinterpret_cast<char*>(&ndim), 1);
  AF_CHECK(f.good() && dtype == 0, path.string() << ": unsupported dtype code "
                                                 << static_cast<int>(dtype));
  AF_CHECK(ndim >= 1, path.string() << ": zero-rank tensor");
  std::vector<int> shape(ndim);
  size_t numel = 1;
  for (int i = 0; i < ndim; ++i) {
    uint32_t d = 0;
    f.read(reinterpret_cast<char*>(&d), 4);
    AF_CHECK(f.good() && d > 0, path.string() << ": bad dim " << d);
    shape[static_cast<size_t>(i)] = static_cast<int>(d);
    numel *= d;
  }
  std::vector<double> data(numel);
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(numel * sizeof(double)));
  AF_CHECK(f.good(), path.string() << ": truncated payload, expected " << numel
                                   << " f64 values");
  char extra;
  f.read(&extra, 1);
  AF_CHECK(f.eof(), path.string() << ": trailing bytes after payload");
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace atf

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  AF_CHECK(f.good(), "cannot open " << path.string() << " for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  AF_CHECK(f.good(), "write failed for " << path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  AF_CHECK(f.good(), "cannot open " << path.string());
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace atomflow
