#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "factorizer/tensor.hpp"

namespace factorizer {

// FTensor v1: magic "FTSR", u8 version = 1, u8 dtype (0 = f32, 1 = f64),
// u8 rank, little-endian u64 extents, then raw little-endian row-major data.
// Round-trips are bit-exact.

static_assert(std::endian::native == std::endian::little,
              "FTensor I/O assumes a little-endian host");

inline constexpr char kFtensorMagic[4] = {'F', 'T', 'S', 'R'};
inline constexpr uint8_t kFtensorVersion = 1;

template <typename T>
constexpr uint8_t ftensor_dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "FTensor stores f32 or f64");
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void save_ftensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kFtensorMagic, 4);
  const uint8_t version = kFtensorVersion, dtype = ftensor_dtype_code<T>(),
                rank = static_cast<uint8_t>(t.rank());
  os.put(static_cast<char>(version));
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(rank));
  for (int64_t e : t.shape()) {
    const uint64_t u = static_cast<uint64_t>(e);
    os.write(reinterpret_cast<const char*>(&u), 8);
  }
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw IoError("FTensor write failed");
}

template <typename T>
Tensor<T> load_ftensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != std::string(kFtensorMagic, 4))
    throw IoError("not an FTensor stream (bad magic)");
  const int version = is.get(), dtype = is.get(), rank = is.get();
  if (version != kFtensorVersion)
    throw IoError("unsupported FTensor version " + std::to_string(version));
  if (dtype != ftensor_dtype_code<T>())
    throw IoError("FTensor dtype code " + std::to_string(dtype) +
                  " does not match the requested element type");
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) {
    uint64_t u = 0;
    is.read(reinterpret_cast<char*>(&u), 8);
    shape[i] = static_cast<int64_t>(u);
  }
  Tensor<T> t(shape);
  is.read(reinterpret_cast<char*>(t.mutable_data().data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!is) throw IoError("FTensor read truncated");
  return t;
}

template <typename T>
void save_ftensor_file(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  save_ftensor(os, t);
}

template <typename T>
Tensor<T> load_ftensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return load_ftensor<T>(is);
}

/// Dtype code of a stored tensor (0 = f32, 1 = f64) without loading it.
inline uint8_t peek_ftensor_dtype(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != std::string(kFtensorMagic, 4))
    throw IoError("'" + path + "' is not an FTensor file");
  is.get();
  return static_cast<uint8_t>(is.get());
}

}  // namespace factorizer
