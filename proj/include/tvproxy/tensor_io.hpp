#pragma once

// TVPX container: a little-endian header followed by a row-major f64 payload.
//
//   offset  size        field
//   0       4           magic "TVPX"
//   4       4  (u32)    version = 1
//   8       1  (u8)     dtype   = 1 (f64)
//   9       4  (u32)    ndims
//   13      8*ndims     dims (u64 each)
//   ...     8*prod      payload
//
// A 2x3 tensor is therefore exactly 77 bytes on disk.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "tvproxy/numkernel.hpp"

namespace tvproxy {

inline constexpr std::array<char, 4> kTensorMagic = {'T', 'V', 'P', 'X'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;

  std::uint64_t element_count() const;
  bool operator==(const Tensor&) const = default;
};

struct TensorHeader {
  std::uint32_t version = 0;
  std::uint8_t dtype = 0;
  std::vector<std::uint64_t> dims;
  std::uint64_t header_bytes = 0;
  std::uint64_t file_bytes = 0;
};

void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);
// Validates the header and payload length without decoding the payload.
TensorHeader read_tensor_header(const std::filesystem::path& path);

Tensor to_tensor(const Matrix& m);
Matrix to_matrix(const Tensor& t);

}  // namespace tvproxy
