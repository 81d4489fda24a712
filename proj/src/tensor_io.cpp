#include "tvproxy/tensor_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

#include "tvproxy/error.hpp"

namespace tvproxy {

namespace {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu));
  }
}

template <typename T>
T get_le(const std::vector<unsigned char>& in, std::size_t offset) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<U>(in[offset + i]) << (8 * i));
  }
  return std::bit_cast<T>(bits);
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::IoError, "read failed for " + path.string());
  return bytes;
}

// Parses and validates everything up to the payload; returns the payload offset.
TensorHeader parse_header(const std::vector<unsigned char>& bytes,
                          const std::filesystem::path& path) {
  const std::string where = " in " + path.string();
  if (bytes.size() < 13) throw Error(ErrorKind::TruncatedPayload, "header too short" + where);
  for (std::size_t i = 0; i < kTensorMagic.size(); ++i) {
    if (bytes[i] != static_cast<unsigned char>(kTensorMagic[i])) {
      throw Error(ErrorKind::BadMagic, "expected TVPX" + where);
    }
  }
  TensorHeader h;
  h.version = get_le<std::uint32_t>(bytes, 4);
  if (h.version != kTensorVersion) {
    throw Error(ErrorKind::UnsupportedVersion, "version " + std::to_string(h.version) + where);
  }
  h.dtype = get_le<std::uint8_t>(bytes, 8);
  if (h.dtype != kDtypeF64) {
    throw Error(ErrorKind::UnsupportedDtype, "dtype " + std::to_string(h.dtype) + where);
  }
  const auto ndims = get_le<std::uint32_t>(bytes, 9);
  if (ndims == 0) throw Error(ErrorKind::InvalidShape, "zero dimensions" + where);
  const std::uint64_t dims_end = 13 + 8ull * ndims;
  if (bytes.size() < dims_end) throw Error(ErrorKind::TruncatedPayload, "dims cut off" + where);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndims; ++i) {
    const auto extent = get_le<std::uint64_t>(bytes, 13 + 8 * i);
    if (extent == 0) throw Error(ErrorKind::InvalidShape, "zero extent" + where);
    if (count > std::numeric_limits<std::uint64_t>::max() / 8 / extent) {
      throw Error(ErrorKind::InvalidShape, "element count overflows" + where);
    }
    count *= extent;
    h.dims.push_back(extent);
  }
  h.header_bytes = dims_end;
  h.file_bytes = bytes.size();
  const std::uint64_t payload = bytes.size() - dims_end;
  if (payload < 8 * count) {
    throw Error(ErrorKind::TruncatedPayload, "expected " + std::to_string(8 * count) +
                                                 " payload bytes, found " +
                                                 std::to_string(payload) + where);
  }
  if (payload > 8 * count) {
    throw Error(ErrorKind::TrailingData, std::to_string(payload - 8 * count) +
                                             " bytes after payload" + where);
  }
  return h;
}

}  // namespace

std::uint64_t Tensor::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  if (tensor.dims.empty()) throw Error(ErrorKind::InvalidShape, "tensor has zero dimensions");
  for (auto d : tensor.dims) {
    if (d == 0) throw Error(ErrorKind::InvalidShape, "tensor has a zero extent");
  }
  if (tensor.element_count() != tensor.data.size()) {
    throw Error(ErrorKind::ShapeMismatch, "dims describe " +
                                              std::to_string(tensor.element_count()) +
                                              " elements, data holds " +
                                              std::to_string(tensor.data.size()));
  }
  if (!all_finite(tensor.data)) throw Error(ErrorKind::NonFiniteData, path.string());

  std::vector<unsigned char> bytes;
  bytes.reserve(13 + 8 * tensor.dims.size() + 8 * tensor.data.size());
  bytes.insert(bytes.end(), kTensorMagic.begin(), kTensorMagic.end());
  put_le(bytes, kTensorVersion);
  put_le(bytes, kDtypeF64);
  put_le(bytes, static_cast<std::uint32_t>(tensor.dims.size()));
  for (auto d : tensor.dims) put_le(bytes, d);
  for (double v : tensor.data) put_le(bytes, v);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const TensorHeader h = parse_header(bytes, path);
  Tensor t{h.dims, {}};
  const std::uint64_t count = t.element_count();
  t.data.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    t.data[i] = get_le<double>(bytes, h.header_bytes + 8 * i);
  }
  return t;
}

TensorHeader read_tensor_header(const std::filesystem::path& path) {
  return parse_header(slurp(path), path);
}

Tensor to_tensor(const Matrix& m) {
  const auto v = m.values();
  return Tensor{{m.rows(), m.cols()}, std::vector<double>(v.begin(), v.end())};
}

Matrix to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) {
    throw Error(ErrorKind::ShapeMismatch, "expected a 2-d tensor, got " +
                                              std::to_string(t.dims.size()) + " dims");
  }
  return Matrix(t.dims[0], t.dims[1], t.data);
}

}  // namespace tvproxy
