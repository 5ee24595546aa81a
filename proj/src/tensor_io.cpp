#include "restnet/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace restnet {

namespace le {

void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

void put_u16(std::ostream& os, std::uint16_t v) {
  put_u8(os, static_cast<std::uint8_t>(v & 0xff));
  put_u8(os, static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) put_u8(os, static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

static void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) put_u8(os, static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint8_t get_u8(std::istream& is) {
  const int c = is.get();
  if (c == std::char_traits<char>::eof()) throw IoError("unexpected end of tensor stream");
  return static_cast<std::uint8_t>(c);
}

std::uint16_t get_u16(std::istream& is) {
  const std::uint16_t lo = get_u8(is);
  const std::uint16_t hi = get_u8(is);
  return static_cast<std::uint16_t>(lo | (hi << 8));
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(get_u8(is)) << (8 * i);
  return v;
}

static std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(get_u8(is)) << (8 * i);
  return v;
}

}  // namespace le

const char* dtype_name(DType dtype) { return dtype == DType::Float32 ? "float32" : "float64"; }

DType parse_dtype(const std::string& name) {
  if (name == "float32") return DType::Float32;
  if (name == "float64") return DType::Float64;
  throw ConfigError("unknown dtype '" + name + "' (expected float32 or float64)");
}

void write_raw_tensor(std::ostream& os, const RawTensor& t) {
  if (static_cast<Index>(t.values.size()) != numel(t.shape)) throw ShapeError("RTNT payload does not match shape");
  os.write("RTNT", 4);
  le::put_u8(os, 1);
  le::put_u8(os, static_cast<std::uint8_t>(t.dtype));
  le::put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
  for (Index d : t.shape) le::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.values) {
    if (t.dtype == DType::Float32) {
      le::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      le::put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!os) throw IoError("failed writing RTNT tensor");
}

RawTensor read_raw_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "RTNT", 4) != 0) throw IoError("missing RTNT magic");
  const std::uint8_t version = le::get_u8(is);
  if (version != 1) throw IoError("unsupported RTNT version " + std::to_string(version));
  const std::uint8_t code = le::get_u8(is);
  if (code > 1) throw IoError("unknown RTNT dtype code " + std::to_string(code));
  RawTensor t;
  t.dtype = static_cast<DType>(code);
  const std::uint32_t rank = le::get_u32(is);
  if (rank > 16) throw IoError("implausible RTNT rank " + std::to_string(rank));
  t.shape.resize(rank);
  for (auto& d : t.shape) d = le::get_u32(is);
  const Index n = numel(t.shape);
  t.values.resize(static_cast<std::size_t>(n));
  for (auto& v : t.values) {
    v = t.dtype == DType::Float32 ? static_cast<double>(std::bit_cast<float>(le::get_u32(is)))
                                  : std::bit_cast<double>(le::get_u64(is));
  }
  return t;
}

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<Scalar>(is);
}

template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace restnet
