#pragma once

// RTNT binary tensor format:
//   "RTNT" | u8 version (=1) | u8 dtype (0 float32, 1 float64) |
//   u32 rank | rank x u32 dims | row-major payload
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "restnet/tensor.hpp"

namespace restnet {

enum class DType : std::uint8_t { Float32 = 0, Float64 = 1 };

template <typename Scalar>
constexpr DType dtype_of() {
  return std::is_same_v<Scalar, float> ? DType::Float32 : DType::Float64;
}

const char* dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

// Tensor payload as read from disk, before conversion to a scalar type.
struct RawTensor {
  DType dtype = DType::Float64;
  Shape shape;
  std::vector<double> values;
};

void write_raw_tensor(std::ostream& os, const RawTensor& t);
RawTensor read_raw_tensor(std::istream& is);

template <typename Scalar>
RawTensor to_raw(const Tensor<Scalar>& t) {
  RawTensor raw;
  raw.dtype = dtype_of<Scalar>();
  raw.shape = t.shape();
  raw.values.assign(t.data().data(), t.data().data() + t.size());
  return raw;
}

template <typename Scalar>
Tensor<Scalar> from_raw(const RawTensor& raw) {
  Buffer<Scalar> data(static_cast<Index>(raw.values.size()));
  for (Index i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(raw.values[static_cast<std::size_t>(i)]);
  return Tensor<Scalar>(raw.shape, std::move(data));
}

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  write_raw_tensor(os, to_raw(t));
}

template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is) {
  return from_raw<Scalar>(read_raw_tensor(is));
}

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t);
template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path);

namespace le {

void put_u8(std::ostream& os, std::uint8_t v);
void put_u16(std::ostream& os, std::uint16_t v);
void put_u32(std::ostream& os, std::uint32_t v);
std::uint8_t get_u8(std::istream& is);
std::uint16_t get_u16(std::istream& is);
std::uint32_t get_u32(std::istream& is);

}  // namespace le

}  // namespace restnet
