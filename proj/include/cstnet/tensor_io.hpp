#pragma once

// Binary dense-array encoding shared by dataset frame files and checkpoints:
//
//   magic "CSTT" | version u16 | dtype u8 | rank u8 | extents u64[rank] | values
//
// All integers and values are little-endian. dtype 1 = float32, 2 = float64.

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "cstnet/errors.hpp"

namespace cstnet {

inline constexpr std::array<char, 4> kTensorMagic{'C', 'S', 'T', 'T'};
inline constexpr std::uint16_t kTensorFormatVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <typename T>
struct DenseArray {
  Shape shape;
  std::vector<T> values;

  bool operator==(const DenseArray&) const = default;
};

namespace io {

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::array<unsigned char, sizeof(U)> b{};
  std::memcpy(b.data(), &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  os.write(reinterpret_cast<const char*>(b.data()), sizeof(U));
}

// Sequential reader that reports the file name and byte offset on failure.
class Reader {
 public:
  Reader(std::istream& is, std::string name) : is_(is), name_(std::move(name)) {}

  template <typename U>
  U get() {
    std::array<unsigned char, sizeof(U)> b{};
    read_bytes(reinterpret_cast<char*>(b.data()), sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    U v;
    std::memcpy(&v, b.data(), sizeof(U));
    return v;
  }

  void read_bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) fail("truncated (wanted " + std::to_string(n) + " bytes)");
    offset_ += n;
  }

  std::string get_string(std::size_t n) {
    std::string s(n, '\0');
    read_bytes(s.data(), n);
    return s;
  }

  [[noreturn]] void fail(const std::string& what) const { throw FormatError(name_, offset_, what); }

  std::size_t offset() const { return offset_; }
  const std::string& name() const { return name_; }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
  std::string name_;
  std::size_t offset_ = 0;
};

}  // namespace io

template <typename T>
void write_array(std::ostream& os, const Shape& shape, const std::vector<T>& values) {
  if (shape_numel(shape) != values.size()) throw DimensionError("write_array: shape/value count mismatch");
  if (shape.size() > 255) throw DimensionError("write_array: rank too large");
  os.write(kTensorMagic.data(), kTensorMagic.size());
  io::put_le<std::uint16_t>(os, kTensorFormatVersion);
  io::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  io::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(shape.size()));
  for (auto e : shape) io::put_le<std::uint64_t>(os, e);
  for (auto v : values) io::put_le<T>(os, v);
}

// Reads one array; values stored as the other float width are converted.
template <typename T>
DenseArray<T> read_array(io::Reader& in) {
  const std::size_t start = in.offset();
  std::array<char, 4> magic{};
  in.read_bytes(magic.data(), magic.size());
  if (magic != kTensorMagic) throw FormatError(in.name(), start, "bad magic, expected CSTT");
  const auto version = in.get<std::uint16_t>();
  if (version != kTensorFormatVersion) in.fail("unsupported version " + std::to_string(version));
  const auto tag = in.get<std::uint8_t>();
  if (tag != static_cast<std::uint8_t>(DType::f32) && tag != static_cast<std::uint8_t>(DType::f64))
    in.fail("unknown dtype tag " + std::to_string(tag));
  const auto rank = in.get<std::uint8_t>();
  DenseArray<T> out;
  std::uint64_t count = 1;
  for (std::uint8_t i = 0; i < rank; ++i) {
    const auto e = in.get<std::uint64_t>();
    if (e == 0 || e > (std::uint64_t{1} << 40)) in.fail("implausible extent " + std::to_string(e));
    count *= e;
    if (count > (std::uint64_t{1} << 40)) in.fail("implausible element count");
    out.shape.push_back(static_cast<std::size_t>(e));
  }
  out.values.resize(static_cast<std::size_t>(count));
  for (auto& v : out.values) {
    if (tag == static_cast<std::uint8_t>(DType::f32)) {
      v = static_cast<T>(in.get<float>());
    } else {
      v = static_cast<T>(in.get<double>());
    }
  }
  return out;
}

template <typename T>
void write_array_file(const std::string& path, const DenseArray<T>& a) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(path, 0, "cannot open for writing");
  write_array(os, a.shape, a.values);
  if (!os) throw FormatError(path, 0, "write failed");
}

template <typename T>
DenseArray<T> read_array_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path, 0, "cannot open for reading");
  io::Reader in(is, path);
  auto a = read_array<T>(in);
  if (!in.at_end()) in.fail("trailing bytes after array");
  return a;
}

}  // namespace cstnet
