#pragma once

// Checkpoint layout:
//
//   magic "CSTK" | version u16 | config length u32 | config text |
//   count u32 | count × (name length u16 | name | dense array)
//
// Dense arrays use the tensor encoding from tensor_io.hpp. Every named
// parameter and buffer of the model is stored.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "cstnet/errors.hpp"
#include "cstnet/model.hpp"
#include "cstnet/tensor_io.hpp"

namespace cstnet {

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'S', 'T', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const Cstnet<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(path, 0, "cannot open for writing");
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  io::put_le<std::uint16_t>(os, kCheckpointVersion);
  const auto text = model.config().to_text();
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = model.parameters();
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    io::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_array(os, p.tensor.shape(), p.tensor.values());
  }
  if (!os) throw FormatError(path, 0, "write failed");
}

// Rebuilds the model from the stored configuration and overwrites every
// parameter. Missing, extra or misshapen entries are errors.
template <typename T>
Cstnet<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path, 0, "cannot open for reading");
  io::Reader in(is, path);
  std::array<char, 4> magic{};
  in.read_bytes(magic.data(), magic.size());
  if (magic != kCheckpointMagic) in.fail("bad magic, expected CSTK");
  const auto version = in.get<std::uint16_t>();
  if (version != kCheckpointVersion) in.fail("unsupported checkpoint version " + std::to_string(version));
  const auto text_len = in.get<std::uint32_t>();
  if (text_len > (1u << 20)) in.fail("implausible config length");
  const auto text = in.get_string(text_len);
  Cstnet<T> model(CstnetConfig::from_text(text), 0);
  std::map<std::string, Tensor<T>> slots;
  for (auto& p : model.parameters()) slots.emplace(p.name, p.tensor);
  const auto count = in.get<std::uint32_t>();
  if (count != slots.size())
    in.fail("checkpoint has " + std::to_string(count) + " tensors, model expects " + std::to_string(slots.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = in.get_string(in.get<std::uint16_t>());
    auto it = slots.find(name);
    if (it == slots.end()) in.fail("unknown tensor '" + name + "'");
    auto a = read_array<T>(in);
    if (a.shape != it->second.shape())
      in.fail("tensor '" + name + "' has shape " + shape_str(a.shape) + ", model expects " +
              shape_str(it->second.shape()));
    auto dst = it->second.mutable_data();
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  }
  if (!in.at_end()) in.fail("trailing bytes after checkpoint");
  return model;
}

}  // namespace cstnet
