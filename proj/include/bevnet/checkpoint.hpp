#pragma once

// Parameter checkpoints: flat binary of named tensors plus a JSON sidecar
// index. Record layout per tensor: u32 name length, name bytes, u32 rank,
// u32 dims, then little-endian 64-bit floats. Values are widened to f64 on
// disk regardless of the in-memory scalar type.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "bevnet/optim.hpp"
#include "bevnet/tensor.hpp"

namespace bevnet {

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i)
    b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

template <typename S>
inline void save_checkpoint(const ParamStore<S>& params,
                            const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  nlohmann::json index = nlohmann::json::array();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params.param(i);
    uint64_t offset = static_cast<uint64_t>(os.tellp());
    detail::put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape()) detail::put_u32(os, static_cast<uint32_t>(d));
    for (S v : t.vec()) detail::put_f64(os, static_cast<double>(v));
    index.push_back({{"name", name},
                     {"offset", offset},
                     {"shape", t.shape()},
                     {"count", t.numel()}});
  }
  os.close();
  std::ofstream js(path + ".json");
  js << nlohmann::json{{"tensors", index}}.dump(2) << "\n";
}

// Loads into an existing store; every stored tensor must already exist with a
// matching shape.
template <typename S>
inline void load_checkpoint(ParamStore<S>& params, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  while (true) {
    is.peek();
    if (is.eof()) break;
    uint32_t nlen = detail::get_u32(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    uint32_t rank = detail::get_u32(is);
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i)
      shape[i] = static_cast<int>(detail::get_u32(is));
    size_t count = shape_numel(shape);
    auto& t = params.get(name);
    if (t.shape() != shape)
      throw std::runtime_error("checkpoint shape mismatch for " + name +
                               ": file " + shape_str(shape) + " vs model " +
                               shape_str(t.shape()));
    for (size_t i = 0; i < count; ++i)
      t.data()[i] = static_cast<S>(detail::get_f64(is));
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  }
}

}  // namespace bevnet
