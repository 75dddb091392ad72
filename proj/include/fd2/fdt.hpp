#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "fd2/autodiff.hpp"
#include "fd2/tensor.hpp"

// FDT tensor files:
//   "FDT1" | dtype u8 (0 f32, 1 f64) | rank u8 (4) | N C H W as u64 LE | payload LE, row-major.

namespace fd2 {

class FormatError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::array<char, 4> fdt_magic{'F', 'D', 'T', '1'};
inline constexpr std::size_t fdt_header_bytes = 4 + 1 + 1 + 4 * 8;

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <Scalar T>
using bits_t = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

struct FdtHeader {
  std::uint8_t dtype = 0;
  Shape shape;
};

inline FdtHeader read_header(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), fdt_magic.data(), 4) != 0) {
    throw FormatError("not an FDT file");
  }
  if (bytes.size() < fdt_header_bytes) {
    throw FormatError("truncated header: expected " + std::to_string(fdt_header_bytes) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  FdtHeader h;
  h.dtype = bytes[4];
  if (h.dtype > 1) throw FormatError("unknown dtype code " + std::to_string(h.dtype));
  if (bytes[5] != 4) throw FormatError("unsupported rank " + std::to_string(bytes[5]) + " (expected 4)");
  std::uint64_t e[4];
  for (int i = 0; i < 4; ++i) e[i] = get_le<std::uint64_t>(bytes.data() + 6 + 8 * i);
  h.shape = Shape{e[0], e[1], e[2], e[3]};
  const std::size_t width = h.dtype == 0 ? 4 : 8;
  const std::size_t expected = fdt_header_bytes + h.shape.numel() * width;
  if (bytes.size() < expected) {
    throw FormatError("truncated payload: expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw FormatError("trailing data: expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  return h;
}

template <Scalar T>
Tensor<T> read_payload(const std::vector<std::uint8_t>& bytes, const Shape& shape) {
  Tensor<T> t(shape);
  const std::uint8_t* p = bytes.data() + fdt_header_bytes;
  for (std::size_t i = 0; i < t.size(); ++i, p += sizeof(T)) {
    t[i] = std::bit_cast<T>(get_le<bits_t<T>>(p));
  }
  return t;
}

}  // namespace detail

template <Scalar T>
std::vector<std::uint8_t> encode_fdt(const Tensor<T>& t) {
  require_finite(t, "encode_fdt");
  std::vector<std::uint8_t> out(fdt_magic.begin(), fdt_magic.end());
  out.reserve(fdt_header_bytes + t.size() * sizeof(T));
  out.push_back(static_cast<std::uint8_t>(dtype_traits<T>::code));
  out.push_back(4);
  const Shape& s = t.shape();
  for (std::uint64_t e : {s.n, s.c, s.h, s.w}) detail::put_le(out, e);
  for (T v : t.data()) detail::put_le(out, std::bit_cast<detail::bits_t<T>>(v));
  return out;
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline AnyTensor decode_fdt_any(const std::vector<std::uint8_t>& bytes) {
  const auto h = detail::read_header(bytes);
  if (h.dtype == 0) return detail::read_payload<float>(bytes, h.shape);
  return detail::read_payload<double>(bytes, h.shape);
}

/// Decodes a tensor that must carry dtype T.
template <Scalar T>
Tensor<T> decode_fdt(const std::vector<std::uint8_t>& bytes) {
  const auto h = detail::read_header(bytes);
  if (h.dtype != dtype_traits<T>::code) {
    throw FormatError("dtype mismatch: file has code " + std::to_string(h.dtype) + ", expected " +
                      std::to_string(dtype_traits<T>::code));
  }
  return detail::read_payload<T>(bytes, h.shape);
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

template <Scalar T>
void write_fdt(const std::filesystem::path& path, const Tensor<T>& t) {
  write_bytes(path, encode_fdt(t));
}

template <Scalar T>
Tensor<T> read_fdt(const std::filesystem::path& path) {
  return decode_fdt<T>(read_bytes(path));
}

inline AnyTensor read_fdt_any(const std::filesystem::path& path) { return decode_fdt_any(read_bytes(path)); }

// ---------------------------------------------------------------------------
// Weight directories: one FDT file per parameter plus manifest.json.

template <Scalar T>
void save_weights(const std::filesystem::path& dir, const ParamList<T>& params) {
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  for (const Parameter<T>* p : params) {
    const std::string file = p->name() + ".fdt";
    write_fdt(dir / file, p->value());
    const Shape& s = p->shape();
    entries.push_back({{"name", p->name()}, {"file", file}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  std::ofstream out(dir / "manifest.json");
  out << nlohmann::json{{"format", "FDT1"}, {"tensors", entries}}.dump(2) << '\n';
}

/// Loads every parameter by name; missing entries and shape mismatches are errors.
template <Scalar T>
void load_weights(const std::filesystem::path& dir, const ParamList<T>& params) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  std::unordered_map<std::string, std::string> files;
  for (const auto& e : manifest.at("tensors")) files[e.at("name").get<std::string>()] = e.at("file");
  for (Parameter<T>* p : params) {
    const auto it = files.find(p->name());
    if (it == files.end()) throw FormatError("manifest has no entry for " + p->name());
    Tensor<T> t = read_fdt<T>(dir / it->second);
    if (t.shape() != p->shape()) {
      throw FormatError(p->name() + ": stored shape " + t.shape().str() + " != " + p->shape().str());
    }
    p->assign(std::move(t));
  }
}

}  // namespace fd2
