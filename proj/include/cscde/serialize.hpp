#pragma once

// CSCT tensor records:
//   "CSCT" | u8 version (1) | u8 dtype (0 = f32, 1 = f64) | u8 ndim | u64 dims[ndim] | payload
// All integers and payload values little-endian, payload row-major.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "cscde/errors.hpp"
#include "cscde/tensor.hpp"

namespace cscde {

inline constexpr std::array<char, 4> kTensorMagic{'C', 'S', 'C', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename Real>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? DType::F32 : DType::F64;
}

namespace detail {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

// Tracks the stream offset so format errors can report where they happened.
class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  template <typename T>
  T get(const char* what) {
    T v{};
    if (!is_.read(reinterpret_cast<char*>(&v), sizeof(T))) {
      throw FormatError(std::string("truncated stream reading ") + what, offset_);
    }
    offset_ += sizeof(T);
    return to_little(v);
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    if (n && !is_.read(dst, static_cast<std::streamsize>(n))) {
      throw FormatError(std::string("truncated stream reading ") + what, offset_);
    }
    offset_ += n;
  }

  std::size_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::size_t offset_ = 0;
};

template <typename Stored, typename Real>
void read_payload(Reader& r, Tensor<Real>& t) {
  for (auto& v : t.vec()) v = static_cast<Real>(r.get<Stored>("tensor payload"));
}

}  // namespace detail

template <typename Real>
void write_tensor(std::ostream& os, const Tensor<Real>& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  detail::put<std::uint8_t>(os, kTensorVersion);
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<Real>()));
  detail::put<std::uint8_t>(os, 4);
  const Shape& s = t.shape();
  for (std::uint64_t d : {s.n, s.c, s.h, s.w}) detail::put<std::uint64_t>(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(Real)));
  } else {
    for (Real v : t.vec()) detail::put(os, v);
  }
}

/// Reads one record. Tensors of rank < 4 are left-padded with unit extents;
/// an f32/f64 payload is converted to Real.
template <typename Real>
Tensor<Real> read_tensor(detail::Reader& r) {
  std::array<char, 4> magic{};
  const std::size_t start = r.offset();
  r.bytes(magic.data(), magic.size(), "magic");
  if (magic != kTensorMagic) throw FormatError("bad tensor magic", start);
  const auto version = r.get<std::uint8_t>("version");
  if (version != kTensorVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version), r.offset() - 1);
  }
  const auto dtype = r.get<std::uint8_t>("dtype");
  if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype), r.offset() - 1);
  const auto ndim = r.get<std::uint8_t>("ndim");
  if (ndim > 4) throw FormatError("rank " + std::to_string(ndim) + " > 4", r.offset() - 1);
  std::array<std::uint64_t, 4> dims{1, 1, 1, 1};
  for (std::size_t i = 0; i < ndim; ++i) dims[4 - ndim + i] = r.get<std::uint64_t>("dims");
  constexpr std::uint64_t kMaxElems = std::uint64_t(1) << 34;
  std::uint64_t numel = 1;
  for (auto d : dims) {
    if (d != 0 && numel > kMaxElems / d) throw FormatError("tensor too large", r.offset());
    numel *= d;
  }
  Tensor<Real> t(Shape{dims[0], dims[1], dims[2], dims[3]});
  if (dtype == 0) {
    detail::read_payload<float>(r, t);
  } else {
    detail::read_payload<double>(r, t);
  }
  return t;
}

template <typename Real>
Tensor<Real> read_tensor(std::istream& is) {
  detail::Reader r(is);
  return read_tensor<Real>(r);
}

}  // namespace cscde
