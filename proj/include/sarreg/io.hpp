// Copyright 2026 The sarreg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// File formats: the SART binary tensor container and PGM/PPM rasters.
//
// SART layout: "SART" | version u8 | dtype u8 | rank u8 | dims u32 LE x rank |
// row-major little-endian payload. Several records may be concatenated.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "sarreg/imagecore.hpp"
#include "sarreg/metrics.hpp"

namespace sarreg::io {

inline constexpr std::uint8_t kSartVersion = 1;

enum class DType : std::uint8_t { uint8 = 1, float32 = 2, float64 = 3 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::uint8: return 1;
    case DType::float32: return 4;
    case DType::float64: return 8;
  }
  throw ContractViolation("unknown SART dtype");
}

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// In-memory SART record; values are held as doubles regardless of dtype.
struct SartTensor {
  DType dtype = DType::float32;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("SART: truncated stream");
  return v;
}

}  // namespace detail

inline void write_sart(std::ostream& os, const SartTensor& t) {
  require(t.dims.size() <= 255, "SART: rank too large");
  require(t.values.size() == t.count(), "SART: payload does not match dims");
  os.write("SART", 4);
  detail::put_le<std::uint8_t>(os, kSartVersion);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_le<std::uint32_t>(os, d);
  for (double v : t.values) {
    switch (t.dtype) {
      case DType::uint8:
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(std::lround(v)));
        break;
      case DType::float32: detail::put_le<float>(os, static_cast<float>(v)); break;
      case DType::float64: detail::put_le<double>(os, v); break;
    }
  }
}

/// Reads one record; returns false on clean end of stream.
inline bool read_sart(std::istream& is, SartTensor& t) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (is.gcount() == 0 && is.eof()) return false;
  if (is.gcount() != 4 || std::memcmp(magic.data(), "SART", 4) != 0) {
    throw FormatError("SART: bad magic");
  }
  const auto version = detail::get_le<std::uint8_t>(is);
  if (version != kSartVersion) throw FormatError("SART: unsupported version " + std::to_string(version));
  const auto code = detail::get_le<std::uint8_t>(is);
  if (code < 1 || code > 3) throw FormatError("SART: unknown dtype code " + std::to_string(code));
  t.dtype = static_cast<DType>(code);
  const auto rank = detail::get_le<std::uint8_t>(is);
  t.dims.resize(rank);
  for (auto& d : t.dims) d = detail::get_le<std::uint32_t>(is);
  t.values.resize(t.count());
  for (auto& v : t.values) {
    switch (t.dtype) {
      case DType::uint8: v = detail::get_le<std::uint8_t>(is); break;
      case DType::float32: v = detail::get_le<float>(is); break;
      case DType::float64: v = detail::get_le<double>(is); break;
    }
  }
  return true;
}

inline void save_sart(const std::filesystem::path& path, const std::vector<SartTensor>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) write_sart(os, r);
}

inline std::vector<SartTensor> load_sart(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractViolation("cannot read " + path.string());
  std::vector<SartTensor> out;
  SartTensor t;
  while (read_sart(is, t)) out.push_back(t);
  if (out.empty()) throw FormatError("SART: no records in " + path.string());
  return out;
}

// Fields are stored as (h, w, 2) float32 with (drow, dcol) interleaved.
inline SartTensor to_sart(const DisplacementField& f) {
  SartTensor t{DType::float32, {std::uint32_t(f.height()), std::uint32_t(f.width()), 2u}, {}};
  t.values.reserve(f.size() * 2);
  for (std::size_t i = 0; i < f.size(); ++i) {
    t.values.push_back(f.dy_plane()[i]);
    t.values.push_back(f.dx_plane()[i]);
  }
  return t;
}

inline DisplacementField field_from_sart(const SartTensor& t) {
  if (t.dims.size() != 3 || t.dims[2] != 2) throw FormatError("SART: not a displacement field");
  const int h = int(t.dims[0]), w = int(t.dims[1]);
  std::vector<double> dy(std::size_t(h) * w), dx(std::size_t(h) * w);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    dy[i] = t.values[2 * i];
    dx[i] = t.values[2 * i + 1];
  }
  return DisplacementField(h, w, std::move(dy), std::move(dx));
}

inline SartTensor to_sart(const SegMask& m) {
  SartTensor t{DType::uint8, {std::uint32_t(m.height()), std::uint32_t(m.width())}, {}};
  t.values.assign(m.pixels().begin(), m.pixels().end());
  return t;
}

inline SegMask mask_from_sart(const SartTensor& t) {
  if (t.dims.size() != 2 || t.dtype != DType::uint8) throw FormatError("SART: not a mask");
  std::vector<std::uint8_t> v(t.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::uint8_t>(t.values[i]);
  return SegMask(int(t.dims[0]), int(t.dims[1]), std::move(v));
}

// ------------------------------------------------------------- PGM / PPM

/// Writes a binary PGM; bit_depth 8 or 16 (16-bit samples are big-endian).
inline void save_pgm(const std::filesystem::path& path, const Image& img, int bit_depth = 16) {
  require(bit_depth == 8 || bit_depth == 16, "PGM bit depth must be 8 or 16");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  const int maxval = bit_depth == 8 ? 255 : 65535;
  os << "P5\n" << img.width() << ' ' << img.height() << '\n' << maxval << '\n';
  for (double v : img.pixels()) {
    const auto q = static_cast<std::uint32_t>(std::lround(v * maxval));
    if (bit_depth == 8) {
      os.put(static_cast<char>(q));
    } else {
      os.put(static_cast<char>(q >> 8));
      os.put(static_cast<char>(q & 0xFF));
    }
  }
}

inline void save_pgm(const std::filesystem::path& path, const SegMask& m) {
  std::vector<double> v(m.pixels().begin(), m.pixels().end());
  save_pgm(path, Image(m.height(), m.width(), std::move(v)), 8);
}

inline Image load_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractViolation("cannot read " + path.string());
  auto token = [&]() {
    std::string t;
    while (is >> std::ws && is.peek() == '#') std::getline(is, t);
    is >> t;
    return t;
  };
  if (token() != "P5") throw FormatError("PGM: only binary P5 is supported: " + path.string());
  const int w = std::stoi(token()), h = std::stoi(token()), maxval = std::stoi(token());
  if (maxval <= 0 || maxval > 65535) throw FormatError("PGM: bad maxval");
  is.get();
  std::vector<double> px(std::size_t(h) * w);
  for (auto& v : px) {
    std::uint32_t q = static_cast<unsigned char>(is.get());
    if (maxval > 255) q = (q << 8) | static_cast<unsigned char>(is.get());
    v = double(q) / maxval;
  }
  if (!is) throw FormatError("PGM: truncated " + path.string());
  return Image(h, w, std::move(px));
}

inline SegMask load_mask_pgm(const std::filesystem::path& path) {
  const Image img = load_pgm(path);
  std::vector<std::uint8_t> v(img.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels()[i] >= 0.5 ? 1 : 0;
  return SegMask(img.height(), img.width(), std::move(v));
}

/// Reference image in grey with the reference contour in red and the
/// registered contour in green (yellow where they coincide).
inline void save_overlay_ppm(const std::filesystem::path& path, const Image& ref,
                             const SegMask& ref_seg, const SegMask& warped_seg) {
  require(ref_seg.same_shape(ref) && warped_seg.same_shape(ref), "overlay: shape mismatch");
  std::vector<std::array<std::uint8_t, 3>> rgb(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto g = static_cast<std::uint8_t>(std::lround(ref.pixels()[i] * 255));
    rgb[i] = {g, g, g};
  }
  std::vector<std::uint8_t> red(ref.size(), 0), green(ref.size(), 0);
  for (auto [y, x] : metrics::boundary(ref_seg)) red[std::size_t(y) * ref.width() + x] = 1;
  for (auto [y, x] : metrics::boundary(warped_seg)) green[std::size_t(y) * ref.width() + x] = 1;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (red[i] || green[i]) rgb[i] = {std::uint8_t(red[i] ? 255 : 0), std::uint8_t(green[i] ? 255 : 0), 0};
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P6\n" << ref.width() << ' ' << ref.height() << "\n255\n";
  for (const auto& p : rgb) os.write(reinterpret_cast<const char*>(p.data()), 3);
}

}  // namespace sarreg::io
