#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include "linsem/tensor.hpp"

namespace linsem {

class WireFormatError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// base64 (RFC 4648, padded)

inline std::string base64_encode(std::string_view in) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8) |
                            static_cast<unsigned char>(in[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i + 1 == in.size()) {
    const std::uint32_t v = static_cast<unsigned char>(in[i]) << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    const std::uint32_t v = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::string base64_decode(std::string_view in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4) throw WireFormatError("base64: length is not a multiple of 4");
  std::string out;
  out.reserve(in.size() / 4 * 3);
  for (std::size_t i = 0; i < in.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = in[i + k];
      if (c == '=' && i + 4 == in.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad) throw WireFormatError("base64: data after padding");
      v[k] = value(c);
      if (v[k] < 0) throw WireFormatError("base64: invalid character");
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out += static_cast<char>((n >> 16) & 0xff);
    if (pad < 2) out += static_cast<char>((n >> 8) & 0xff);
    if (pad < 1) out += static_cast<char>(n & 0xff);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm: masks as 8-bit PGM (value = class index), images as 8-bit PPM

namespace detail {

struct PnmHeader {
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(std::string_view s) {
  PnmHeader h;
  std::size_t i = 0;
  auto skip_space = [&] {
    while (i < s.size()) {
      if (s[i] == '#') {
        while (i < s.size() && s[i] != '\n') ++i;
      } else if (s[i] == ' ' || s[i] == '\t' || s[i] == '\n' || s[i] == '\r') {
        ++i;
      } else {
        break;
      }
    }
  };
  auto token = [&]() -> std::string {
    skip_space();
    const std::size_t start = i;
    while (i < s.size() && !(s[i] == ' ' || s[i] == '\t' || s[i] == '\n' || s[i] == '\r' || s[i] == '#')) ++i;
    return std::string(s.substr(start, i - start));
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }) || t.size() > 6) {
      throw WireFormatError(std::string("netpbm: bad ") + what);
    }
    return std::stoi(t);
  };
  h.magic = token();
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (i >= s.size()) throw WireFormatError("netpbm: truncated header");
  ++i;  // single whitespace before the raster
  h.data_offset = i;
  if (h.width < 1 || h.height < 1) throw WireFormatError("netpbm: empty image");
  if (h.maxval != 255) throw WireFormatError("netpbm: only 8-bit rasters are supported");
  return h;
}

}  // namespace detail

inline std::string encode_pgm(const SemanticMask& m) {
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  for (std::int32_t v : m.labels) {
    if (v < 0 || v > 255) throw WireFormatError("mask label does not fit in 8 bits");
    out += static_cast<char>(v);
  }
  return out;
}

inline SemanticMask decode_pgm(std::string_view s) {
  const detail::PnmHeader h = detail::parse_pnm_header(s);
  if (h.magic != "P5") throw WireFormatError("mask must be a binary PGM (P5)");
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  if (s.size() - h.data_offset != n) throw WireFormatError("PGM raster size does not match its header");
  SemanticMask m(h.height, h.width);
  for (std::size_t i = 0; i < n; ++i) m.labels[i] = static_cast<unsigned char>(s[h.data_offset + i]);
  return m;
}

/// (3, h, w) image in [0, 1] to binary PPM with rounding and clamping.
inline std::string encode_ppm(const Tensor3& img) {
  if (img.channels() != 3) throw WireFormatError("PPM needs a 3-channel image");
  std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img(c, y, x), 0.0, 1.0);
        out += static_cast<char>(static_cast<int>(std::lround(v * 255.0)));
      }
  return out;
}

inline Tensor3 decode_ppm(std::string_view s) {
  const detail::PnmHeader h = detail::parse_pnm_header(s);
  if (h.magic != "P6") throw WireFormatError("image must be a binary PPM (P6)");
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height * 3;
  if (s.size() - h.data_offset != n) throw WireFormatError("PPM raster size does not match its header");
  Tensor3 img(3, h.height, h.width);
  std::size_t i = h.data_offset;
  for (int y = 0; y < h.height; ++y)
    for (int x = 0; x < h.width; ++x)
      for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<unsigned char>(s[i++]) / 255.0;
  return img;
}

inline BinaryMask to_binary(const SemanticMask& m) {
  BinaryMask b(m.height, m.width);
  for (std::size_t i = 0; i < m.labels.size(); ++i) b.bits[i] = m.labels[i] != 0;
  return b;
}

}  // namespace linsem
