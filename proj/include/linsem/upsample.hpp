#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include "linsem/tensor.hpp"

namespace linsem {

enum class UpsampleMode { kBilinear, kNearest };

inline std::string_view to_string(UpsampleMode m) {
  return m == UpsampleMode::kBilinear ? "bilinear" : "nearest";
}

inline UpsampleMode parse_upsample_mode(std::string_view s) {
  if (s == "bilinear") return UpsampleMode::kBilinear;
  if (s == "nearest") return UpsampleMode::kNearest;
  throw std::invalid_argument("unknown upsample mode: " + std::string(s));
}

/// One-axis linear interpolation table using half-pixel centers:
/// destination index d samples source coordinate (d + 0.5) * src / dst - 0.5,
/// clamped to the source extent.
struct AxisInterp {
  std::vector<int> lo;
  std::vector<int> hi;
  std::vector<double> w_hi;

  AxisInterp(int src, int dst) : lo(dst), hi(dst), w_hi(dst) {
    if (src <= 0 || dst <= 0) throw ShapeError("AxisInterp: non-positive extent");
    const double scale = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
      double s = (d + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src - 1));
      const int l = std::min(static_cast<int>(s), src - 1);
      lo[d] = l;
      hi[d] = std::min(l + 1, src - 1);
      w_hi[d] = s - l;
    }
  }
};

/// Bilinear upsampling of every channel to (height, width).
inline Tensor3 upsample_bilinear(const Tensor3& in, int height, int width) {
  if (in.height() == height && in.width() == width) return in;
  const AxisInterp ry(in.height(), height);
  const AxisInterp rx(in.width(), width);
  Tensor3 out(in.channels(), height, width);
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < height; ++y) {
      const double wy = ry.w_hi[y];
      for (int x = 0; x < width; ++x) {
        const double wx = rx.w_hi[x];
        const double top = (1.0 - wx) * in(c, ry.lo[y], rx.lo[x]) + wx * in(c, ry.lo[y], rx.hi[x]);
        const double bot = (1.0 - wx) * in(c, ry.hi[y], rx.lo[x]) + wx * in(c, ry.hi[y], rx.hi[x]);
        out(c, y, x) = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

/// Adds upsample_bilinear(in) into `acc` without materializing the result.
inline void add_upsampled_bilinear(const Tensor3& in, Tensor3& acc) {
  if (in.channels() != acc.channels()) throw ShapeError("add_upsampled: channel mismatch");
  if (in.height() == acc.height() && in.width() == acc.width()) {
    acc += in;
    return;
  }
  const AxisInterp ry(in.height(), acc.height());
  const AxisInterp rx(in.width(), acc.width());
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < acc.height(); ++y) {
      const double wy = ry.w_hi[y];
      for (int x = 0; x < acc.width(); ++x) {
        const double wx = rx.w_hi[x];
        const double top = (1.0 - wx) * in(c, ry.lo[y], rx.lo[x]) + wx * in(c, ry.lo[y], rx.hi[x]);
        const double bot = (1.0 - wx) * in(c, ry.hi[y], rx.lo[x]) + wx * in(c, ry.hi[y], rx.hi[x]);
        acc(c, y, x) += (1.0 - wy) * top + wy * bot;
      }
    }
  }
}

/// Adjoint of upsample_bilinear: maps a gradient at (height, width) of the
/// upsampled tensor back onto the (src_h, src_w) source grid.
inline Tensor3 upsample_bilinear_adjoint(const Tensor3& grad, int src_h, int src_w) {
  if (grad.height() == src_h && grad.width() == src_w) return grad;
  const AxisInterp ry(src_h, grad.height());
  const AxisInterp rx(src_w, grad.width());
  Tensor3 out(grad.channels(), src_h, src_w);
  for (int c = 0; c < grad.channels(); ++c) {
    for (int y = 0; y < grad.height(); ++y) {
      const double wy = ry.w_hi[y];
      for (int x = 0; x < grad.width(); ++x) {
        const double wx = rx.w_hi[x];
        const double g = grad(c, y, x);
        out(c, ry.lo[y], rx.lo[x]) += (1.0 - wy) * (1.0 - wx) * g;
        out(c, ry.lo[y], rx.hi[x]) += (1.0 - wy) * wx * g;
        out(c, ry.hi[y], rx.lo[x]) += wy * (1.0 - wx) * g;
        out(c, ry.hi[y], rx.hi[x]) += wy * wx * g;
      }
    }
  }
  return out;
}

/// Nearest-neighbour upsampling by an integer factor.
inline Tensor3 upsample_nearest(const Tensor3& in, int factor) {
  Tensor3 out(in.channels(), in.height() * factor, in.width() * factor);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x) out(c, y, x) = in(c, y / factor, x / factor);
  return out;
}

inline Tensor3 upsample_nearest_adjoint(const Tensor3& grad, int factor) {
  Tensor3 out(grad.channels(), grad.height() / factor, grad.width() / factor);
  for (int c = 0; c < grad.channels(); ++c)
    for (int y = 0; y < grad.height(); ++y)
      for (int x = 0; x < grad.width(); ++x) out(c, y / factor, x / factor) += grad(c, y, x);
  return out;
}

}  // namespace linsem
