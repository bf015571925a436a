// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "refmc/core.hpp"
#include "refmc/dual.hpp"

namespace refmc {

enum class WrapMode { Clamp, Repeat };
enum class FilterMode { Nearest, Bilinear };

// Contributing texels of a filtered lookup, kept for the adjoint pass.
// Weights form a partition of unity.
struct TexelFootprint {
  std::array<int32_t, 4> idx{-1, -1, -1, -1};
  std::array<float, 4> w{0.0f, 0.0f, 0.0f, 0.0f};
  int count = 0;
};

struct Texture2D {
  int width = 0;
  int height = 0;
  int channels = 0;
  WrapMode wrap = WrapMode::Repeat;
  FilterMode filter = FilterMode::Bilinear;
  std::vector<float> data;  // row-major, interleaved channels

  Texture2D() = default;
  Texture2D(int w, int h, int c) : width(w), height(h), channels(c) {
    data.assign(static_cast<size_t>(w) * h * c, 0.0f);
  }

  static Texture2D constant(int w, int h, int c, const float* values) {
    Texture2D t(w, h, c);
    for (int i = 0; i < w * h; ++i)
      for (int k = 0; k < c; ++k) t.data[static_cast<size_t>(i) * c + k] = values[k];
    return t;
  }

  float* texel(int x, int y) { return &data[(static_cast<size_t>(y) * width + x) * channels]; }
  const float* texel(int x, int y) const {
    return &data[(static_cast<size_t>(y) * width + x) * channels];
  }

  int wrap_coord(int v, int n) const {
    if (wrap == WrapMode::Repeat) {
      // power-of-two sizes (the common case) avoid the integer division
      if ((n & (n - 1)) == 0) return v & (n - 1);
      v %= n;
      if (v < 0) v += n;
      return v;
    }
    return std::min(n - 1, std::max(0, v));
  }
};

// Filtered lookup; reports the contributing texel indices and weights so the
// adjoint pass can scatter gradients exactly.
inline std::array<float, 4> tex_lookup(const Texture2D& tex, Vec2 uv,
                                       TexelFootprint* fp = nullptr) {
  std::array<float, 4> out{0.0f, 0.0f, 0.0f, 0.0f};
  if (tex.width == 0 || tex.height == 0) return out;
  if (tex.filter == FilterMode::Nearest) {
    int x = tex.wrap_coord(static_cast<int>(std::floor(uv.x * tex.width)), tex.width);
    int y = tex.wrap_coord(static_cast<int>(std::floor(uv.y * tex.height)), tex.height);
    const float* t = tex.texel(x, y);
    for (int k = 0; k < tex.channels; ++k) out[k] = t[k];
    if (fp) {
      fp->count = 1;
      fp->idx[0] = y * tex.width + x;
      fp->w[0] = 1.0f;
    }
    return out;
  }
  // Bilinear, texel centers at (x+0.5)/width.
  float fx = uv.x * tex.width - 0.5f;
  float fy = uv.y * tex.height - 0.5f;
  int x0 = static_cast<int>(std::floor(fx));
  int y0 = static_cast<int>(std::floor(fy));
  float tx = fx - x0;
  float ty = fy - y0;
  if (tex.width == 1 && tex.height == 1) {
    // Constant texture fast path: all four taps wrap to texel 0. The same
    // four-weight accumulation keeps the result bit-identical to the general
    // path (the weights need not sum to exactly 1 in float).
    float ws[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
    const float* t = tex.data.data();
    if (fp) fp->count = 4;
    for (int j = 0; j < 4; ++j) {
      for (int k = 0; k < tex.channels; ++k) out[k] += ws[j] * t[k];
      if (fp) {
        fp->idx[j] = 0;
        fp->w[j] = ws[j];
      }
    }
    return out;
  }
  int xs[2] = {tex.wrap_coord(x0, tex.width), tex.wrap_coord(x0 + 1, tex.width)};
  int ys[2] = {tex.wrap_coord(y0, tex.height), tex.wrap_coord(y0 + 1, tex.height)};
  float ws[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
  if (fp) fp->count = 4;
  for (int j = 0; j < 4; ++j) {
    int x = xs[j & 1], y = ys[j >> 1];
    const float* t = tex.texel(x, y);
    for (int k = 0; k < tex.channels; ++k) out[k] += ws[j] * t[k];
    if (fp) {
      fp->idx[j] = y * tex.width + x;
      fp->w[j] = ws[j];
    }
  }
  return out;
}

inline Vec3 tex_lookup_rgb(const Texture2D& tex, Vec2 uv, TexelFootprint* fp = nullptr) {
  auto v = tex_lookup(tex, uv, fp);
  return {v[0], v[1], v[2]};
}

// Tangent-space normal perturbation; texel (0.5, 0.5, 1) is identity.
template <typename T>
TVec3<T> apply_normal_map_t(const Frame& frame, const TVec3<T>& texel) {
  TVec3<T> local{texel.x * 2.0f - 1.0f, texel.y * 2.0f - 1.0f,
                 dmax(texel.z * 2.0f - 1.0f, 1e-3f)};
  TVec3<T> world = TVec3<T>(T(frame.t.x), T(frame.t.y), T(frame.t.z)) * local.x +
                   TVec3<T>(T(frame.b.x), T(frame.b.y), T(frame.b.z)) * local.y +
                   TVec3<T>(T(frame.n.x), T(frame.n.y), T(frame.n.z)) * local.z;
  return normalize(world);
}

inline Vec3 apply_normal_map(const Vec3& shading_n, const Frame& tangent_frame,
                             const Vec3& normal_texel) {
  (void)shading_n;  // the frame carries it as its n axis
  return apply_normal_map_t(tangent_frame, normal_texel);
}

// --- RFM1 raw float dumps: "RFM1", uint32 width/height/channels, f32 LE data.

inline void save_rfm(const std::string& path, const Texture2D& tex) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write("RFM1", 4);
  uint32_t dims[3] = {static_cast<uint32_t>(tex.width), static_cast<uint32_t>(tex.height),
                      static_cast<uint32_t>(tex.channels)};
  f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  f.write(reinterpret_cast<const char*>(tex.data.data()),
          static_cast<std::streamsize>(tex.data.size() * sizeof(float)));
}

inline Texture2D load_rfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (std::memcmp(magic, "RFM1", 4) != 0) throw std::runtime_error("bad RFM1 magic: " + path);
  uint32_t dims[3];
  f.read(reinterpret_cast<char*>(dims), sizeof(dims));
  Texture2D tex(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
  f.read(reinterpret_cast<char*>(tex.data.data()),
         static_cast<std::streamsize>(tex.data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("truncated RFM1 file: " + path);
  return tex;
}

}  // namespace refmc
