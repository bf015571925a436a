// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "refmc/core.hpp"
#include "refmc/texture.hpp"

namespace refmc {

struct ImageRgb {
  int width = 0;
  int height = 0;
  std::vector<Vec3> pixels;  // row-major, top row first

  ImageRgb() = default;
  ImageRgb(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h) {}
  Vec3& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
  const Vec3& at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
};

// ---------------------------------------------------------------------------
// Radiance .hdr (RGBE), new-style RLE scanlines.
// ---------------------------------------------------------------------------

namespace rgbe_detail {

inline void float_to_rgbe(const Vec3& c, unsigned char out[4]) {
  float m = std::max(c.x, std::max(c.y, c.z));
  if (m < 1e-32f) {
    out[0] = out[1] = out[2] = out[3] = 0;
    return;
  }
  int e;
  float scale = std::frexp(m, &e) * 256.0f / m;
  out[0] = static_cast<unsigned char>(std::max(0.0f, c.x) * scale);
  out[1] = static_cast<unsigned char>(std::max(0.0f, c.y) * scale);
  out[2] = static_cast<unsigned char>(std::max(0.0f, c.z) * scale);
  out[3] = static_cast<unsigned char>(e + 128);
}

inline Vec3 rgbe_to_float(const unsigned char v[4]) {
  if (v[3] == 0) return {0.0f, 0.0f, 0.0f};
  float f = std::ldexp(1.0f, static_cast<int>(v[3]) - (128 + 8));
  return {v[0] * f, v[1] * f, v[2] * f};
}

inline void write_rle_component(std::ofstream& f, const std::vector<unsigned char>& data) {
  size_t n = data.size();
  size_t i = 0;
  while (i < n) {
    // find a run of >= 4 identical bytes
    size_t run_start = i;
    size_t run_len = 0;
    while (run_start < n) {
      run_len = 1;
      while (run_start + run_len < n && run_len < 127 &&
             data[run_start + run_len] == data[run_start])
        ++run_len;
      if (run_len >= 4) break;
      run_start += run_len;
    }
    if (run_len < 4) run_start = n;
    // literal bytes up to the run
    size_t lit = i;
    while (lit < run_start) {
      size_t cnt = std::min<size_t>(128, run_start - lit);
      unsigned char hdr = static_cast<unsigned char>(cnt);
      f.put(static_cast<char>(hdr));
      f.write(reinterpret_cast<const char*>(&data[lit]), static_cast<std::streamsize>(cnt));
      lit += cnt;
    }
    if (run_start < n) {
      f.put(static_cast<char>(128 + run_len));
      f.put(static_cast<char>(data[run_start]));
      i = run_start + run_len;
    } else {
      i = n;
    }
  }
}

}  // namespace rgbe_detail

inline void save_hdr(const std::string& path, const ImageRgb& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n";
  f << "-Y " << img.height << " +X " << img.width << "\n";
  bool rle = img.width >= 8 && img.width < 32768;
  std::vector<unsigned char> comp(static_cast<size_t>(img.width));
  for (int y = 0; y < img.height; ++y) {
    if (!rle) {
      for (int x = 0; x < img.width; ++x) {
        unsigned char v[4];
        rgbe_detail::float_to_rgbe(img.at(x, y), v);
        f.write(reinterpret_cast<const char*>(v), 4);
      }
      continue;
    }
    unsigned char hdr[4] = {2, 2, static_cast<unsigned char>(img.width >> 8),
                            static_cast<unsigned char>(img.width & 0xff)};
    f.write(reinterpret_cast<const char*>(hdr), 4);
    for (int k = 0; k < 4; ++k) {
      for (int x = 0; x < img.width; ++x) {
        unsigned char v[4];
        rgbe_detail::float_to_rgbe(img.at(x, y), v);
        comp[static_cast<size_t>(x)] = v[k];
      }
      rgbe_detail::write_rle_component(f, comp);
    }
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline ImageRgb load_hdr(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("#?", 0) != 0)
    throw std::runtime_error("not a Radiance file: " + path);
  while (std::getline(f, line) && !line.empty()) {
    // header lines (FORMAT=, comments); blank line terminates
  }
  if (!std::getline(f, line)) throw std::runtime_error("truncated header: " + path);
  int w = 0, h = 0;
  if (std::sscanf(line.c_str(), "-Y %d +X %d", &h, &w) != 2)
    throw std::runtime_error("unsupported resolution line: " + line);
  ImageRgb img(w, h);
  std::vector<unsigned char> row(static_cast<size_t>(w) * 4);
  for (int y = 0; y < h; ++y) {
    unsigned char hdr[4];
    f.read(reinterpret_cast<char*>(hdr), 4);
    if (!f) throw std::runtime_error("truncated scanline: " + path);
    bool rle = hdr[0] == 2 && hdr[1] == 2 && ((hdr[2] << 8) | hdr[3]) == w && w >= 8;
    if (!rle) {
      // flat RGBE; the 4 bytes already read are the first pixel
      std::memcpy(row.data(), hdr, 4);
      f.read(reinterpret_cast<char*>(row.data() + 4), static_cast<std::streamsize>(w * 4 - 4));
      for (int x = 0; x < w; ++x) img.at(x, y) = rgbe_detail::rgbe_to_float(&row[x * 4]);
      continue;
    }
    std::vector<unsigned char> comp(static_cast<size_t>(w));
    for (int k = 0; k < 4; ++k) {
      int x = 0;
      while (x < w) {
        int code = f.get();
        if (code == EOF) throw std::runtime_error("truncated RLE data: " + path);
        if (code > 128) {
          int count = code - 128;
          int value = f.get();
          for (int i = 0; i < count && x < w; ++i) comp[x++] = static_cast<unsigned char>(value);
        } else {
          for (int i = 0; i < code && x < w; ++i)
            comp[x++] = static_cast<unsigned char>(f.get());
        }
      }
      for (int i = 0; i < w; ++i) row[static_cast<size_t>(i) * 4 + k] = comp[i];
    }
    for (int x = 0; x < w; ++x) img.at(x, y) = rgbe_detail::rgbe_to_float(&row[x * 4]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Minimal 8-bit RGB PNG writer (zlib deflate), for previews and LDR exports.
// ---------------------------------------------------------------------------

namespace png_detail {

inline void put_u32(std::vector<unsigned char>& v, uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

inline void write_chunk(std::ofstream& f, const char type[4],
                        const std::vector<unsigned char>& data) {
  std::vector<unsigned char> len;
  put_u32(len, static_cast<uint32_t>(data.size()));
  f.write(reinterpret_cast<const char*>(len.data()), 4);
  f.write(type, 4);
  if (!data.empty())
    f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), static_cast<uInt>(data.size()));
  std::vector<unsigned char> crcv;
  put_u32(crcv, static_cast<uint32_t>(crc));
  f.write(reinterpret_cast<const char*>(crcv.data()), 4);
}

}  // namespace png_detail

// Writes 8-bit sRGB-encoded RGB. Input is linear radiance; values are
// tonemapped by the caller or clamped here.
inline void save_png_srgb(const std::string& path, const ImageRgb& img, bool tonemap = true) {
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<size_t>(img.height) * (1 + static_cast<size_t>(img.width) * 3));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter type: none
    for (int x = 0; x < img.width; ++x) {
      Vec3 c = img.at(x, y);
      if (tonemap) c = tonemap_reinhard(c);
      raw.push_back(static_cast<unsigned char>(std::lround(srgb_encode(c.x) * 255.0f)));
      raw.push_back(static_cast<unsigned char>(std::lround(srgb_encode(c.y) * 255.0f)));
      raw.push_back(static_cast<unsigned char>(std::lround(srgb_encode(c.z) * 255.0f)));
    }
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("zlib compression failed");
  compressed.resize(bound);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  f.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<unsigned char> ihdr;
  png_detail::put_u32(ihdr, static_cast<uint32_t>(img.width));
  png_detail::put_u32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  png_detail::write_chunk(f, "IHDR", ihdr);
  png_detail::write_chunk(f, "IDAT", compressed);
  png_detail::write_chunk(f, "IEND", {});
  if (!f) throw std::runtime_error("write failed: " + path);
}

// Convenience conversions between RGB images and 3-channel textures.
inline ImageRgb texture_to_image(const Texture2D& tex) {
  ImageRgb img(tex.width, tex.height);
  for (int y = 0; y < tex.height; ++y)
    for (int x = 0; x < tex.width; ++x) {
      const float* t = tex.texel(x, y);
      img.at(x, y) = {t[0], tex.channels > 1 ? t[1] : t[0], tex.channels > 2 ? t[2] : t[0]};
    }
  return img;
}

inline Texture2D image_to_texture(const ImageRgb& img) {
  Texture2D tex(img.width, img.height, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      float* t = tex.texel(x, y);
      Vec3 c = img.at(x, y);
      t[0] = c.x;
      t[1] = c.y;
      t[2] = c.z;
    }
  return tex;
}

}  // namespace refmc
