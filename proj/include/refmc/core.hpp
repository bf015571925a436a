// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace refmc {

inline constexpr float kPi = 3.14159265358979323846f;
inline constexpr float kTwoPi = 2.0f * kPi;
inline constexpr float kInvPi = 1.0f / kPi;
inline constexpr float kInfinity = std::numeric_limits<float>::infinity();

// Roughness floor shared by the GGX sampler, pdf, and the D/G terms.
inline constexpr float kRoughnessMin = 0.04f;

template <typename T>
struct TVec2 {
  T x{}, y{};
  TVec2() = default;
  TVec2(T x_, T y_) : x(x_), y(y_) {}
  TVec2 operator+(const TVec2& o) const { return {x + o.x, y + o.y}; }
  TVec2 operator-(const TVec2& o) const { return {x - o.x, y - o.y}; }
  TVec2 operator*(T s) const { return {x * s, y * s}; }
};

template <typename T>
struct TVec3 {
  T x{}, y{}, z{};
  TVec3() = default;
  TVec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}
  explicit TVec3(T s) : x(s), y(s), z(s) {}

  TVec3 operator+(const TVec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  TVec3 operator-(const TVec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  TVec3 operator-() const { return {-x, -y, -z}; }
  TVec3 operator*(const TVec3& o) const { return {x * o.x, y * o.y, z * o.z}; }
  TVec3 operator*(T s) const { return {x * s, y * s, z * s}; }
  TVec3 operator/(T s) const { return {x / s, y / s, z / s}; }
  TVec3& operator+=(const TVec3& o) {
    x += o.x; y += o.y; z += o.z;
    return *this;
  }
  TVec3& operator*=(T s) {
    x *= s; y *= s; z *= s;
    return *this;
  }
  bool operator==(const TVec3& o) const { return x == o.x && y == o.y && z == o.z; }
  T operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

template <typename T>
TVec3<T> operator*(T s, const TVec3<T>& v) {
  return v * s;
}

template <typename T>
T dot(const TVec3<T>& a, const TVec3<T>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

template <typename T>
TVec3<T> cross(const TVec3<T>& a, const TVec3<T>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

template <typename T>
T length_squared(const TVec3<T>& v) {
  return dot(v, v);
}

template <typename T>
T length(const TVec3<T>& v) {
  using std::sqrt;
  return sqrt(dot(v, v));
}

template <typename T>
TVec3<T> normalize(const TVec3<T>& v) {
  using std::sqrt;
  T len = sqrt(dot(v, v));
  return {v.x / len, v.y / len, v.z / len};
}

using Vec2 = TVec2<float>;
using Vec3 = TVec3<float>;
using Spectrum = TVec3<float>;

inline float luminance(const Spectrum& c) {
  return 0.2126f * c.x + 0.7152f * c.y + 0.0722f * c.z;
}

inline float clampf(float v, float lo, float hi) { return std::min(hi, std::max(lo, v)); }

inline float lerp(float a, float b, float t) { return a + (b - a) * t; }

inline Vec3 lerp(const Vec3& a, const Vec3& b, float t) {
  return {lerp(a.x, b.x, t), lerp(a.y, b.y, t), lerp(a.z, b.z, t)};
}

template <typename T>
TVec3<T> reflect(const TVec3<T>& v, const TVec3<T>& n) {
  return n * (T(2) * dot(v, n)) - v;
}

inline bool is_finite(const Vec3& v) {
  return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

// Orthonormal basis with `n` as the third axis (Duff et al. 2017).
struct Frame {
  Vec3 t, b, n;

  static Frame from_normal(const Vec3& n) {
    float sign = std::copysign(1.0f, n.z);
    float a = -1.0f / (sign + n.z);
    float bb = n.x * n.y * a;
    Frame f;
    f.t = {1.0f + sign * n.x * n.x * a, sign * bb, -sign * n.x};
    f.b = {bb, sign + n.y * n.y * a, -n.y};
    f.n = n;
    return f;
  }

  Vec3 to_world(const Vec3& v) const { return t * v.x + b * v.y + n * v.z; }
  Vec3 to_local(const Vec3& v) const { return {dot(v, t), dot(v, b), dot(v, n)}; }
};

// Reinhard x/(1+x), the tonemap used for losses and PSNR.
inline float tonemap_reinhard(float x) {
  x = std::max(0.0f, x);
  return x / (1.0f + x);
}

inline Vec3 tonemap_reinhard(const Vec3& c) {
  return {tonemap_reinhard(c.x), tonemap_reinhard(c.y), tonemap_reinhard(c.z)};
}

inline float srgb_encode(float x) {
  x = clampf(x, 0.0f, 1.0f);
  return x <= 0.0031308f ? 12.92f * x : 1.055f * std::pow(x, 1.0f / 2.4f) - 0.055f;
}

inline float srgb_decode(float x) {
  x = clampf(x, 0.0f, 1.0f);
  return x <= 0.04045f ? x / 12.92f : std::pow((x + 0.055f) / 1.055f, 2.4f);
}

struct Bounds3 {
  Vec3 lo{kInfinity, kInfinity, kInfinity};
  Vec3 hi{-kInfinity, -kInfinity, -kInfinity};

  void extend(const Vec3& p) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  void extend(const Bounds3& b) {
    extend(b.lo);
    extend(b.hi);
  }
  Vec3 diagonal() const { return hi - lo; }
  Vec3 center() const { return (lo + hi) * 0.5f; }
  float surface_area() const {
    Vec3 d = diagonal();
    if (d.x < 0 || d.y < 0 || d.z < 0) return 0.0f;
    return 2.0f * (d.x * d.y + d.y * d.z + d.z * d.x);
  }
  int max_extent() const {
    Vec3 d = diagonal();
    if (d.x > d.y && d.x > d.z) return 0;
    return d.y > d.z ? 1 : 2;
  }
};

}  // namespace refmc
