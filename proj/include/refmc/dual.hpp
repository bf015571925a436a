// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>

#include "refmc/core.hpp"

namespace refmc {

// Forward-mode dual number with N derivative slots. Used by the adjoint pass
// to differentiate one recorded path factor with respect to its local
// parameters (albedo, roughness, metalness, normal texel).
template <int N>
struct Dual {
  float v = 0.0f;
  std::array<float, N> d{};

  Dual() = default;
  Dual(float val) : v(val) {}

  static Dual var(float val, int slot) {
    Dual r(val);
    r.d[slot] = 1.0f;
    return r;
  }

  Dual operator-() const {
    Dual r(-v);
    for (int i = 0; i < N; ++i) r.d[i] = -d[i];
    return r;
  }
  Dual operator+(const Dual& o) const {
    Dual r(v + o.v);
    for (int i = 0; i < N; ++i) r.d[i] = d[i] + o.d[i];
    return r;
  }
  Dual operator-(const Dual& o) const {
    Dual r(v - o.v);
    for (int i = 0; i < N; ++i) r.d[i] = d[i] - o.d[i];
    return r;
  }
  Dual operator*(const Dual& o) const {
    Dual r(v * o.v);
    for (int i = 0; i < N; ++i) r.d[i] = d[i] * o.v + v * o.d[i];
    return r;
  }
  Dual operator/(const Dual& o) const {
    Dual r(v / o.v);
    float inv2 = 1.0f / (o.v * o.v);
    for (int i = 0; i < N; ++i) r.d[i] = (d[i] * o.v - v * o.d[i]) * inv2;
    return r;
  }
  Dual& operator+=(const Dual& o) { return *this = *this + o; }
  Dual& operator*=(const Dual& o) { return *this = *this * o; }
};

template <int N>
Dual<N> operator+(float a, const Dual<N>& b) { return Dual<N>(a) + b; }
template <int N>
Dual<N> operator-(float a, const Dual<N>& b) { return Dual<N>(a) - b; }
template <int N>
Dual<N> operator*(float a, const Dual<N>& b) { return Dual<N>(a) * b; }
template <int N>
Dual<N> operator/(float a, const Dual<N>& b) { return Dual<N>(a) / b; }

template <int N>
Dual<N> sqrt(const Dual<N>& a) {
  Dual<N> r(std::sqrt(a.v));
  float inv = r.v > 0.0f ? 0.5f / r.v : 0.0f;
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * inv;
  return r;
}

// Value accessors so shading code can branch without caring about T.
inline float scalar_value(float x) { return x; }
template <int N>
float scalar_value(const Dual<N>& x) { return x.v; }

// max against a detached constant; derivative passes through on the active side.
inline float dmax(float a, float b) { return std::max(a, b); }
template <int N>
Dual<N> dmax(const Dual<N>& a, float b) {
  return a.v >= b ? a : Dual<N>(b);
}

inline float dclamp(float a, float lo, float hi) { return clampf(a, lo, hi); }
template <int N>
Dual<N> dclamp(const Dual<N>& a, float lo, float hi) {
  if (a.v < lo) return Dual<N>(lo);
  if (a.v > hi) return Dual<N>(hi);
  return a;
}

template <typename T>
T pow5(const T& x) {
  T x2 = x * x;
  return x2 * x2 * x;
}

}  // namespace refmc
